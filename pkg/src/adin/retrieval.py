"""Re-identification evaluation: ranking, CMC / mAP, nuisance probes, direct transfer."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .models import ModelBundle, make_head
from .scheduler import chance_level, fit_head, accuracy
from .synthdata import Dataset

POLICIES = ("none", "same-id-same-nuisance")
METRICS = ("cosine", "euclidean")
CSV_HEADER = ["method", "top1", "top5", "top10", "mAP"]


@dataclass
class RankingReport:
    cmc: list[float]
    map: float
    ap: list[float]
    n_query: int
    n_gallery: int
    n_valid_queries: int
    n_skipped_queries: int
    policy: str
    metric: str = "cosine"

    def top(self, k: int) -> float:
        if not self.cmc:
            return 0.0
        return self.cmc[min(k, len(self.cmc)) - 1]

    def row(self, method: str) -> dict:
        return {"method": method, "top1": self.top(1), "top5": self.top(5), "top10": self.top(10),
                "mAP": self.map}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProbeReport:
    accuracy: list[float]
    chance: list[float]
    n_train: int = 0
    n_test: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def extract_embeddings(bundle: ModelBundle, samples) -> np.ndarray:
    x = samples.x if isinstance(samples, Dataset) else np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != bundle.encoder.d_in:
        raise DimensionError(f"model expects inputs of width {bundle.encoder.d_in}, got shape {x.shape}")
    return bundle.encoder(x).data


def distances(query: np.ndarray, gallery: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Pairwise distance matrix [n_query x n_gallery]; cosine distance is ``-similarity``."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.shape[1] != gallery.shape[1]:
        raise DimensionError("query and gallery embeddings differ in width")
    if metric == "euclidean":
        diff = query[:, None, :] - gallery[None, :, :]
        return np.einsum("qgd,qgd->qg", diff, diff)
    if metric == "cosine":
        def unit(a):
            n = np.linalg.norm(a, axis=1, keepdims=True)
            return a / np.where(n > 0, n, 1.0)
        return -(unit(query) @ unit(gallery).T)
    raise ConfigError(f"unknown metric {metric!r}; expected one of {METRICS}")


def rank(query: np.ndarray, gallery: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Gallery indices per query, nearest first; equal distances keep gallery order."""
    gallery = np.asarray(gallery)
    if gallery.shape[0] == 0:
        raise DataError("gallery is empty")
    return np.argsort(distances(query, gallery, metric), axis=1, kind="stable")


def _exact_ap(hit_ranks) -> Fraction:
    hit_ranks = sorted(int(r) for r in hit_ranks)
    return sum((Fraction(j + 1, r) for j, r in enumerate(hit_ranks)), Fraction(0)) / len(hit_ranks)


def average_precision(hit_ranks) -> float:
    """Mean over relevant items ``j`` (1-based, ascending) of ``j / rank_j``.

    Summed in exact rationals and rounded once, so the result does not
    depend on summation order.
    """
    return float(_exact_ap(hit_ranks))


def evaluate(query: Dataset, gallery: Dataset, ranking: np.ndarray, policy: str = "same-id-same-nuisance",
             metric: str = "cosine") -> RankingReport:
    """CMC and mAP from a precomputed ranking.

    Under ``same-id-same-nuisance`` gallery items sharing identity and
    first-type nuisance class with the query are dropped before ranks are
    counted. Queries left with no true match are skipped and counted.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown exclusion policy {policy!r}; expected one of {POLICIES}")
    ng = len(gallery)
    ranking = np.asarray(ranking)
    if ranking.shape != (len(query), ng):
        raise DimensionError(f"ranking shape {ranking.shape} != ({len(query)}, {ng})")
    hits_at = np.zeros(ng)
    aps = []
    skipped = 0
    for qi in range(len(query)):
        order = ranking[qi]
        same_id = gallery.y_id[order] == query.y_id[qi]
        keep = np.ones(ng, dtype=bool)
        if policy == "same-id-same-nuisance":
            keep = ~(same_id & (gallery.y_nuisance[order, 0] == query.y_nuisance[qi, 0]))
        good = same_id[keep]
        if not good.any():
            skipped += 1
            continue
        hit_ranks = np.flatnonzero(good) + 1
        hits_at[hit_ranks[0] - 1:] += 1
        aps.append(_exact_ap(hit_ranks.tolist()))
    n_valid = len(aps)
    cmc = (hits_at / n_valid).tolist() if n_valid else [0.0] * ng
    mean_ap = float(sum(aps, Fraction(0)) / n_valid) if n_valid else 0.0
    return RankingReport(cmc, mean_ap, [float(a) for a in aps], len(query), ng, n_valid, skipped, policy, metric)


def identity_disjoint_split(y_id, fraction: float = 0.3, seed=0) -> np.ndarray:
    """Boolean train mask that holds out whole identities (``fraction`` of them) for testing."""
    ids = np.unique(y_id)
    rng = np.random.default_rng(seed)
    test_ids = rng.choice(ids, size=max(1, int(round(fraction * len(ids)))), replace=False)
    return ~np.isin(y_id, test_ids)


def nuisance_probe(embeddings: np.ndarray, nuisance_labels, train_mask, seed=0, lr=0.5, passes=200,
                   batch_size=256) -> ProbeReport:
    """Train a fresh linear softmax head per nuisance type on frozen embeddings.

    Embeddings are standardized with train-split statistics so that probes on
    differently scaled encoders train alike. Chance is the majority-class
    frequency of the test split.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(nuisance_labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    train_mask = np.asarray(train_mask, dtype=bool)
    test_mask = ~train_mask
    if not train_mask.any() or not test_mask.any():
        raise DataError("probe split needs both train and test samples")
    mu = emb[train_mask].mean(axis=0)
    sd = emb[train_mask].std(axis=0)
    z = (emb - mu) / np.where(sd > 1e-12, sd, 1.0)
    rng = np.random.default_rng(seed)
    accs, chances = [], []
    for t in range(labels.shape[1]):
        y = labels[:, t]
        classes = np.unique(y[train_mask])
        if classes.size < 2:
            raise DataError(f"nuisance type {t}: probe train split holds a single class")
        k = int(y.max()) + 1
        head = make_head(rng, z.shape[1], max(k, 2))
        fit_head(head, z[train_mask], y[train_mask], lr, passes, batch_size, rng, tol=1e-6)
        accs.append(accuracy(head, z[test_mask], y[test_mask]))
        chances.append(chance_level(y[test_mask], max(k, 2)))
    return ProbeReport(accs, chances, int(train_mask.sum()), int(test_mask.sum()))


def direct_transfer_eval(bundle: ModelBundle, query: Dataset, gallery: Dataset, metric: str = "cosine",
                         policy: str = "same-id-same-nuisance") -> RankingReport:
    """Evaluate a frozen model on an unseen domain; raises if parameters change."""
    before = bundle.checksum()
    q = extract_embeddings(bundle, query)
    g = extract_embeddings(bundle, gallery)
    report = evaluate(query, gallery, rank(q, g, metric), policy, metric)
    if bundle.checksum() != before:
        raise RuntimeError("model parameters changed during evaluation")
    return report


def write_report_json(path, reports: dict):
    with open(path, "w") as fh:
        json.dump({k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in reports.items()}, fh, indent=2)


def write_report_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_HEADER, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
