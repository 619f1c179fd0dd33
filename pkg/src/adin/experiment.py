"""Transfer fixture and the baseline / NE / CaNE / RG comparison runner."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .retrieval import direct_transfer_eval, extract_embeddings, identity_disjoint_split, nuisance_probe
from .scheduler import Phase, TrainConfig, default_arch, substream, train
from .synthdata import make_transfer_pair, make_world, random_domain


@dataclass
class FixtureConfig:
    d_in: int = 32
    d_identity: int = 8
    d_nuisance: int = 4
    n_source_ids: int = 50
    n_target_ids: int = 50
    nuisance_classes: list[int] = field(default_factory=lambda: [6])
    samples_per_id: int = 20
    gamma: float = 0.7
    sigma: float = 0.3
    support_size: int = 2
    rho: float | None = 0.8
    popularity_decay: float = 0.6
    prototype_scale: float = 1.0
    offset_scale: float = 3.0
    shared_offsets: bool = False

    def __post_init__(self):
        checks = {"gamma": 0.0 <= self.gamma <= 1.0, "sigma": self.sigma >= 0.0,
                  "rho": self.rho is None or 0.0 < self.rho <= 1.0,
                  "support_size": all(1 <= self.support_size <= k for k in self.nuisance_classes),
                  "nuisance_classes": bool(self.nuisance_classes) and min(self.nuisance_classes) >= 2,
                  "n_source_ids": self.n_source_ids >= 1, "n_target_ids": self.n_target_ids >= 1,
                  "samples_per_id": self.samples_per_id >= 2,
                  "d_in": self.d_identity + self.d_nuisance <= self.d_in}
        for key, ok in checks.items():
            if not ok:
                raise ConfigError(f"{key}: invalid value {getattr(self, key)!r}")


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [64])
    d_feat: int = 32
    dual_branch: bool = False
    d_local: int | None = None


def acceptance_train_config(**overrides) -> TrainConfig:
    """Training schedule calibrated for the transfer comparison on the default fixture.

    A long pretrain gets identity features in place before any adversarial pass, and
    ``threshold_n_margin=0`` makes the adversary push val_N all the way down to the
    identity-informed chance level.
    """
    base = dict(epochs=100, pretrain_epochs=200, beta=850.0, threshold_n_margin=0.0)
    base.update(overrides)
    return TrainConfig(**base)


def make_fixture(fx: FixtureConfig, seed: int):
    """Source training set plus target query / gallery split for one seed."""
    rng = substream(seed, "data")
    world_seed, src_seed, tgt_seed, pair_seed = rng.integers(2**63, size=4)
    world = make_world(fx.d_in, fx.d_identity, fx.d_nuisance, world_seed)
    common = dict(gamma=fx.gamma, sigma=fx.sigma, support_size=fx.support_size, rho=fx.rho,
                  popularity_decay=fx.popularity_decay, prototype_scale=fx.prototype_scale,
                  offset_scale=fx.offset_scale)
    src = random_domain(world, fx.n_source_ids, fx.nuisance_classes, seed=src_seed, **common)
    tgt = random_domain(world, fx.n_target_ids, fx.nuisance_classes, seed=tgt_seed,
                        first_identity=fx.n_source_ids, offsets=src.offsets if fx.shared_offsets else None,
                        **common)
    source, query, gallery = make_transfer_pair(src, tgt, pair_seed, fx.samples_per_id * fx.n_source_ids,
                                                fx.samples_per_id * fx.n_target_ids)
    return source, query, gallery, (src, tgt)


@dataclass
class RunResult:
    method: str
    seed: int
    diverged: bool
    top1: float = float("nan")
    top5: float = float("nan")
    top10: float = float("nan")
    map: float = float("nan")
    probe: float = float("nan")
    chance: float = float("nan")
    final_val_i: float = float("nan")
    phases: dict = field(default_factory=dict)
    seconds: float = 0.0
    checksum: str = ""

    def row(self) -> dict:
        return {"method": self.method, "seed": self.seed, "top1": self.top1, "top5": self.top5,
                "top10": self.top10, "mAP": self.map, "probe": self.probe, "chance": self.chance,
                "val_I": self.final_val_i, "diverged": self.diverged, "checksum": self.checksum}


def probe_features(bundle, source, seed):
    emb = extract_embeddings(bundle, source)
    mask = identity_disjoint_split(source.y_id, 0.3, substream(seed, "probe"))
    return nuisance_probe(emb, source.y_nuisance, mask, seed=seed)


def run_method(method: str, seed: int, train_cfg: TrainConfig, fx: FixtureConfig = None,
               model: ModelConfig = None, fixture=None) -> RunResult:
    """Train one method on the fixture for ``seed`` and evaluate direct transfer + nuisance probe."""
    fx = fx or FixtureConfig()
    model = model or ModelConfig()
    source, query, gallery, _ = fixture or make_fixture(fx, seed)
    cfg = dataclasses.replace(train_cfg, loss_kind="none" if method == "baseline" else method, seed=seed)
    arch = default_arch(source, fx.n_source_ids, model.hidden, model.d_feat, model.dual_branch, model.d_local)
    t0 = time.perf_counter()
    try:
        bundle, state = train(cfg, source, arch)
    except DivergenceError:
        return RunResult(method, seed, True, seconds=time.perf_counter() - t0)
    report = direct_transfer_eval(bundle, query, gallery)
    probe = probe_features(bundle, source, seed)
    phases = {p.value: sum(r.get("phase") == p.value for r in state.log) for p in Phase}
    return RunResult(method, seed, False, report.top(1), report.top(5), report.top(10), report.map,
                     probe.accuracy[0], probe.chance[0], state.val_i, phases, time.perf_counter() - t0,
                     bundle.checksum())


def summarize(results: list[RunResult]) -> dict:
    """Mean and std per method over seeds (diverged runs excluded from metric means)."""
    out = {}
    for method in dict.fromkeys(r.method for r in results):
        rs = [r for r in results if r.method == method]
        ok = [r for r in rs if not r.diverged]
        entry = {"runs": len(rs), "diverged": len(rs) - len(ok)}
        for key in ("top1", "top5", "top10", "map", "probe", "chance", "final_val_i"):
            vals = np.array([getattr(r, key) for r in ok])
            entry[key] = float(vals.mean()) if len(vals) else float("nan")
            entry[key + "_std"] = float(vals.std()) if len(vals) else float("nan")
        out[method] = entry
    return out
