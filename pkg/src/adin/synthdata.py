"""Synthetic re-identification domains with entangled, skewed nuisances.

A sample of identity ``i`` observed under nuisance classes ``(n_1..n_T)`` is

    x = prototype[i] + gamma * sum_t offset_t[n_t] + N(0, sigma^2 I)

Prototypes live in an identity subspace and offsets in a nuisance subspace
of a shared "world" basis, so two domains can share the geometry while
drawing independent identities and nuisance offsets. Each identity is only
seen under ``s`` of the ``K`` classes of each nuisance type, with
truncated-geometric weights over that support; which classes make up the
support follows a global popularity skew.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, ParseError


@dataclass(frozen=True)
class World:
    identity_basis: np.ndarray  # [d_identity x d_in], orthonormal rows
    nuisance_basis: np.ndarray  # [d_nuisance x d_in]

    @property
    def d_in(self):
        return self.identity_basis.shape[1]


def make_world(d_in: int, d_identity: int, d_nuisance: int, seed) -> World:
    if d_identity + d_nuisance > d_in:
        raise ConfigError("identity and nuisance subspaces do not fit in d_in")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(d_in, d_in)))
    rows = q.T
    return World(rows[:d_identity].copy(), rows[d_identity:d_identity + d_nuisance].copy())


def support_weights(s: int, rho: float | None) -> np.ndarray:
    """Truncated geometric: ``rho (1-rho)^j`` for ``j < s-1``, tail mass on the last slot.

    ``rho=None`` gives uniform weights.
    """
    if s < 1:
        raise ConfigError("support size must be at least 1")
    if rho is None:
        return np.full(s, 1.0 / s)
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must lie in (0, 1], got {rho}")
    j = np.arange(s)
    w = rho * (1.0 - rho) ** j
    w[-1] = (1.0 - rho) ** (s - 1)
    return w


@dataclass
class DomainSpec:
    prototypes: np.ndarray  # [n_identities x d_in]
    offsets: list[np.ndarray]  # per nuisance type, [K_t x d_in]
    supports: list[np.ndarray]  # per nuisance type, [n_identities x s] class ids, most likely first
    sigma: float = 0.5
    gamma: float = 0.7
    support_size: int = 2
    rho: float | None = 0.8
    first_identity: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be nonnegative, got {self.sigma}")
        if self.rho is not None and not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")
        for k, sup in zip(self.nuisance_classes, self.supports):
            if not 1 <= self.support_size <= k:
                raise ConfigError(f"support size {self.support_size} outside [1, {k}]")
            if sup.shape != (self.n_identities, self.support_size):
                raise ConfigError("support table does not match identities x support size")
        if any(o.shape[1] != self.d_in for o in self.offsets):
            raise ConfigError("nuisance offsets do not match the input width")

    @property
    def n_identities(self):
        return self.prototypes.shape[0]

    @property
    def d_in(self):
        return self.prototypes.shape[1]

    @property
    def nuisance_classes(self) -> list[int]:
        return [o.shape[0] for o in self.offsets]

    @property
    def identity_ids(self) -> np.ndarray:
        return np.arange(self.first_identity, self.first_identity + self.n_identities)

    def conditional(self, t: int = 0) -> np.ndarray:
        """p(nuisance_t | identity) as an [n_identities x K_t] table."""
        w = support_weights(self.support_size, self.rho)
        table = np.zeros((self.n_identities, self.nuisance_classes[t]))
        for i, sup in enumerate(self.supports[t]):
            table[i, sup] = w
        return table

    def marginal(self, t: int = 0) -> np.ndarray:
        """Nuisance marginal implied by uniformly drawn identities."""
        return self.conditional(t).mean(axis=0)


def random_domain(world: World, n_identities: int, nuisance_classes=(6,), *, gamma=0.7, sigma=0.5,
                  support_size=2, rho: float | None = 0.8, popularity_decay=1.0, prototype_scale=1.0,
                  offset_scale=1.0, first_identity=0, seed=0, offsets=None) -> DomainSpec:
    """Draw prototypes, nuisance offsets and per-identity supports for one domain.

    Supports are sampled without replacement with class probability
    proportional to ``popularity_decay**k``; a decay below 1 skews the
    nuisance marginal toward low class ids. Passing ``offsets`` reuses
    another domain's nuisance offsets instead of drawing new ones.
    """
    rng = np.random.default_rng(seed)
    d_id = world.identity_basis.shape[0]
    d_n = world.nuisance_basis.shape[0]
    protos = prototype_scale * rng.normal(size=(n_identities, d_id)) @ world.identity_basis
    drawn = [offset_scale * rng.normal(size=(k, d_n)) @ world.nuisance_basis for k in nuisance_classes]
    if offsets is None:
        offsets = drawn
    supports = []
    for k in nuisance_classes:
        if not 1 <= support_size <= k:
            raise ConfigError(f"support size {support_size} outside [1, {k}]")
        pop = popularity_decay ** np.arange(k, dtype=np.float64)
        pop /= pop.sum()
        supports.append(np.stack([rng.choice(k, size=support_size, replace=False, p=pop)
                                  for _ in range(n_identities)]))
    return DomainSpec(protos, [np.array(o) for o in offsets], supports, sigma=sigma, gamma=gamma,
                      support_size=support_size, rho=rho, first_identity=first_identity)


@dataclass
class Sample:
    x: np.ndarray
    y_id: int
    y_nuisance: tuple[int, ...]


@dataclass
class Dataset:
    x: np.ndarray  # [n x d_in]
    y_id: np.ndarray  # [n] global identity ids
    y_nuisance: np.ndarray  # [n x T]
    nuisance_classes: list[int]
    first_identity: int = 0
    n_identities: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y_id = np.asarray(self.y_id, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y_nuisance = np.asarray(self.y_nuisance, dtype=np.int64)
        if self.x.ndim != 2:
            self.x = self.x.reshape(len(self.y_id), -1)
        if self.y_nuisance.ndim != 2:
            self.y_nuisance = self.y_nuisance.reshape(len(self.y_id), -1)
        if not np.isfinite(self.x).all():
            raise DataError("sample features must be finite")

    def __len__(self):
        return len(self.y_id)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(self.x[i], int(self.y_id[i]), tuple(int(v) for v in self.y_nuisance[i]))

    @property
    def d_in(self):
        return self.x.shape[1]

    @property
    def local_id(self) -> np.ndarray:
        """Identity labels shifted to ``[0, n_identities)`` for classifier heads."""
        return self.y_id - self.first_identity

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y_id[idx], self.y_nuisance[idx], list(self.nuisance_classes),
                       self.first_identity, self.n_identities, dict(self.meta))


def generate_domain(spec: DomainSpec, n_samples: int, seed) -> Dataset:
    """Draw ``n_samples``; every identity appears at least ``n_samples // n_id`` times."""
    n_id = spec.n_identities
    if n_samples < n_id:
        raise DataError(f"need at least one sample per identity ({n_id}), got {n_samples}")
    rng = np.random.default_rng(seed)
    local = rng.permutation(np.arange(n_samples) % n_id)
    w = support_weights(spec.support_size, spec.rho)
    y_n = np.empty((n_samples, len(spec.offsets)), dtype=np.int64)
    x = spec.prototypes[local].copy()
    for t, (off, sup) in enumerate(zip(spec.offsets, spec.supports)):
        slot = rng.choice(spec.support_size, size=n_samples, p=w)
        y_n[:, t] = sup[local, slot]
        x += spec.gamma * off[y_n[:, t]]
    x += spec.sigma * rng.normal(size=x.shape)
    return Dataset(x, local + spec.first_identity, y_n, spec.nuisance_classes, spec.first_identity, n_id,
                   {"seed": int(seed) if np.isscalar(seed) else str(seed), "n_samples": n_samples})


def split_query_gallery(ds: Dataset, seed) -> tuple[Dataset, Dataset]:
    """One query per (identity, first-nuisance class); each query keeps a cross-class gallery match."""
    rng = np.random.default_rng(seed)
    cams = ds.y_nuisance[:, 0]
    is_query = np.zeros(len(ds), dtype=bool)
    for ident in np.unique(ds.y_id):
        rows = np.flatnonzero(ds.y_id == ident)
        for c in rng.permutation(np.unique(cams[rows])):
            cand = rows[(cams[rows] == c) & ~is_query[rows]]
            pick = rng.choice(cand)
            is_query[pick] = True
            in_gallery = rows[~is_query[rows]]
            if not (cams[in_gallery] != c).any():
                is_query[pick] = False
    # Later picks can strip a camera an earlier query relied on; return those queries.
    changed = True
    while changed:
        changed = False
        for q in np.flatnonzero(is_query):
            g = ~is_query & (ds.y_id == ds.y_id[q]) & (cams != cams[q])
            if not g.any():
                is_query[q] = False
                changed = True
    return ds.subset(np.flatnonzero(is_query)), ds.subset(np.flatnonzero(~is_query))


def make_transfer_pair(source_spec: DomainSpec, target_spec: DomainSpec, seed, n_source=None, n_target=None):
    """Return ``(source, target_query, target_gallery)`` for direct-transfer evaluation."""
    overlap = np.intersect1d(source_spec.identity_ids, target_spec.identity_ids)
    if overlap.size:
        raise ConfigError(f"source and target share {overlap.size} identities")
    ss = np.random.SeedSequence(seed)
    s_src, s_tgt, s_split = ss.spawn(3)
    n_source = n_source or 20 * source_spec.n_identities
    n_target = n_target or 20 * target_spec.n_identities
    source = generate_domain(source_spec, n_source, s_src)
    target = generate_domain(target_spec, n_target, s_tgt)
    query, gallery = split_query_gallery(target, s_split)
    return source, query, gallery


# file I/O -------------------------------------------------------------------

MAGIC = "ADINDATA 1"


def _record_dtype(d_in, n_types):
    return np.dtype([("y_id", "<i8"), ("y_n", "<i8", (n_types,)), ("x", "<f8", (d_in,))])


def save_dataset(ds: Dataset, path, fmt: str | None = None):
    """Binary: one JSON header line then fixed-width little-endian records. ``.json`` paths use JSON."""
    path = Path(path)
    fmt = fmt or ("json" if path.suffix == ".json" else "binary")
    header = {"format": MAGIC, "n": len(ds), "d_in": int(ds.x.shape[1]), "n_types": int(ds.y_nuisance.shape[1]),
              "nuisance_classes": list(ds.nuisance_classes), "first_identity": int(ds.first_identity),
              "n_identities": int(ds.n_identities), "meta": ds.meta}
    if fmt == "json":
        header["records"] = [{"y_id": int(s.y_id), "y_n": list(s.y_nuisance), "x": s.x.tolist()} for s in ds]
        path.write_text(json.dumps(header))
        return path
    rec = np.zeros(len(ds), dtype=_record_dtype(header["d_in"], header["n_types"]))
    rec["y_id"] = ds.y_id
    rec["y_n"] = ds.y_nuisance
    rec["x"] = ds.x
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(rec.tobytes())
    return path


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    head = raw if nl < 0 else raw[:nl]
    try:
        header = json.loads(head)
    except (json.JSONDecodeError, UnicodeDecodeError):
        try:
            header = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ParseError(f"{path}: unreadable dataset header ({exc})", record=None, offset=0) from None
    if header.get("format") != MAGIC:
        raise ParseError(f"{path}: not a dataset file", offset=0)
    d_in, n_types, n = header["d_in"], header["n_types"], header["n"]
    if "records" in header:
        recs = header["records"]
        if len(recs) != n:
            raise ParseError(f"{path}: header says {n} records, found {len(recs)}", record=len(recs))
        x = np.zeros((n, d_in))
        y_id = np.zeros(n, dtype=np.int64)
        y_n = np.zeros((n, n_types), dtype=np.int64)
        for i, r in enumerate(recs):
            if len(r.get("x", ())) != d_in or len(r.get("y_n", ())) != n_types:
                raise ParseError(f"{path}: record {i} is malformed", record=i)
            x[i], y_id[i], y_n[i] = r["x"], r["y_id"], r["y_n"]
    else:
        dt = _record_dtype(d_in, n_types)
        body = raw[nl + 1:]
        if len(body) != n * dt.itemsize:
            bad = len(body) // dt.itemsize
            raise ParseError(f"{path}: record {bad} truncated at byte offset {nl + 1 + bad * dt.itemsize} "
                             f"(expected {n} records of {dt.itemsize} bytes)",
                             record=bad, offset=nl + 1 + bad * dt.itemsize)
        rec = np.frombuffer(body, dtype=dt)
        x, y_id, y_n = rec["x"].reshape(n, d_in), rec["y_id"], rec["y_n"].reshape(n, n_types)
    return Dataset(np.array(x), np.array(y_id), np.array(y_n), header["nuisance_classes"],
                   header["first_identity"], header["n_identities"], header.get("meta", {}))


def histograms(ds: Dataset, t: int = 0) -> dict:
    """Samples per identity and distinct nuisance classes per identity."""
    ids, counts = np.unique(ds.y_id, return_counts=True)
    classes = [int(np.unique(ds.y_nuisance[ds.y_id == i, t]).size) for i in ids]
    return {"samples_per_identity": dict(zip(ids.tolist(), counts.tolist())),
            "classes_per_identity": dict(zip(ids.tolist(), classes)),
            "nuisance_marginal": np.bincount(ds.y_nuisance[:, t], minlength=ds.nuisance_classes[t]).tolist()}
