"""Threshold-driven alternating training.

Each epoch picks one of three phases from the current validation accuracies:

1. identity recovery when ``val_I < trigger``: full identity passes until
   ``val_I > target`` (or a pass cap),
2. adversarial suppression when ``val_N > threshold_N``: one step on the
   adversarial loss over all training examples, updating encoder and
   nuisance heads,
3. identity boost otherwise: one identity pass.

After the phase both heads are re-drawn and retrained on frozen encoder
features, so ``val_N`` always comes from a freshly trained nuisance head.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, DataError, DivergenceError
from .losses import (ClassPrior, LossKind, LossWeights, cross_entropy, estimate_prior, identity_loss,
                     multi_nuisance_adv_loss)
from .models import HeadParams, ModelBundle, build_bundle, head_logits, reinit_head
from .synthdata import Dataset

log = logging.getLogger(__name__)

STREAMS = {"data": 0, "init": 1, "shuffle": 2, "split": 3, "reinit": 4, "probe": 5}


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name]])


class Phase(str, enum.Enum):
    IDENTITY_RECOVERY = "identity_recovery"
    ADVERSARIAL_SUPPRESSION = "adversarial_suppression"
    IDENTITY_BOOST = "identity_boost"


@dataclass
class TrainConfig:
    threshold_i_trigger: float = 0.6
    threshold_i_target: float = 0.8
    threshold_n: float | None = None  # None: identity-informed chance + threshold_n_margin
    threshold_n_margin: float = 0.1
    epochs: int = 50
    pretrain_epochs: int = 20
    batch_size: int = 32
    lr_encoder: float = 0.01
    lr_heads: float = 0.05
    loss_kind: str = "cane"  # rg | ne | cane | none (identity-only baseline)
    beta: float = 1.0
    lambda_center: float = 0.005
    center_lr: float = 0.5
    reinit_period: int = 1
    recovery_cap: int = 20
    retrain_cap: int = 50
    retrain_batch_size: int = 32
    retrain_tol: float = 1e-4
    adv_chunk: int = 4096
    adv_renormalize: bool = True
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("threshold_i_trigger", "threshold_i_target"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.threshold_n is not None and not 0.0 <= self.threshold_n <= 1.0:
            raise ConfigError("threshold_n must lie in [0, 1]")
        if self.threshold_i_trigger > self.threshold_i_target:
            raise ConfigError("threshold_i_trigger must not exceed threshold_i_target")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.batch_size < 1 or self.retrain_batch_size < 1 or self.adv_chunk < 1:
            raise ConfigError("batch sizes must be positive")
        if self.reinit_period < 1:
            raise ConfigError("reinit_period must be positive")
        if self.lr_encoder < 0 or self.lr_heads < 0:
            raise ConfigError("learning rates must be nonnegative")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.loss_kind != "none":
            LossKind.parse(self.loss_kind)
            if self.beta <= 0:
                raise ConfigError("beta must be positive when adversarial training is enabled")
        LossWeights(self.beta, self.lambda_center)

    @property
    def adversarial(self) -> bool:
        return self.loss_kind != "none"

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.beta, self.lambda_center)


@dataclass
class TrainState:
    epoch: int = 0
    val_i: float = 0.0
    val_n: float = 0.0
    phase: Phase | None = None
    log: list[dict] = field(default_factory=list)


@dataclass
class TrainData:
    train: Dataset
    val: Dataset
    priors: list[ClassPrior]
    n_identities: int

    @property
    def n_types(self):
        return self.train.y_nuisance.shape[1]


def split_validation(ds: Dataset, fraction: float, seed) -> tuple[Dataset, Dataset]:
    """Hold out ``fraction`` of each identity's samples (at least one when it has two or more)."""
    rng = np.random.default_rng(seed)
    val = np.zeros(len(ds), dtype=bool)
    for ident in np.unique(ds.y_id):
        rows = rng.permutation(np.flatnonzero(ds.y_id == ident))
        if len(rows) < 2:
            continue
        k = max(1, int(round(fraction * len(rows))))
        val[rows[:k]] = True
    return ds.subset(np.flatnonzero(~val)), ds.subset(np.flatnonzero(val))


def prepare_data(ds: Dataset, config: TrainConfig) -> TrainData:
    if len(ds) == 0:
        raise DataError("training set is empty")
    train, val = split_validation(ds, config.val_fraction, substream(config.seed, "split"))
    if len(val) == 0:
        raise DataError("validation split is empty; need at least two samples per identity")
    # Fixed population quantity: estimated once from the training split.
    priors = [estimate_prior(train.y_nuisance[:, t], k) for t, k in enumerate(ds.nuisance_classes)]
    n_id = ds.n_identities or int(ds.local_id.max()) + 1
    return TrainData(train, val, priors, n_id)


def default_arch(ds: Dataset, n_identities: int, hidden=(64,), d_feat=32, dual_branch=False, d_local=None):
    arch = {"d_in": ds.d_in, "hidden": list(hidden), "d_feat": d_feat, "n_identities": int(n_identities),
            "nuisance_classes": list(ds.nuisance_classes), "dual_branch": bool(dual_branch)}
    if dual_branch:
        arch["d_local"] = d_local or d_feat
    return arch


# primitives -----------------------------------------------------------------

def sgd_step(params, grads, lr):
    for p, g in zip(params, grads):
        p.data -= lr * g


def features(bundle: ModelBundle, x) -> np.ndarray:
    return bundle.encoder(x).data


def accuracy(head: HeadParams, feat: np.ndarray, y) -> float:
    if len(y) == 0:
        return 0.0
    pred = head_logits(head, feat).data.argmax(axis=1)
    return float((pred == np.asarray(y)).mean())


def chance_level(y, k) -> float:
    counts = np.bincount(np.asarray(y), minlength=k)
    return float(counts.max() / counts.sum())


def _check_finite(value: float, bundle: ModelBundle, last_good: ModelBundle, epoch, what):
    if not math.isfinite(value) or not all(np.isfinite(a).all() for _, a in bundle.named_parameters()):
        raise DivergenceError(f"{what} became non-finite at epoch {epoch}", state=last_good, epoch=epoch)


def _softmax_rows(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def fit_head(head: HeadParams, feat: np.ndarray, y, lr, max_passes, batch_size, rng, tol=1e-4,
             standardize=True) -> float:
    """SGD on cross-entropy over frozen features; stops early once a pass improves by < ``tol``.

    With the features frozen the head is plain softmax regression, so the
    step uses the closed-form logit gradient ``(softmax - onehot) / B``
    instead of a tape (tests check the two agree). With ``standardize`` the
    fit runs on z-scored features and the scaling is folded back into the
    weights afterwards, which makes ``lr`` independent of the feature scale.
    """
    y = np.asarray(y)
    n = len(y)
    k = head.weight.shape[1]
    if n and (y.min() < 0 or y.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    if standardize and n:
        mu = feat.mean(axis=0)
        sd = feat.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        feat = (feat - mu) / sd
    w, b = head.weight.data, head.bias.data
    rows = np.arange(n)
    prev = math.inf
    mean_loss = math.inf
    for _ in range(max_passes):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb = feat[idx]
            s = _softmax_rows(xb @ w + b)
            r = rows[:len(idx)]
            total -= np.log(np.maximum(s[r, y[idx]], 1e-12)).sum()
            s[r, y[idx]] -= 1.0
            s /= len(idx)
            w -= lr * (xb.T @ s)
            b -= lr * s.sum(axis=0)
        mean_loss = total / n
        if not math.isfinite(mean_loss) or prev - mean_loss < tol:
            break
        prev = mean_loss
    if standardize and n:
        w /= sd[:, None]
        b -= mu @ w
    return mean_loss


def validation_accuracies(bundle: ModelBundle, data: TrainData) -> tuple[float, float]:
    feat = features(bundle, data.val.x)
    val_i = accuracy(bundle.id_head, feat, data.val.local_id)
    val_n = float(np.mean([accuracy(h, feat, data.val.y_nuisance[:, t])
                           for t, h in enumerate(bundle.nuisance_heads)]))
    return val_i, val_n


def nuisance_chance(data: TrainData) -> float:
    return float(np.mean([chance_level(data.val.y_nuisance[:, t], k)
                          for t, k in enumerate(data.train.nuisance_classes)]))


def identity_informed_chance(data: TrainData) -> float:
    """Validation nuisance accuracy of guessing each identity's most frequent training class.

    This is what a nuisance head reaches on features that carry identity and
    nothing else, because validation images come from training identities.
    """
    rates = []
    for t, k in enumerate(data.train.nuisance_classes):
        table = np.zeros((data.n_identities, k))
        np.add.at(table, (data.train.local_id, data.train.y_nuisance[:, t]), 1)
        guess = table.argmax(axis=1)
        rates.append(float((guess[data.val.local_id] == data.val.y_nuisance[:, t]).mean()))
    return float(np.mean(rates))


def resolve_config(config: TrainConfig, data: TrainData) -> TrainConfig:
    """Fill an unset ``threshold_n`` with the identity-informed chance level plus ``threshold_n_margin``."""
    if config.threshold_n is not None:
        return config
    base = max(nuisance_chance(data), identity_informed_chance(data))
    return dataclasses.replace(config, threshold_n=min(1.0, base + config.threshold_n_margin))


def _identity_pass(bundle: ModelBundle, data: TrainData, config: TrainConfig, rng) -> float:
    params = bundle.encoder.parameters()
    n_enc = len(params)
    params = params + bundle.id_head.parameters()
    x, y = data.train.x, data.train.local_id
    order = rng.permutation(len(y))
    total = 0.0
    for start in range(0, len(y), config.batch_size):
        idx = order[start:start + config.batch_size]
        with Tape() as tape:
            feat = bundle.encoder(x[idx])
            c = ad.softmax(head_logits(bundle.id_head, feat))
            loss, centers = identity_loss(c, y[idx], feat, bundle.centers, config.weights, config.center_lr)
        grads = tape.gradient(loss, params)
        sgd_step(params[:n_enc], grads[:n_enc], config.lr_encoder)
        sgd_step(params[n_enc:], grads[n_enc:], config.lr_heads)
        bundle.centers = centers
        total += loss.item() * len(idx)
    return total / len(y)


# phases ---------------------------------------------------------------------

def select_phase(state: TrainState, config: TrainConfig) -> Phase:
    if state.val_i < config.threshold_i_trigger:
        return Phase.IDENTITY_RECOVERY
    thr_n = 1.0 if config.threshold_n is None else config.threshold_n
    if config.adversarial and state.val_n > thr_n:
        return Phase.ADVERSARIAL_SUPPRESSION
    return Phase.IDENTITY_BOOST


def pretrain(bundle: ModelBundle, data: TrainData, config: TrainConfig, rng=None):
    """Joint encoder + identity-head training, then nuisance heads on frozen features.

    Returns ``(bundle, val_i, val_n)``.
    """
    if len(data.train) == 0:
        raise DataError("training set is empty")
    rng = rng or substream(config.seed, "shuffle")
    for _ in range(config.pretrain_epochs):
        loss = _identity_pass(bundle, data, config, rng)
        if not math.isfinite(loss):
            raise DivergenceError("identity loss became non-finite during pretraining")
    if config.pretrain_epochs:
        feat = features(bundle, data.train.x)
        for t, head in enumerate(bundle.nuisance_heads):
            fit_head(head, feat, data.train.y_nuisance[:, t], config.lr_heads, config.retrain_cap,
                     config.retrain_batch_size, rng, config.retrain_tol)
    val_i, val_n = validation_accuracies(bundle, data)
    return bundle, val_i, val_n


def run_identity_phase(bundle: ModelBundle, data: TrainData, config: TrainConfig, state: TrainState,
                       recovery: bool, rng) -> dict:
    """Minibatch SGD on the identity loss over encoder and identity head."""
    info = {"passes": 0, "loss": None}
    while True:
        info["loss"] = _identity_pass(bundle, data, config, rng)
        info["passes"] += 1
        if not math.isfinite(info["loss"]):
            return info
        state.val_i, state.val_n = validation_accuracies(bundle, data)
        if not recovery or state.val_i > config.threshold_i_target:
            return info
        if info["passes"] >= config.recovery_cap:
            info["event"] = "recovery_cap"
            log.info("epoch %d: identity recovery stopped at the %d-pass cap (val_I=%.3f)",
                     state.epoch, config.recovery_cap, state.val_i)
            return info


def renormalize(feat: Tensor, eps: float = 1e-8) -> Tensor:
    """Rescale features to their current per-unit mean and std, with the statistics inside the graph.

    The value equals ``feat`` (up to rounding) but the gradient no longer
    rewards shrinking or shifting every feature at once: a linear head on
    the output only grows less confident if nuisance directions change
    relative to the rest of the feature.
    """
    mu = feat.mean(axis=0)
    centred = feat - mu
    inv_sd = ad.power(ad.square(centred).mean(axis=0) + eps, -0.5)
    sd_now = 1.0 / inv_sd.data
    return centred * (inv_sd * Tensor(sd_now)) + Tensor(mu.data)


def run_adversarial_phase(bundle: ModelBundle, data: TrainData, config: TrainConfig) -> dict:
    """One gradient step on ``beta * L_adv`` over all training examples.

    The full-data gradient is accumulated over chunks, so the step equals a
    single full-batch step at the pre-step parameters. With
    ``adv_renormalize`` the nuisance heads see features passed through
    :func:`renormalize`, using per-chunk statistics.
    """
    kind = LossKind.parse(config.loss_kind)
    enc_params = bundle.encoder.parameters()
    head_params = [p for h in bundle.nuisance_heads for p in h.parameters()]
    params = enc_params + head_params
    acc = [np.zeros_like(p.data) for p in params]
    x = data.train.x
    n = len(x)
    total = 0.0
    for start in range(0, n, config.adv_chunk):
        sl = slice(start, start + config.adv_chunk)
        frac = (min(n, start + config.adv_chunk) - start) / n
        with Tape() as tape:
            feat = bundle.encoder(x[sl])
            if config.adv_renormalize:
                feat = renormalize(feat)
            logits = [head_logits(h, feat) for h in bundle.nuisance_heads]
            labels = [data.train.y_nuisance[sl, t] for t in range(data.n_types)]
            loss = multi_nuisance_adv_loss(logits, kind, data.priors, labels) * (config.beta * frac)
        for a, g in zip(acc, tape.gradient(loss, params)):
            a += g
        total += loss.item()
    if math.isfinite(total):
        sgd_step(enc_params, acc[:len(enc_params)], config.lr_encoder)
        sgd_step(head_params, acc[len(enc_params):], config.lr_heads)
    return {"loss": total}


def reinit_and_retrain_heads(bundle: ModelBundle, data: TrainData, config: TrainConfig, seed, rng) -> dict:
    """Re-draw both heads and retrain them on frozen features; the encoder is untouched."""
    seeds = np.random.SeedSequence(seed).spawn(1 + len(bundle.nuisance_heads))
    bundle.id_head = reinit_head(bundle.id_head, seeds[0])
    bundle.nuisance_heads = [reinit_head(h, s) for h, s in zip(bundle.nuisance_heads, seeds[1:])]
    feat = features(bundle, data.train.x)
    out = {"id_loss": fit_head(bundle.id_head, feat, data.train.local_id, config.lr_heads, config.retrain_cap,
                               config.retrain_batch_size, rng, config.retrain_tol)}
    out["nuisance_loss"] = [fit_head(h, feat, data.train.y_nuisance[:, t], config.lr_heads, config.retrain_cap,
                                     config.retrain_batch_size, rng, config.retrain_tol)
                            for t, h in enumerate(bundle.nuisance_heads)]
    return out


def train(config: TrainConfig, dataset: Dataset, arch: dict | None = None, bundle: ModelBundle | None = None,
          on_epoch=None):
    """Pretrain, then run the alternating schedule for ``config.epochs`` epochs.

    Returns ``(bundle, state)``. ``on_epoch(bundle, record)`` is called with the
    pretrain record and then after every epoch. A non-finite loss raises
    :class:`DivergenceError` carrying the last finite bundle.
    """
    data = prepare_data(dataset, config)
    config = resolve_config(config, data)
    if bundle is None:
        arch = arch or default_arch(dataset, data.n_identities)
        bundle = build_bundle(arch, substream(config.seed, "init"))
    shuffle = substream(config.seed, "shuffle")
    reinit_seeds = substream(config.seed, "reinit")

    bundle, val_i, val_n = pretrain(bundle, data, config, shuffle)
    state = TrainState(epoch=0, val_i=val_i, val_n=val_n)
    state.log.append({"epoch": -1, "phase": "pretrain", "val_I": val_i, "val_N": val_n,
                      "threshold_N": config.threshold_n})
    if on_epoch is not None:
        on_epoch(bundle, state.log[0])

    for epoch in range(config.epochs):
        state.epoch = epoch
        last_good = bundle.clone()
        record = {"epoch": epoch, "val_I": state.val_i, "val_N": state.val_n}
        state.phase = select_phase(state, config)
        record["phase"] = state.phase.value
        if state.phase is Phase.ADVERSARIAL_SUPPRESSION:
            info = run_adversarial_phase(bundle, data, config)
        else:
            info = run_identity_phase(bundle, data, config, state,
                                      state.phase is Phase.IDENTITY_RECOVERY, shuffle)
        record["losses"] = {"phase": info["loss"]}
        if "event" in info:
            record["event"] = info["event"]
        if "passes" in info:
            record["passes"] = info["passes"]
        _check_finite(info["loss"], bundle, last_good, epoch, f"{state.phase.value} loss")

        seed = int(reinit_seeds.integers(2**63))
        if (epoch + 1) % config.reinit_period == 0:
            record["losses"].update(reinit_and_retrain_heads(bundle, data, config, seed, shuffle))
        state.val_i, state.val_n = validation_accuracies(bundle, data)
        record["val_I_after"], record["val_N_after"] = state.val_i, state.val_n
        state.log.append(record)
        if on_epoch is not None:
            on_epoch(bundle, record)
    return bundle, state


def replay_phases(log_records: list[dict], config: TrainConfig) -> list[str]:
    """Re-run phase selection on logged accuracies.

    An unset ``threshold_n`` is taken from the pretrain record, where the
    resolved value is logged.
    """
    if config.threshold_n is None:
        resolved = [r["threshold_N"] for r in log_records if r.get("phase") == "pretrain"]
        if resolved:
            config = dataclasses.replace(config, threshold_n=resolved[0])
    return [select_phase(TrainState(val_i=r["val_I"], val_n=r["val_N"]), config).value
            for r in log_records if r["epoch"] >= 0]
