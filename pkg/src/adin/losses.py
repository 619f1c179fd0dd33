"""Identity and adversarial losses.

All batch reductions are arithmetic means. The adversarial options act on
the nuisance head's softmax output ``c``:

* reverse gradient (``rg``): the negated nuisance cross-entropy
* negative entropy (``ne``): ``sum_k c_k log c_k``
* calibrated negative entropy (``cane``): ``sum_k p_k c_k log c_k`` where
  ``p`` is the nuisance class prior of the training set
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, LabelError
from .models import CenterBank


class LossKind(str, enum.Enum):
    REVERSE_GRADIENT = "rg"
    NEGATIVE_ENTROPY = "ne"
    CALIBRATED_NEGATIVE_ENTROPY = "cane"

    @classmethod
    def parse(cls, value) -> "LossKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown adversarial loss {value!r}; expected rg, ne or cane") from None


@dataclass(frozen=True)
class ClassPrior:
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 1 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ConfigError("class prior must be a nonnegative vector summing to 1")
        object.__setattr__(self, "p", p)

    def __len__(self):
        return len(self.p)

    @classmethod
    def uniform(cls, k):
        return cls(np.full(k, 1.0 / k))


@dataclass(frozen=True)
class LossWeights:
    beta: float = 1.0
    lambda_center: float = 0.005

    def __post_init__(self):
        if self.beta < 0 or self.lambda_center < 0:
            raise ConfigError("loss weights must be nonnegative")


def _onehot(y, k) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise LabelError("labels must be a 1-D sequence")
    if y.size and (y.min() < 0 or y.max() >= k or not np.issubdtype(y.dtype, np.integer)):
        raise LabelError(f"labels must be integers in [0, {k})")
    out = np.zeros((y.size, k))
    out[np.arange(y.size), y] = 1.0
    return out


def cross_entropy(c: Tensor, y) -> Tensor:
    """Mean of ``-log c[i, y_i]`` over the batch; ``c`` holds softmax rows."""
    onehot = _onehot(y, c.shape[1])
    if onehot.shape[0] != c.shape[0]:
        raise LabelError(f"{onehot.shape[0]} labels for a batch of {c.shape[0]}")
    picked = (ad.log(c) * Tensor(onehot)).sum()
    return picked * (-1.0 / c.shape[0])


def loss_rg(c: Tensor, y) -> Tensor:
    return -cross_entropy(c, y)


def loss_ne(c: Tensor) -> Tensor:
    return (c * ad.log(c)).sum() * (1.0 / c.shape[0])


def loss_cane(c: Tensor, prior: ClassPrior) -> Tensor:
    if len(prior) != c.shape[1]:
        raise ConfigError(f"prior has {len(prior)} classes but the head outputs {c.shape[1]}")
    # Weight tiled to a full matrix: the tape only broadcasts scalars and bias rows.
    w = Tensor(np.broadcast_to(prior.p, c.shape))
    return (c * ad.log(c) * w).sum() * (1.0 / c.shape[0])


def center_loss(feat: Tensor, y, centers: CenterBank, center_lr: float = 0.5):
    """Return ``(loss, updated_centers)``.

    ``loss = 1/(2B) * sum_i ||feat_i - center_{y_i}||^2``. Each center seen in
    the batch moves toward its batch mean by ``center_lr``; the input bank is
    not modified.
    """
    y = np.asarray(y)
    n_id = centers.centers.shape[0]
    if y.size and (y.min() < 0 or y.max() >= n_id):
        raise LabelError(f"label outside the {n_id} known identities")
    if len(y) != feat.shape[0]:
        raise LabelError(f"{len(y)} labels for a batch of {feat.shape[0]}")
    diff = feat - Tensor(centers.centers[y])
    loss = ad.square(diff).sum() * (0.5 / feat.shape[0])

    new = centers.copy()
    for j in np.unique(y):
        batch_mean = feat.data[y == j].mean(axis=0)
        new.centers[j] += center_lr * (batch_mean - new.centers[j])
    return loss, new


def identity_loss(c_id: Tensor, y_id, feat: Tensor, centers: CenterBank,
                  weights: LossWeights = LossWeights(), center_lr: float = 0.5):
    """Cross-entropy plus weighted center loss; returns ``(loss, updated_centers)``."""
    ce = cross_entropy(c_id, y_id)
    cl, new_centers = center_loss(feat, y_id, centers, center_lr)
    if weights.lambda_center == 0:
        return ce, new_centers
    return ce + cl * weights.lambda_center, new_centers


def estimate_prior(labels, k: int) -> ClassPrior:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("cannot estimate a class prior from no labels")
    if labels.min() < 0 or labels.max() >= k:
        raise LabelError(f"labels must lie in [0, {k})")
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    return ClassPrior(counts / counts.sum())


def adversarial_loss(c: Tensor, kind: LossKind, y=None, prior: ClassPrior | None = None) -> Tensor:
    kind = LossKind.parse(kind)
    if kind is LossKind.REVERSE_GRADIENT:
        if y is None:
            raise ConfigError("reverse-gradient loss needs nuisance labels")
        return loss_rg(c, y)
    if kind is LossKind.NEGATIVE_ENTROPY:
        return loss_ne(c)
    if prior is None:
        raise ConfigError("calibrated negative entropy needs a class prior")
    return loss_cane(c, prior)


def multi_nuisance_adv_loss(logits: Sequence[Tensor], kind, priors: Sequence[ClassPrior] | None = None,
                            labels: Sequence | None = None) -> Tensor:
    """Unweighted sum of the per-nuisance adversarial losses."""
    kind = LossKind.parse(kind)
    n = len(logits)
    if n == 0:
        raise ConfigError("need at least one nuisance head")
    if kind is LossKind.CALIBRATED_NEGATIVE_ENTROPY and (priors is None or len(priors) != n):
        raise ConfigError(f"need one prior per nuisance type ({n})")
    if kind is LossKind.REVERSE_GRADIENT and (labels is None or len(labels) != n):
        raise ConfigError(f"need one label vector per nuisance type ({n})")
    total = None
    for t, z in enumerate(logits):
        term = adversarial_loss(ad.softmax(z), kind,
                                y=None if labels is None else labels[t],
                                prior=None if priors is None else priors[t])
        total = term if total is None else total + term
    return total
