"""Training losses of both stages as pure functions over tensors.

Image and map losses are normalized by element count so their magnitudes
do not depend on resolution.  Labels are binary with 0 = live, 1 = spoof.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LIVE = 0
SPOOF = 1
BCE_EPS = 1e-7


class InsufficientSamplesError(ValueError):
    """A batch cannot form a single valid triplet."""


@dataclass(frozen=True)
class TripletConfig:
    alpha: float = 0.2  # margin of the all-triplets term
    margin: float = 0.5  # margin of the batch-hard term
    positive_only: bool = True  # average the all-triplets term over active triplets only

    def __post_init__(self):
        if not (self.alpha > 0 and self.margin > 0):
            raise ValueError("triplet margins must be positive")


@dataclass(frozen=True)
class LossWeights:
    recon: float = 4.0
    adversarial: float = 1.0
    triplet: float = 3.0
    live_map: float = 5.0
    classifier: float = 5.0

    def __post_init__(self):
        for name in ("recon", "adversarial", "triplet", "live_map", "classifier"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class BatchFeatures:
    """Per-sample feature vectors ``[N, F]`` with their 0/1 labels."""

    features: Tensor
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2 or len(self.labels) != self.features.shape[0]:
            raise ShapeError(
                f"features {self.features.shape} do not match {len(self.labels)} labels"
            )

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        live = np.flatnonzero(self.labels == LIVE)
        spoof = np.flatnonzero(self.labels == SPOOF)
        if len(live) < 2 or len(spoof) < 1:
            raise InsufficientSamplesError(
                f"need >=2 live and >=1 spoof samples, got {len(live)} and {len(spoof)}"
            )
        return live, spoof


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def l_live(x_real: Tensor, x_hat: Tensor) -> Tensor:
    """Stage-1 autoencoder loss: per-sample squared L2 error, element-normalized."""
    _same_shape(x_real, x_hat, "l_live")
    return T.mean(T.square(x_real - x_hat))


def l_recon(x: Tensor, x_syn: Tensor) -> Tensor:
    """Stage-2 reconstruction loss over the mixed live+spoof batch."""
    _same_shape(x, x_syn, "l_recon")
    return T.mean(T.square(x - x_syn))


def _nonempty(scores: Tensor) -> None:
    if scores.size == 0:
        raise ValueError("empty batch of discriminator scores")


def l_gen(d_scores_fake: Tensor) -> Tensor:
    """Least-squares generator loss; scores are sigmoid outputs."""
    _nonempty(d_scores_fake)
    return T.mean(T.square(d_scores_fake - 1.0))


def l_dis(d_scores_real: Tensor, d_scores_fake: Tensor) -> Tensor:
    _nonempty(d_scores_real)
    _nonempty(d_scores_fake)
    return T.mean(T.square(d_scores_real - 1.0)) + T.mean(T.square(d_scores_fake))


def _sq_dist(f: Tensor, i: np.ndarray, j: np.ndarray) -> Tensor:
    return T.sum(T.square(T.take(f, i) - T.take(f, j)), axes=1)


def triplet_normal(batch: BatchFeatures, alpha: float, positive_only: bool = True) -> Tensor:
    """Hinge over every (live anchor, other live, spoof) triplet.

    By default the sum is divided by the number of triplets with a strictly
    positive hinge (0 if there are none); ``positive_only=False`` divides by
    the total triplet count instead.
    """
    live, spoof = batch.split()
    a, p, n = np.meshgrid(live, live, spoof, indexing="ij")
    keep = a != p
    a, p, n = a[keep], p[keep], n[keep]
    f = batch.features
    hinge = T.relu(_sq_dist(f, a, p) - _sq_dist(f, a, n) + alpha)
    count = int(np.count_nonzero(hinge.data > 0)) if positive_only else len(a)
    total = T.sum(hinge)
    if count == 0:
        return total * 0.0
    return total / count


def triplet_hard(batch: BatchFeatures, margin: float) -> Tensor:
    """Batch-hard hinge: farthest live positive vs nearest spoof negative,
    averaged over live anchors."""
    live, spoof = batch.split()
    x = batch.features.data
    d = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    d_live = d[np.ix_(live, live)].copy()
    np.fill_diagonal(d_live, -np.inf)
    hard_pos = live[np.argmax(d_live, axis=1)]
    hard_neg = spoof[np.argmin(d[np.ix_(live, spoof)], axis=1)]
    f = batch.features
    return T.mean(T.relu(_sq_dist(f, live, hard_pos) - _sq_dist(f, live, hard_neg) + margin))


def l_t(
    tail_features: Sequence[BatchFeatures], cfg: TripletConfig, normal_only: bool = False
) -> Tensor:
    """Sum of both triplet terms over the three decoder taps."""
    if len(tail_features) != 3:
        raise ValueError(f"expected features from 3 layers, got {len(tail_features)}")
    total = None
    for batch in tail_features:
        term = triplet_normal(batch, cfg.alpha, cfg.positive_only)
        if not normal_only:
            term = term + triplet_hard(batch, cfg.margin)
        total = term if total is None else total + term
    return total


def l_r(spoof_maps_live: Tensor, labels=None) -> Tensor:
    """Mean absolute spoof-map value of live samples (normalized L1)."""
    if labels is not None and np.any(np.asarray(labels) != LIVE):
        raise ValueError("l_r accepts live samples only")
    if spoof_maps_live.size == 0:
        raise ValueError("l_r needs at least one live map")
    return T.mean(T.absolute(spoof_maps_live))


def l_c(labels, y_hat: Tensor) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [eps, 1-eps]."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.size != y_hat.size:
        raise ShapeError(f"{y.size} labels for {y_hat.size} predictions")
    p = T.clip(T.reshape(y_hat, (y.size,)), BCE_EPS, 1.0 - BCE_EPS)
    ll = Tensor(y) * T.log(p) + Tensor(1.0 - y) * T.log(1.0 - p)
    return -T.mean(ll)


def combined_loss(l_recon, l_gen, l_t, l_r, l_c, w: LossWeights = LossWeights()):
    """Weighted sum of the stage-2 components.

    Components may be tensors or floats; ``None`` marks a component removed
    by an ablation and contributes nothing.  The summation order is fixed so
    float and tensor evaluation agree bit for bit.
    """
    total = None
    for weight, comp in (
        (w.recon, l_recon),
        (w.adversarial, l_gen),
        (w.triplet, l_t),
        (w.live_map, l_r),
        (w.classifier, l_c),
    ):
        if comp is None:
            continue
        value = comp.item() if isinstance(comp, Tensor) else float(comp)
        if not math.isfinite(value):
            raise ValueError("non-finite loss component")
        term = comp * weight
        total = term if total is None else total + term
    if total is None:
        return 0.0
    return total
