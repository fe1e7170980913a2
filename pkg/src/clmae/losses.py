"""Masking-module objectives and the signed curriculum schedule."""

from __future__ import annotations

import logging
import math
from fractions import Fraction
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mae import patch_errors

log = logging.getLogger(__name__)

KL_FLOOR = 1e-8
DEGENERATE_WEIGHT = 1e-6


@dataclass
class CurriculumSchedule:
    """Linear schedule from ``lambda0 = 1`` at ``t = 0`` to ``lambda_end`` at ``t = T``.

    Equivalent to ``lambda_t = 1 - k t`` with ``k = (1 - lambda_end) / T``;
    each value is the correctly rounded point of that line.
    """

    T: int
    lambda_end: float = -0.1
    lambda0: float = 1.0

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("T must be positive")
        if not -1.0 <= self.lambda_end <= 1.0:
            raise ValueError(f"final lambda {self.lambda_end} outside [-1, 1]")

    @classmethod
    def from_decay(cls, T: int, k: float) -> CurriculumSchedule:
        if not 0.0 <= k <= 2.0 / T:
            raise ValueError(f"decay {k} outside [0, 2/T] = [0, {2.0 / T}]")
        return cls(T, 1.0 - k * T)

    @property
    def k(self) -> float:
        return (self.lambda0 - self.lambda_end) / self.T

    def __call__(self, t: int) -> float:
        return lambda_at(self, t)


def lambda_at(sched: CurriculumSchedule, t: int) -> float:
    if not 0 <= t <= sched.T:
        raise ValueError(f"step {t} outside [0, {sched.T}]")
    # exact rational interpolation, rounded once: every value is the nearest
    # double to the affine trajectory and both endpoints come back unchanged
    start, end = Fraction(sched.lambda0), Fraction(sched.lambda_end)
    lam = float(start + (end - start) * Fraction(t, sched.T))
    return min(1.0, max(-1.0, lam))


@dataclass
class LossWeights:
    gauss: float = 10.0
    kl: float = 1.0
    div: float = 2.0
    mu: float = 0.5
    sigma: float = 0.12
    ratio: float = 0.75

    def __post_init__(self):
        if min(self.gauss, self.kl, self.div) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.ratio < 1.0 or self.sigma <= 0:
            raise ValueError("need 0 < ratio < 1 and sigma > 0")


def _tensor(x) -> Tensor:
    return ad.as_tensor(x)


def curriculum_loss(pred: Tensor, target, z: Tensor, lam: float) -> Tensor:
    """Signed reconstruction error weighted per patch by ``1 - z_i``.

    Works on one image (``z`` of shape ``(n,)``) or a batch; batch values are
    averaged. Images whose soft masks hide (almost) nothing contribute zero.
    """
    if not -1.0 <= lam <= 1.0:
        raise ValueError(f"curriculum weight {lam} outside [-1, 1]")
    z = _tensor(z)
    err = patch_errors(pred, target)
    hide = 1.0 - z
    total = hide.data.sum(axis=-1)
    degenerate = total < DEGENERATE_WEIGHT
    if degenerate.any():
        log.warning("soft mask hides nothing for %d sample(s); curriculum term set to 0",
                    int(np.sum(degenerate)))
    keep = (~degenerate).astype(z.data.dtype)
    safe = ad.where(degenerate, np.ones_like(total), ad.sum(hide, axis=-1))
    per_sample = ad.sum(hide * err, axis=-1) / safe * keep
    return ad.mean(per_sample) * lam


def gaussian_loss(z: Tensor, mu: float = 0.5, sigma: float = 0.12) -> Tensor:
    """Mean Gaussian density of the soft mask values; peaks at ``z = mu``."""
    z = _tensor(z)
    coef = 1.0 / (sigma * math.sqrt(2.0 * math.pi))
    return ad.mean(ad.exp(ad.square(z - mu) * (-1.0 / (2.0 * sigma * sigma)))) * coef


def kl_ratio_loss(z: Tensor, ratio: float = 0.75) -> Tensor:
    """Two-bin KL(target || predicted) between desired and soft masked/visible fractions.

    The counts are normalized by ``n``; predicted bins are floored at 1e-8.
    Batched input is averaged over samples.
    """
    z = _tensor(z)
    n = z.shape[-1]
    if n < 1:
        raise ValueError("empty soft mask")
    vis = ad.mean(z, axis=-1)
    hid = 1.0 - vis
    hid = ad.where(hid.data < KL_FLOOR, KL_FLOOR, hid)
    vis = ad.where(vis.data < KL_FLOOR, KL_FLOOR, vis)
    m, v = ratio, 1.0 - ratio
    per_sample = ad.neg(ad.log(hid) * m + ad.log(vis) * v) + (m * math.log(m) + v * math.log(v))
    return ad.mean(per_sample)


def diversity_loss(z: Tensor) -> Tensor:
    """Mean over pairs i<j of ``exp(-||z_i - z_j||^2)`` for a ``(b, n)`` batch."""
    z = _tensor(z)
    b = z.shape[0]
    if b < 2:
        return _tensor(0.0)
    diff = ad.reshape(z, (b, 1, -1)) - ad.reshape(z, (1, b, -1))
    sim = ad.exp(ad.neg(ad.sum(ad.square(diff), axis=-1)))
    upper = np.triu(np.ones((b, b)), k=1).astype(z.data.dtype)
    return ad.sum(sim * upper) * (2.0 / (b * (b - 1)))


@dataclass
class LossParts:
    cl: Tensor
    gauss: Tensor
    kl: Tensor
    div: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("cl", "gauss", "kl", "div")}


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


def joint_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    """``L_cl + w_gauss L_gauss + w_kl L_kl + w_div L_div``; the curriculum term carries its own sign."""
    for name, value in parts.values().items():
        if not math.isfinite(value):
            raise NonFiniteLoss(name, value)
    return (parts.cl + parts.gauss * weights.gauss + parts.kl * weights.kl
            + parts.div * weights.div)


def soft_losses(pred: Tensor, target, z: Tensor, lam: float, weights: LossWeights) -> LossParts:
    return LossParts(
        cl=curriculum_loss(pred, target, z, lam),
        gauss=gaussian_loss(z, weights.mu, weights.sigma),
        kl=kl_ratio_loss(z, weights.ratio),
        div=diversity_loss(z),
    )
