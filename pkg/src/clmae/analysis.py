"""Mask statistics and reconstruction comparisons used by reports and checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .mae import MaeParams, forward_hard, normalize_target, patch_errors
from .masking import CmmParams, cmm_tokens_forward, threshold
from .nn import patchify


@dataclass
class MaskStats:
    mean_z: float
    fraction_masked: float
    entropy: float  # mean binary entropy of z, in bits


def mask_stats(z: np.ndarray) -> list[MaskStats]:
    """Per-image statistics of soft masks ``(B, n)``."""
    z = np.asarray(z, dtype=np.float64)
    zc = np.clip(z, 1e-12, 1 - 1e-12)
    ent = -(zc * np.log2(zc) + (1 - zc) * np.log2(1 - zc)).mean(axis=-1)
    hard = threshold(z)
    return [MaskStats(float(z[b].mean()), float(1.0 - hard[b].mean()), float(ent[b]))
            for b in range(z.shape[0])]


def mean_pairwise_hamming(masks: np.ndarray) -> float:
    """Mean normalized Hamming distance over all pairs of binary masks ``(B, n)``."""
    m = np.asarray(masks).astype(bool)
    b = m.shape[0]
    if b < 2:
        return 0.0
    d = (m[:, None, :] != m[None, :, :]).mean(axis=-1)
    return float(d[np.triu_indices(b, 1)].mean())


def masked_error(patches: np.ndarray, masks: np.ndarray, mae: MaeParams) -> float:
    """Mean reconstruction error over masked patches, averaged per image then over the batch."""
    with ad.no_grad():
        pred = forward_hard(patches, masks, mae)
        err = patch_errors(pred, normalize_target(patches)).data.astype(np.float64)
    hidden = (np.asarray(masks) == 0)
    return float(((err * hidden).sum(axis=-1) / hidden.sum(axis=-1)).mean())


def random_like(rng: np.random.Generator, masks: np.ndarray) -> np.ndarray:
    """Uniform random masks hiding the same number of patches as each row of ``masks``."""
    out = np.ones_like(masks, dtype=np.int8)
    n = masks.shape[1]
    for b, row in enumerate(masks):
        k = int(n - row.sum())
        out[b, rng.permutation(n)[:k]] = 0
    return out


@dataclass
class MaskComparison:
    cmm_loss: float
    random_loss: float
    batches: int
    skipped: int

    @property
    def margin(self) -> float:
        """Positive when the masking module's masks are harder than random ones."""
        return self.cmm_loss - self.random_loss


def compare_with_random(images: np.ndarray, mae: MaeParams, cmm: CmmParams, batch_size: int = 32,
                        batches: int = 100, seed: int = 0) -> MaskComparison:
    """MAE loss under the module's binary masks vs. random masks of equal per-image ratio.

    Batches are consecutive slices of ``images`` (wrapping if needed). Images
    whose mask is all-visible or all-hidden are left out of both measurements.
    """
    from .training import preprocess

    rng = np.random.default_rng(seed)
    dtype = mae.dtype
    n_img = len(images)
    cmm_losses, rand_losses = [], []
    skipped = 0
    with ad.mode(dtype, strict=False):
        for i in range(batches):
            idx = (np.arange(batch_size) + i * batch_size) % n_img
            patches = patchify(preprocess(images[idx], dtype), mae.p).patches
            with ad.no_grad():
                z = cmm_tokens_forward(patches, cmm).data
            masks = threshold(z)
            visible = masks.sum(axis=1)
            keep = (visible > 0) & (visible < masks.shape[1])
            skipped += int((~keep).sum())
            if keep.sum() == 0:
                continue
            masks, patches = masks[keep], patches[keep]
            cmm_losses.append(masked_error(patches, masks, mae))
            rand_losses.append(masked_error(patches, random_like(rng, masks), mae))
    return MaskComparison(float(np.mean(cmm_losses)), float(np.mean(rand_losses)), batches, skipped)
