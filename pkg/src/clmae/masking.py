"""Learnable curriculum masking module.

A stack of ViT blocks reads the patch tokens of an image; its CLS output goes
through a small head (MLP, linear, sigmoid) that emits one keep-visible
probability per patch. During MAE updates the probabilities are thresholded
and used for hard token selection. During masking-module updates they scale
the tokens directly so gradients can reach the module.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (LayerNorm, Linear, Module, VitBlockParams, embed_tokens, patchify,
                 sincos_pos_table, vit_block)

log = logging.getLogger(__name__)

THRESHOLD = 0.5


class NoVisibleTokens(ValueError):
    """Raised when a binary mask leaves no patch visible."""


@dataclass
class CmmParams(Module):
    patch_embed: Linear
    cls: Tensor
    blocks: list[VitBlockParams]
    norm: LayerNorm
    head_fc: Linear
    head_out: Linear
    pos: np.ndarray
    p: int

    @classmethod
    def init(cls, rng: np.random.Generator, *, h: int, w: int, c: int, p: int, d: int,
             heads: int, depth: int = 5, dtype=np.float64) -> CmmParams:
        n = (h * w) // (p * p)
        return cls(
            patch_embed=Linear.init(rng, p * p * c, d, dtype),
            cls=Tensor(rng.normal(0.0, 0.02, size=d), requires_grad=True, dtype=dtype),
            blocks=[VitBlockParams.init(rng, d, heads, dtype=dtype) for _ in range(depth)],
            norm=LayerNorm.init(d, dtype),
            head_fc=Linear.init(rng, d, d, dtype),
            head_out=Linear.init(rng, d, n, dtype),
            pos=sincos_pos_table(d, h // p, w // p).astype(dtype),
            p=p,
        )

    @property
    def n(self) -> int:
        return self.head_out.w.shape[1]


def _cls_features(patches, params: CmmParams) -> Tensor:
    x = embed_tokens(patches, params.patch_embed, params.pos, params.cls)
    for block in params.blocks:
        x = vit_block(x, block)
    return params.norm(x)[..., 0, :]


def cmm_tokens_forward(patches, params: CmmParams) -> Tensor:
    """Soft mask from already-patchified input of shape ``(n, P)`` or ``(B, n, P)``."""
    c_out = _cls_features(patches, params)
    return ad.sigmoid(params.head_out(ad.gelu(params.head_fc(c_out))))


def calibrate_head(params: CmmParams, patches: np.ndarray, ratio: float, scale: float) -> None:
    """Data-dependent rescaling of the mask head on one batch ``(B, n, P)``, in place.

    Hidden units are standardized over the batch. Each patch logit then gets
    an across-image spread of ``scale`` and an offset that puts a ``ratio``
    share of the batch below the threshold. Without this the logits are
    dominated by a per-patch offset shared by all images, and the push away
    from 0.5 settles every image on the same mask within a few steps.
    """
    if patches.ndim != 3 or patches.shape[0] < 2:
        raise ValueError("calibration needs a batch of at least two images")
    with ad.no_grad():
        feats = _cls_features(patches, params).data
        pre = params.head_fc(Tensor(feats)).data
        mu, sd = pre.mean(axis=0), pre.std(axis=0) + 1e-6
        params.head_fc.w.data[...] = params.head_fc.w.data / sd
        params.head_fc.b.data[...] = (params.head_fc.b.data - mu) / sd
        hidden = ad.gelu(params.head_fc(Tensor(feats))).data
    centred = (hidden - hidden.mean(axis=0)) @ params.head_out.w.data
    gain = scale / (centred.std(axis=0) + 1e-6)
    params.head_out.w.data[...] = params.head_out.w.data * gain
    offset = NormalDist().inv_cdf(1.0 - ratio) * scale
    params.head_out.b.data[...] = -(hidden.mean(axis=0) @ params.head_out.w.data) + offset


def cmm_forward(images, params: CmmParams) -> Tensor:
    """Keep-visible probabilities ``z`` in [0, 1] for ``(h, w, c)`` or ``(B, h, w, c)`` images."""
    grid = patchify(np.asarray(images), params.p)
    if grid.n != params.n:
        raise ValueError(f"image yields {grid.n} patches, module expects {params.n}")
    return cmm_tokens_forward(grid.patches.astype(params.cls.data.dtype), params)


def threshold(z, theta: float = THRESHOLD) -> np.ndarray:
    """Binary mask, 1 = visible. Ties at ``theta`` count as visible."""
    z = z.data if isinstance(z, Tensor) else np.asarray(z)
    return (z >= theta).astype(np.int8)


def select_visible(tokens: Tensor, mask) -> tuple[Tensor, np.ndarray]:
    """Keep CLS plus the visible patch rows of an ``(n+1, d)`` sequence.

    Returns the selected sequence and the original row indices it came from.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (tokens.shape[-2] - 1,):
        raise ValueError(f"mask of length {mask.shape} vs {tokens.shape[-2] - 1} patch tokens")
    if not mask.any():
        raise NoVisibleTokens("binary mask leaves zero visible tokens")
    rows = np.concatenate([[0], np.flatnonzero(mask) + 1])
    return ad.slice_rows(tokens, rows), rows


def scatter_rows(selected: Tensor, rows: np.ndarray, total: int, fill=0.0) -> np.ndarray:
    """Inverse of :func:`select_visible` on plain arrays; unselected rows get ``fill``."""
    out = np.full((total, selected.shape[-1]), fill, dtype=selected.data.dtype)
    out[rows] = selected.data
    return out


def select_visible_batch(tokens: Tensor, masks: np.ndarray):
    """Batched hard selection with right padding.

    ``tokens`` is ``(B, n+1, d)`` and ``masks`` ``(B, n)``. Every sequence is
    padded to the largest visible count in the batch by repeating row 0; the
    returned ``key_bias`` hides padding from attention so each real row sees
    exactly CLS plus its own visible patches.

    Returns ``(selected, rows, valid, key_bias)`` where ``rows[b, j]`` is the
    source row of slot ``j`` and ``valid`` marks non-padding slots.
    """
    masks = np.asarray(masks).astype(bool)
    B, n = masks.shape
    counts = masks.sum(axis=1)
    if (counts == 0).any():
        raise NoVisibleTokens(f"samples {np.flatnonzero(counts == 0).tolist()} have no visible tokens")
    L = int(counts.max()) + 1
    rows = np.zeros((B, L), dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    valid[:, 0] = True
    for b in range(B):
        vis = np.flatnonzero(masks[b]) + 1
        rows[b, 1:1 + vis.size] = vis
        valid[b, 1:1 + vis.size] = True
    key_bias = np.where(valid, 0.0, -1e9)
    return ad.gather_rows(tokens, rows), rows, valid, key_bias


def apply_soft_mask(tokens: Tensor, z: Tensor) -> Tensor:
    """Scale patch row ``i`` by ``z[i]``; the CLS row passes through untouched."""
    z = ad.as_tensor(z)
    if z.shape[-1] != tokens.shape[-2] - 1:
        raise ValueError(f"soft mask of length {z.shape[-1]} vs {tokens.shape[-2] - 1} patches")
    ones = np.ones(z.shape[:-1] + (1,), dtype=z.data.dtype)
    scale = ad.concat([ones, z], axis=-1)
    return tokens * ad.reshape(scale, scale.shape + (1,))


def random_mask(rng: np.random.Generator, n: int, ratio: float) -> np.ndarray:
    """Uniform random binary mask hiding ``round(ratio * n)`` patches (at least one kept)."""
    n_masked = min(n - 1, max(1, int(round(ratio * n))))
    mask = np.ones(n, dtype=np.int8)
    mask[rng.permutation(n)[:n_masked]] = 0
    return mask


def mask_to_pgm(mask, gh: int, gw: int, p: int) -> bytes:
    """Binary P5 graymap of a patch mask, upscaled so each patch covers p x p pixels."""
    grid = np.asarray(mask, dtype=np.uint8).reshape(gh, gw) * 255
    pixels = np.kron(grid, np.ones((p, p), dtype=np.uint8)).astype(np.uint8)
    return f"P5\n{gw * p} {gh * p}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_mask_pgm(path: Path, mask, gh: int, gw: int, p: int) -> None:
    Path(path).write_bytes(mask_to_pgm(mask, gh, gw, p))
