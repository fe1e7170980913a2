"""Masked autoencoder backbone: encoder over visible tokens, light decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masking import NoVisibleTokens, apply_soft_mask, select_visible_batch
from .nn import LayerNorm, Linear, Module, VitBlockParams, embed_tokens, sincos_pos_table, vit_block


class NothingToReconstruct(ValueError):
    """Raised when a mask hides no patch, so the reconstruction loss is undefined."""


@dataclass
class MaeParams(Module):
    patch_embed: Linear
    cls: Tensor
    encoder: list[VitBlockParams]
    enc_norm: LayerNorm
    dec_embed: Linear
    mask_token: Tensor
    decoder: list[VitBlockParams]
    dec_norm: LayerNorm
    dec_pred: Linear
    pos: np.ndarray
    dec_pos: np.ndarray
    p: int

    @classmethod
    def init(cls, rng: np.random.Generator, *, h: int, w: int, c: int, p: int, d: int = 64,
             heads: int = 4, depth: int = 4, dec_d: int = 32, dec_depth: int = 2,
             dec_heads: int = 4, dtype=np.float64) -> MaeParams:
        P = p * p * c
        gh, gw = h // p, w // p
        return cls(
            patch_embed=Linear.init(rng, P, d, dtype),
            cls=Tensor(rng.normal(0.0, 0.02, size=d), requires_grad=True, dtype=dtype),
            encoder=[VitBlockParams.init(rng, d, heads, dtype=dtype) for _ in range(depth)],
            enc_norm=LayerNorm.init(d, dtype),
            dec_embed=Linear.init(rng, d, dec_d, dtype),
            mask_token=Tensor(rng.normal(0.0, 0.02, size=dec_d), requires_grad=True, dtype=dtype),
            decoder=[VitBlockParams.init(rng, dec_d, dec_heads, dtype=dtype)
                     for _ in range(dec_depth)],
            dec_norm=LayerNorm.init(dec_d, dtype),
            dec_pred=Linear.init(rng, dec_d, P, dtype),
            pos=sincos_pos_table(d, gh, gw).astype(dtype),
            dec_pos=sincos_pos_table(dec_d, gh, gw).astype(dtype),
            p=p,
        )

    @property
    def n(self) -> int:
        return self.pos.shape[0] - 1

    @property
    def dtype(self):
        return self.cls.data.dtype


def embed(patches, params: MaeParams) -> Tensor:
    """Patch tokens with positional embeddings and CLS in row 0."""
    return embed_tokens(patches, params.patch_embed, params.pos, params.cls)


def encode(visible: Tensor, params: MaeParams, key_bias=None) -> Tensor:
    """Run the encoder over CLS plus whatever token rows are passed in."""
    if visible.shape[-2] < 2:
        raise NoVisibleTokens("encoder needs at least one visible patch token")
    x = visible
    for block in params.encoder:
        x = vit_block(x, block, key_bias)
    return params.enc_norm(x)


def _restore_index(rows: np.ndarray, valid: np.ndarray, n: int) -> np.ndarray:
    B, L = rows.shape
    restore = np.full((B, n + 1), L, dtype=np.int64)  # slot L holds the mask token
    for b in range(B):
        slots = rows[b][valid[b]]
        if slots.size and (slots.max() > n or len(set(slots.tolist())) != slots.size):
            raise ValueError(f"index map for sample {b} is inconsistent with {n} patches")
        restore[b, slots] = np.flatnonzero(valid[b])
    return restore


def _decoder_tail(x: Tensor, params: MaeParams) -> Tensor:
    x = x + params.dec_pos
    for block in params.decoder:
        x = vit_block(x, block)
    x = params.dec_norm(x)
    return params.dec_pred(x)[:, 1:, :]


def decode(latent: Tensor, rows, params: MaeParams, valid=None) -> Tensor:
    """Reconstruct all ``n`` patches from encoded visible tokens.

    ``rows`` maps each latent row to its original sequence slot (0 = CLS).
    Slots not covered get the shared mask token. Accepts a single sequence
    ``(L, d)`` with ``rows`` of length ``L`` or a batch ``(B, L, d)``.
    """
    single = latent.ndim == 2
    rows = np.asarray(rows, dtype=np.int64)
    if single:
        latent = ad.reshape(latent, (1,) + latent.shape)
        rows = rows.reshape(1, -1)
    if rows.shape != latent.shape[:2]:
        raise ValueError(f"index map shape {rows.shape} vs latent {latent.shape[:2]}")
    valid = np.ones(rows.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    B = latent.shape[0]
    n = params.n
    y = params.dec_embed(latent)
    token = ad.mul(params.mask_token, np.ones((B, 1, 1), dtype=params.dtype))
    y = ad.concat_rows([y, token])
    y = ad.gather_rows(y, _restore_index(rows, valid, n))
    out = _decoder_tail(y, params)
    return ad.reshape(out, out.shape[1:]) if single else out


def decode_soft(latent: Tensor, z: Tensor, params: MaeParams) -> Tensor:
    """Decoder path for the soft-mask step: all ``n+1`` latent rows are present.

    Patch slot ``i`` receives ``z_i * token_i + (1 - z_i) * mask_token``, which
    equals the hard decoder input whenever ``z`` is exactly binary.
    """
    y = params.dec_embed(latent)
    B = y.shape[0]
    ones = np.ones((B, 1), dtype=params.dtype)
    keep = ad.concat([ones, z], axis=-1)
    keep = ad.reshape(keep, keep.shape + (1,))
    y = y * keep + ad.mul(1.0 - keep, params.mask_token)
    return _decoder_tail(y, params)


def forward_hard(patches, masks: np.ndarray, params: MaeParams) -> Tensor:
    """Full MAE pass with binary masks ``(B, n)``: select, encode, decode."""
    tokens = embed(patches, params)
    selected, rows, valid, key_bias = select_visible_batch(tokens, masks)
    latent = encode(selected, params, key_bias)
    return decode(latent, rows, params, valid)


def forward_soft(patches, z: Tensor, params: MaeParams) -> Tensor:
    """Full MAE pass with soft masks: every token scaled by its keep probability."""
    tokens = apply_soft_mask(embed(patches, params), z)
    return decode_soft(encode(tokens, params), z, params)


# ---------------------------------------------------------------------------
# targets and loss


@dataclass
class ReconTarget:
    target: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def denormalize(self, pred) -> np.ndarray:
        pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
        return pred * self.std + self.mean


def normalize_target(patches, eps: float = 1e-6) -> ReconTarget:
    x = np.asarray(patches.patches if hasattr(patches, "patches") else patches, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    return ReconTarget((x - mean) / std, mean, std)


def patch_errors(pred: Tensor, target) -> Tensor:
    """Per-patch mean squared error, shape ``(..., n)``."""
    target = target.target if isinstance(target, ReconTarget) else np.asarray(target)
    return ad.mean(ad.square(pred - target.astype(pred.data.dtype)), axis=-1)


def recon_loss(pred: Tensor, target, mask) -> Tensor:
    """MSE on masked patches (``mask == 0``): mean over pixels, then patches, then batch."""
    mask = np.asarray(mask)
    hidden = (mask == 0).astype(pred.data.dtype)
    counts = hidden.sum(axis=-1)
    if (counts == 0).any():
        raise NothingToReconstruct("mask hides no patch; nothing to reconstruct")
    err = patch_errors(pred, target)
    per_sample = ad.sum(err * hidden, axis=-1) / counts
    return ad.mean(per_sample)
