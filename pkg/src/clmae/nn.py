"""ViT building blocks shared by the MAE backbone and the masking module."""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Dataclass mix-in that enumerates trainable tensors by dotted name."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @contextlib.contextmanager
    def frozen(self) -> Iterator[None]:
        """Treat every parameter as a constant for the duration of the block."""
        params = self.parameters()
        saved = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield
        finally:
            for p, flag in zip(params, saved):
                p.requires_grad = flag


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


@dataclass
class Linear(Module):
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, dtype=np.float64) -> Linear:
        return cls(_uniform(rng, (d_in, d_out), d_in, dtype), _uniform(rng, (d_out,), d_in, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)


@dataclass
class LayerNorm(Module):
    gain: Tensor
    bias: Tensor
    eps: float = 1e-6

    @classmethod
    def init(cls, d: int, dtype=np.float64) -> LayerNorm:
        return cls(Tensor(np.ones(d), requires_grad=True, dtype=dtype),
                   Tensor(np.zeros(d), requires_grad=True, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gain, self.bias, self.eps)


@dataclass
class VitBlockParams(Module):
    """Pre-norm transformer block: fused q/k/v projection, output projection, MLP."""

    ln1: LayerNorm
    qkv: Linear
    proj: Linear
    ln2: LayerNorm
    fc1: Linear
    fc2: Linear
    heads: int

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, heads: int, mlp_ratio: int = 4,
             dtype=np.float64) -> VitBlockParams:
        if d % heads:
            raise ValueError(f"width {d} is not divisible by {heads} heads")
        hidden = mlp_ratio * d
        return cls(
            ln1=LayerNorm.init(d, dtype),
            qkv=Linear.init(rng, d, 3 * d, dtype),
            proj=Linear.init(rng, d, d, dtype),
            ln2=LayerNorm.init(d, dtype),
            fc1=Linear.init(rng, d, hidden, dtype),
            fc2=Linear.init(rng, hidden, d, dtype),
            heads=heads,
        )


# ---------------------------------------------------------------------------
# patches


@dataclass
class PatchGrid:
    patches: np.ndarray  # (..., n, p*p*c)
    h: int
    w: int
    c: int
    p: int

    @property
    def n(self) -> int:
        return (self.h * self.w) // (self.p * self.p)


def patchify(images: np.ndarray, p: int) -> PatchGrid:
    """Split ``(..., h, w, c)`` images into raster-ordered flattened p x p patches."""
    images = np.asarray(images)
    *lead, h, w, c = images.shape
    if h % p or w % p:
        raise ValueError(f"image extents {h}x{w} are not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(*lead, gh, p, gw, p, c)
    k = len(lead)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return PatchGrid(x.reshape(*lead, gh * gw, p * p * c), h, w, c, p)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    h, w, c, p = grid.h, grid.w, grid.c, grid.p
    gh, gw = h // p, w // p
    *lead, n, _ = grid.patches.shape
    k = len(lead)
    x = grid.patches.reshape(*lead, gh, gw, p, p, c)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, h, w, c)


def sincos_pos_table(d: int, gh: int, gw: int, cls_token: bool = True) -> np.ndarray:
    """Fixed 2-D sine-cosine table; half the width encodes rows, half columns."""
    if d % 4:
        raise ValueError(f"positional width {d} must be divisible by 4")

    def one_axis(dim, pos):
        omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    rows, cols = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64),
                             indexing="ij")
    table = np.concatenate([one_axis(d // 2, rows), one_axis(d // 2, cols)], axis=1)
    if cls_token:
        table = np.concatenate([np.zeros((1, d)), table], axis=0)
    return table


def embed_tokens(patches, proj: Linear, pos, cls: Tensor) -> Tensor:
    """Project patches and prepend CLS; ``pos`` (n+1 rows) is added as a constant.

    ``patches`` may be ``(n, P)`` or batched ``(B, n, P)``; the result has one
    more row than there are patches.
    """
    patches = ad.as_tensor(patches)
    pos = np.asarray(pos.data if isinstance(pos, Tensor) else pos, dtype=proj.w.data.dtype)
    if patches.shape[-1] != proj.w.shape[0]:
        raise ValueError(f"patch width {patches.shape[-1]} vs projection input {proj.w.shape[0]}")
    tokens = proj(patches) + pos[1:]
    head = cls + pos[0]
    if tokens.ndim == 3:
        head = ad.mul(head, np.ones((tokens.shape[0], 1, 1), dtype=tokens.data.dtype))
    else:
        head = ad.reshape(head, (1, -1))
    return ad.concat_rows([head, tokens])


# ---------------------------------------------------------------------------
# attention and blocks


def attention_weights(q: Tensor, k: Tensor, key_bias=None) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ ad.swapaxes(k, -1, -2)) * scale
    if key_bias is not None:
        scores = scores + key_bias
    return ad.softmax(scores, axis=-1)


def mha_forward(x: Tensor, params: VitBlockParams, key_bias=None, return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over ``(..., L, d)`` tokens.

    ``key_bias`` is an additive constant broadcast onto the attention scores
    (``-inf`` style large negatives hide padded keys).
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    B, L, d = x.shape
    H = params.heads
    if d % H:
        raise ValueError(f"width {d} is not divisible by {H} heads")
    qkv = params.qkv(x)
    qkv = ad.transpose(ad.reshape(qkv, (B, L, 3, H, d // H)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    if key_bias is not None:
        key_bias = np.asarray(key_bias, dtype=x.data.dtype).reshape(B, 1, 1, L)
    att = attention_weights(q, k, key_bias)
    out = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, L, d))
    out = params.proj(out)
    if squeeze:
        out = ad.reshape(out, (L, d))
    return (out, att) if return_weights else out


def mlp_forward(x: Tensor, params: VitBlockParams) -> Tensor:
    return params.fc2(ad.gelu(params.fc1(x)))


def vit_block(x: Tensor, params: VitBlockParams, key_bias=None) -> Tensor:
    x = x + mha_forward(params.ln1(x), params, key_bias)
    return x + mlp_forward(params.ln2(x), params)
