"""Finite-difference verification of every differentiable piece, in float64."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .losses import (LossParts, LossWeights, curriculum_loss, diversity_loss, gaussian_loss,
                     joint_loss, kl_ratio_loss)
from .mae import MaeParams, forward_hard, forward_soft, normalize_target, recon_loss
from .masking import CmmParams, apply_soft_mask, cmm_tokens_forward
from .nn import VitBlockParams, mha_forward, vit_block

# Small geometry: 8x8x1 images, 4x4 patches -> 4 patches of 16 pixels.
TOY = dict(h=8, w=8, c=1, p=4)
TOY2 = dict(h=4, w=8, c=1, p=4)


def _param_check(module, name: str, loss_fn: Callable[[], Tensor], eps: float = 1e-5,
                 max_coords: int = 12, seed: int = 0) -> float:
    """Check d(loss)/d(param) on a random subset of coordinates of one parameter."""
    param = dict(module.named_parameters())[name]
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = param.grad.copy()
    flat = param.data.reshape(-1)
    rng = np.random.default_rng(seed)
    coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
    worst = 0.0
    with ad.no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn().item()
            flat[i] = orig - eps
            fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ana = analytic.reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    module.zero_grad()
    return worst


def _seeds(fn: Callable[[np.random.Generator], float], n: int = 3) -> float:
    return max(fn(np.random.default_rng(s)) for s in range(n))


def op_checks() -> dict[str, float]:
    """Each elementwise/structural op on three seeded random inputs."""
    out: dict[str, float] = {}
    B = np.random.default_rng(99).normal(size=(4, 2))
    other = np.random.default_rng(98).normal(size=(3, 4))

    def rnd(shape):
        return lambda rng: rng.normal(size=shape)

    cases: dict[str, tuple[Callable, Callable]] = {
        "matmul": (lambda x: ad.sum(ad.matmul(x, B)), rnd((3, 4))),
        "matmul_batched": (lambda x: ad.sum(ad.square(ad.matmul(x, B))), rnd((2, 3, 4))),
        "linear": (lambda x: ad.sum(ad.square(ad.linear(x, B, np.ones(2)))), rnd((2, 3, 4))),
        "add": (lambda x: ad.sum(ad.square(x + other)), rnd((3, 4))),
        "sub": (lambda x: ad.sum(ad.square(other - x)), rnd((3, 4))),
        "mul": (lambda x: ad.sum(x * x * other), rnd((3, 4))),
        "div": (lambda x: ad.sum(other / (ad.square(x) + 1.0)), rnd((3, 4))),
        "broadcast": (lambda x: ad.sum(ad.square(x + ad.reshape(ad.mean(x, axis=0), (1, 4)))),
                      rnd((3, 4))),
        "exp": (lambda x: ad.sum(ad.exp(x)), rnd((3, 4))),
        "log": (lambda x: ad.sum(ad.log(ad.square(x) + 0.5)), rnd((3, 4))),
        "neg": (lambda x: ad.sum(ad.square(ad.neg(x) + 1.0)), rnd((5,))),
        "square": (lambda x: ad.sum(ad.square(x)), rnd((3, 4))),
        "sqrt": (lambda x: ad.sum(ad.sqrt(ad.square(x) + 1.0)), rnd((3, 4))),
        "sum_axis": (lambda x: ad.sum(ad.square(ad.sum(x, axis=1))), rnd((3, 4))),
        "mean_axis": (lambda x: ad.sum(ad.square(ad.mean(x, axis=0))), rnd((3, 4))),
        "sigmoid": (lambda x: ad.sum(ad.sigmoid(x) * other), rnd((3, 4))),
        "gelu": (lambda x: ad.sum(ad.gelu(x) * other), rnd((3, 4))),
        "softmax": (lambda x: ad.sum(ad.softmax(x, axis=-1) * other), rnd((3, 4))),
        "layernorm": (lambda x: ad.sum(ad.layernorm(x, np.linspace(0.5, 1.5, 8), np.zeros(8))
                                       * np.random.default_rng(5).normal(size=(4, 8)).sum(0)),
                      rnd((4, 8))),
        "reshape": (lambda x: ad.sum(ad.reshape(x, (4, 3)) * other.T), rnd((3, 4))),
        "transpose": (lambda x: ad.sum(ad.transpose(x) * other.T), rnd((3, 4))),
        "concat_rows": (lambda x: ad.sum(ad.square(ad.concat_rows([x, x * 2.0]))), rnd((3, 4))),
        "slice_rows": (lambda x: ad.sum(ad.square(ad.slice_rows(x, [0, 2]))), rnd((3, 4))),
        "gather_rows": (lambda x: ad.sum(ad.square(ad.gather_rows(x, np.array([[0, 2, 2], [1, 1, 0]])))),
                        rnd((2, 3, 4))),
        "where": (lambda x: ad.sum(ad.square(ad.where(other > 0, x, 1.0 - x))), rnd((3, 4))),
    }
    for name, (f, gen) in cases.items():
        out[name] = _seeds(lambda rng: grad_check(f, gen(rng)))
    return out


def block_checks() -> dict[str, float]:
    out: dict[str, float] = {}

    def mha(rng):
        params = VitBlockParams.init(np.random.default_rng(1), 8, 2)
        wts = rng.normal(size=(3, 8))
        return grad_check(lambda x: ad.sum(mha_forward(x, params) * wts), rng.normal(size=(3, 8)))

    def block(rng):
        params = VitBlockParams.init(np.random.default_rng(2), 8, 2)
        wts = rng.normal(size=(3, 8))
        return grad_check(lambda x: ad.sum(vit_block(x, params) * wts), rng.normal(size=(3, 8)))

    def block_params(rng):
        params = VitBlockParams.init(np.random.default_rng(3), 8, 2)
        x = Tensor(rng.normal(size=(2, 3, 8)))
        wts = rng.normal(size=(2, 3, 8))
        return max(_param_check(params, name, lambda: ad.sum(vit_block(x, params) * wts))
                   for name in ("qkv.w", "proj.b", "fc1.w", "fc2.w", "ln1.gain", "ln2.bias"))

    def soft(rng):
        tok = rng.normal(size=(5, 3))
        wts = rng.normal(size=(5, 3))
        return grad_check(lambda z: ad.sum(apply_soft_mask(Tensor(tok), z) * wts),
                          rng.uniform(size=4))

    out["mha"] = _seeds(mha)
    out["vit_block"] = _seeds(block)
    out["vit_block_params"] = _seeds(block_params)
    out["apply_soft_mask"] = _seeds(soft)
    return out


def loss_checks() -> dict[str, float]:
    out: dict[str, float] = {}
    n, P = 4, 6

    def cl(rng):
        target = rng.normal(size=(2, n, P))
        z = rng.uniform(0.1, 0.9, size=(2, n))
        pred = rng.normal(size=(2, n, P))
        a = grad_check(lambda zz: curriculum_loss(Tensor(pred), target, zz, -0.7), z)
        b = grad_check(lambda pp: curriculum_loss(pp, target, Tensor(z), 0.4), pred)
        return max(a, b)

    def recon(rng):
        target = rng.normal(size=(2, n, P))
        mask = np.array([[1, 0, 1, 0], [0, 0, 1, 0]])
        return grad_check(lambda pp: recon_loss(pp, target, mask), rng.normal(size=(2, n, P)))

    out["curriculum_loss"] = _seeds(cl)
    out["recon_loss"] = _seeds(recon)
    out["gaussian_loss"] = _seeds(lambda rng: grad_check(gaussian_loss, rng.uniform(size=(3, n))))
    out["kl_ratio_loss"] = _seeds(lambda rng: grad_check(kl_ratio_loss, rng.uniform(0.05, 0.95, (3, n))))
    out["diversity_loss"] = _seeds(lambda rng: grad_check(diversity_loss, rng.uniform(size=(4, n))))

    def joint(rng):
        target = rng.normal(size=(3, n, P))
        pred = rng.normal(size=(3, n, P))
        w = LossWeights()

        def f(z):
            parts = LossParts(curriculum_loss(Tensor(pred), target, z, 0.3), gaussian_loss(z),
                              kl_ratio_loss(z), diversity_loss(z))
            return joint_loss(parts, w)

        return grad_check(f, rng.uniform(0.05, 0.95, size=(3, n)))

    out["joint_loss"] = _seeds(joint)
    return out


def model_checks() -> dict[str, float]:
    """End-to-end parameter gradients on the 4-patch toy geometry."""
    out: dict[str, float] = {}
    rng = np.random.default_rng(7)
    mae = MaeParams.init(rng, **TOY, d=8, heads=2, depth=1, dec_d=8, dec_depth=1, dec_heads=2)
    cmm = CmmParams.init(rng, **TOY, d=8, heads=2, depth=2)
    patches = rng.normal(size=(3, 4, 16))
    target = normalize_target(patches)
    w = LossWeights()

    def total():
        z = cmm_tokens_forward(patches, cmm)
        with mae.frozen():
            pred = forward_soft(patches, z, mae)
        parts = LossParts(curriculum_loss(pred, target, z, -0.4), gaussian_loss(z),
                          kl_ratio_loss(z), diversity_loss(z))
        return joint_loss(parts, w)

    names = ["head_out.w", "head_out.b", "head_fc.w", "patch_embed.w", "cls",
             "blocks.0.qkv.w", "blocks.1.fc2.b", "norm.gain"]
    out["cmm_joint_params"] = max(_param_check(cmm, k, total) for k in names)

    masks = np.array([[1, 0, 0, 1], [0, 1, 0, 0], [1, 1, 0, 1]])

    def mae_loss():
        return recon_loss(forward_hard(patches, masks, mae), target, masks)

    names = ["patch_embed.w", "cls", "encoder.0.qkv.w", "enc_norm.gain", "dec_embed.w",
             "mask_token", "decoder.0.fc1.w", "dec_pred.b"]
    out["mae_recon_params"] = max(_param_check(mae, k, mae_loss) for k in names)

    # two-patch model: every CMM parameter is checked
    cmm2 = CmmParams.init(rng, **TOY2, d=8, heads=2, depth=1)
    mae2 = MaeParams.init(rng, **TOY2, d=8, heads=2, depth=1, dec_d=8, dec_depth=1, dec_heads=2)
    patches2 = rng.normal(size=(3, 2, 16))
    target2 = normalize_target(patches2)

    def total2():
        z = cmm_tokens_forward(patches2, cmm2)
        with mae2.frozen():
            pred = forward_soft(patches2, z, mae2)
        parts = LossParts(curriculum_loss(pred, target2, z, -0.4), gaussian_loss(z),
                          kl_ratio_loss(z), diversity_loss(z))
        return joint_loss(parts, w)

    out["cmm_joint_two_patch"] = max(_param_check(cmm2, k, total2, max_coords=6)
                                     for k, _ in cmm2.named_parameters())
    return out


def run_suite() -> dict[str, float]:
    """Max relative error per component; all work happens in float64."""
    results: dict[str, float] = {}
    with ad.mode(np.float64, strict=True):
        for group in (op_checks, block_checks, loss_checks, model_checks):
            results.update(group())
    return results


def main_report(tolerance: float = 1e-4) -> tuple[bool, str]:
    start = time.perf_counter()
    results = run_suite()
    lines = [f"{name:<22s} {err:.3e} {'ok' if err < tolerance else 'FAIL'}"
             for name, err in results.items()]
    ok = all(err < tolerance for err in results.values())
    lines.append(f"max {max(results.values()):.3e} in {time.perf_counter() - start:.1f}s")
    return ok, "\n".join(lines)
