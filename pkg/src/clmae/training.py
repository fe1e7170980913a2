"""Two-step alternating training of the MAE and the masking module.

Each iteration draws one batch. Step one updates the MAE on hard masks
produced by the frozen masking module. Step two freezes the MAE and updates
the masking module through soft multiplicative masks under the joint loss.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .losses import NonFiniteLoss, joint_loss, soft_losses
from .mae import MaeParams, forward_hard, forward_soft, normalize_target, recon_loss
from .masking import (CmmParams, calibrate_head, cmm_tokens_forward, random_mask, threshold,
                      write_mask_pgm)
from .nn import patchify
from .optim import AdamW, AdamWHyper, warmup_cosine

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "lambda_cl", "loss_mae", "loss_cl", "loss_gauss", "loss_kl",
                  "loss_div", "loss_joint", "soft_mask_ratio", "mask_fallback_count")

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class TrainingAborted(RuntimeError):
    pass


def preprocess(images: np.ndarray, dtype) -> np.ndarray:
    """uint8 ``(..., h, w, c)`` images to roughly unit-scale floats."""
    return ((np.asarray(images, dtype=np.float64) / 255.0 - PIXEL_MEAN) / PIXEL_STD).astype(dtype)


@dataclass
class Batch:
    patches: np.ndarray
    target: object
    indices: np.ndarray


def make_batch(images: np.ndarray, p: int, dtype, indices=None) -> Batch:
    patches = patchify(preprocess(images, dtype), p).patches
    return Batch(patches, normalize_target(patches), np.asarray(indices if indices is not None else []))


@dataclass
class Loader:
    """Epoch-shuffled batches; wraps with a fresh permutation when exhausted."""

    size: int
    batch_size: int
    perm: np.ndarray
    cursor: int = 0

    @classmethod
    def create(cls, rng: np.random.Generator, size: int, batch_size: int) -> Loader:
        if size < 1:
            raise ValueError("empty dataset")
        return cls(size, batch_size, rng.permutation(size))

    def next(self, rng: np.random.Generator) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            if self.cursor >= self.size:
                self.perm = rng.permutation(self.size)
                self.cursor = 0
            take = self.perm[self.cursor:self.cursor + need]
            self.cursor += take.size
            need -= take.size
            out.append(take)
        return np.concatenate(out)


@dataclass
class TrainState:
    config: TrainConfig
    mae: MaeParams
    cmm: CmmParams
    opt_mae: AdamW
    opt_cmm: AdamW
    rng: np.random.Generator
    loader: Loader
    t: int = 0
    fallback_count: int = 0

    @classmethod
    def create(cls, config: TrainConfig, dataset_size: int) -> TrainState:
        dtype = np.dtype(config.dtype).type
        rng = np.random.default_rng(config.seed)
        loader = Loader.create(rng, dataset_size, config.batch_size)
        geom = dict(h=config.h, w=config.w, c=config.c, p=config.p)
        mae = MaeParams.init(rng, **geom, d=config.d, heads=config.heads, depth=config.depth,
                             dec_d=config.dec_d, dec_depth=config.dec_depth,
                             dec_heads=config.dec_heads, dtype=dtype)
        cmm = CmmParams.init(rng, **geom, d=config.d, heads=config.heads,
                             depth=config.cmm_depth, dtype=dtype)
        return cls(config, mae, cmm, _optimizer(mae, config.lr_mae, config),
                   _optimizer(cmm, config.lr_cmm, config), rng, loader)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype).type

    def param_digest(self, which: str) -> str:
        module = self.mae if which == "mae" else self.cmm
        h = hashlib.sha256()
        for name, p in module.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def _optimizer(module, lr: float, config: TrainConfig) -> AdamW:
    return AdamW(dict(module.named_parameters()), AdamWHyper(lr=lr, weight_decay=config.weight_decay))


def lr_at(config: TrainConfig, base: float, t: int, constant: bool = False) -> float:
    if constant:
        return base * min(1.0, (t + 1) / config.warmup) if config.warmup else base
    return warmup_cosine(t, config.T + 1, base, config.warmup)


def _check_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise NonFiniteLoss(name, value)


# ---------------------------------------------------------------------------
# the two steps


def propose_masks(batch: Batch, state: TrainState, z: np.ndarray | None = None):
    """Binary masks from the frozen masking module, with degenerate rows replaced.

    A mask with no visible patch (or no hidden patch) is swapped for a uniform
    random mask at the target ratio. ``z`` may be passed in when the soft
    masks for this batch were already computed. Returns ``(masks, z, n_fallbacks)``.
    """
    if z is None:
        with ad.no_grad():
            z = cmm_tokens_forward(batch.patches, state.cmm).data
    masks = threshold(z)
    n = masks.shape[1]
    fallbacks = 0
    for b in range(masks.shape[0]):
        visible = int(masks[b].sum())
        if visible == 0 or visible == n:
            masks[b] = random_mask(state.rng, n, state.config.ratio)
            fallbacks += 1
    if fallbacks:
        log.info("step %d: %d degenerate mask(s) replaced by random masks", state.t, fallbacks)
    return masks, z, fallbacks


def random_masks(state: TrainState, B: int) -> np.ndarray:
    return np.stack([random_mask(state.rng, state.config.n, state.config.ratio) for _ in range(B)])


def step_mae(batch: Batch, state: TrainState, masks: np.ndarray | None = None,
             z: np.ndarray | None = None) -> dict:
    """One MAE update on hard masks; the masking module is never touched.

    Without explicit ``masks`` the masking module proposes them (or, in
    baseline mode, uniform random masks are drawn). Explicit masks are used
    as given, so an all-visible mask is rejected by the loss.
    """
    fallbacks = 0
    if masks is None:
        if state.config.mode == "baseline":
            masks = random_masks(state, batch.patches.shape[0])
        else:
            masks, _, fallbacks = propose_masks(batch, state, z)
    with state.cmm.frozen():
        pred = forward_hard(batch.patches, masks, state.mae)
        loss = recon_loss(pred, batch.target, masks)
        value = loss.item()
        _check_finite("mae", value)
        state.opt_mae.zero_grad()
        loss.backward()
    state.opt_mae.step(lr_at(state.config, state.config.lr_mae, state.t))
    state.fallback_count += fallbacks
    return {"loss_mae": value, "fallbacks": fallbacks, "masks": masks}


def step_cmm(batch: Batch, state: TrainState, lam: float, z: ad.Tensor | None = None) -> dict:
    """One masking-module update under the joint loss; the MAE is frozen.

    ``z`` may be a soft mask already recorded (with its graph) on this batch
    by the current masking-module parameters.
    """
    cfg = state.config
    weights = cfg.weights()
    if z is None:
        z = cmm_tokens_forward(batch.patches, state.cmm)
    with state.mae.frozen():
        pred = forward_soft(batch.patches, z, state.mae)
    parts = soft_losses(pred, batch.target, z, lam, weights)
    try:
        total = joint_loss(parts, weights)
    except NonFiniteLoss as exc:
        raise TrainingAborted(f"step {state.t}: {exc}; terms {parts.values()}") from exc
    state.opt_cmm.zero_grad()
    total.backward()
    state.opt_cmm.step(lr_at(cfg, cfg.lr_cmm, state.t, cfg.cmm_lr_schedule == "constant"))
    values = parts.values()
    return {
        "loss_cl": values["cl"], "loss_gauss": values["gauss"], "loss_kl": values["kl"],
        "loss_div": values["div"], "loss_joint": total.item(),
        "soft_mask_ratio": float(np.mean(1.0 - z.data)), "z": z.data,
    }


# ---------------------------------------------------------------------------
# loop


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def metrics_row(t: int, lam, mae: dict | None, cmm: dict | None, fallback_count: int) -> list[str]:
    mae = mae or {}
    cmm = cmm or {}
    return [str(t), _fmt(lam), _fmt(mae.get("loss_mae")), _fmt(cmm.get("loss_cl")),
            _fmt(cmm.get("loss_gauss")), _fmt(cmm.get("loss_kl")), _fmt(cmm.get("loss_div")),
            _fmt(cmm.get("loss_joint")), _fmt(cmm.get("soft_mask_ratio")), str(fallback_count)]


@dataclass
class RunResult:
    state: TrainState
    rows: list[list[str]] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        i = METRIC_COLUMNS.index(name)
        return np.array([float(r[i]) if r[i] else np.nan for r in self.rows])

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        writer.writerows(self.rows)
        return buf.getvalue()


def run_iteration(images: np.ndarray, state: TrainState) -> tuple[list[str], dict]:
    cfg = state.config
    idx = state.loader.next(state.rng)
    batch = make_batch(images[idx], cfg.p, state.dtype, idx)
    t = state.t
    mae_out = cmm_out = None
    lam = None
    z = None
    if t == 0 and cfg.mode != "baseline" and cfg.head_calibration > 0:
        calibrate_head(state.cmm, batch.patches, cfg.ratio, cfg.head_calibration)
    if cfg.mode == "clmae":
        # the masking module is unchanged by step one, so one recorded
        # forward serves both steps
        z = cmm_tokens_forward(batch.patches, state.cmm)
    if cfg.mode in ("clmae", "baseline"):
        mae_out = step_mae(batch, state, z=None if z is None else z.data.copy())
    if cfg.mode in ("clmae", "cmm-only"):
        lam = cfg.lambda_for(t)
        cmm_out = step_cmm(batch, state, lam, z)
    row = metrics_row(t, lam, mae_out, cmm_out, state.fallback_count)
    state.t += 1
    return row, {"batch": batch, "mae": mae_out, "cmm": cmm_out}


def run_training(images: np.ndarray, config: TrainConfig | None = None, state: TrainState | None = None,
                 out_dir: str | Path | None = None,
                 callback: Callable[[TrainState, list[str], dict], None] | None = None,
                 stop_at: int | None = None) -> RunResult:
    """Train for iterations ``state.t .. T`` (inclusive) and return the metric rows.

    ``out_dir`` receives ``metrics.csv``, periodic checkpoints and mask dumps.
    ``stop_at`` ends the loop early once ``state.t`` reaches it (used to
    create mid-run checkpoints).
    """
    from .checkpoint import checkpoint_save

    if state is None:
        state = TrainState.create(config, len(images))
    cfg = state.config
    expected = (cfg.h, cfg.w, cfg.c)
    if tuple(images.shape[1:]) != expected:
        raise ValueError(f"dataset images {images.shape[1:]} do not match config geometry {expected}")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    dump_steps = set(cfg.dump_step_list()) if out else set()
    result = RunResult(state)
    end = cfg.T if stop_at is None else min(cfg.T, stop_at - 1)
    with ad.mode(state.dtype, strict=False):
        while state.t <= end:
            t = state.t
            row, info = run_iteration(images, state)
            result.rows.append(row)
            if t in dump_steps and cfg.mode != "baseline":
                _dump_training_masks(out, t, info, state)
            if callback:
                callback(state, row, info)
            if out and cfg.checkpoint_every and state.t % cfg.checkpoint_every == 0:
                checkpoint_save(state, out / f"checkpoint_{state.t:06d}.clmae")
    if out:
        _append_metrics(out / "metrics.csv", result.rows)
        checkpoint_save(state, out / f"checkpoint_{state.t:06d}.clmae")
    return result


def _append_metrics(path: Path, rows: list[list[str]]) -> None:
    """Write rows, keeping any earlier rows whose step precedes the first new one."""
    kept: list[list[str]] = []
    if path.exists() and rows:
        first = int(rows[0][0])
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            kept = [r for r in reader if r and int(r[0]) < first]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        writer.writerows(kept + rows)


def _dump_training_masks(out: Path, t: int, info: dict, state: TrainState) -> None:
    cfg = state.config
    z = info["cmm"]["z"] if info.get("cmm") else None
    masks = info["mae"]["masks"] if info.get("mae") else threshold(z)
    mdir = out / "masks"
    mdir.mkdir(exist_ok=True)
    for s in range(min(cfg.dump_samples, masks.shape[0])):
        write_mask_pgm(mdir / f"mask_{t}_{s}.pgm", masks[s], cfg.h // cfg.p, cfg.w // cfg.p, cfg.p)
