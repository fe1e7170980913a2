"""Run configuration: defaults, ``key = value`` files, and command-line overrides."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .losses import CurriculumSchedule, LossWeights

MODES = ("clmae", "baseline", "cmm-only")

# Keys that do not influence the numeric trajectory and stay out of the digest.
_NON_NUMERIC = ("data", "out", "checkpoint_every", "dump_steps", "dump_samples")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    T: int = 3000
    batch_size: int = 32
    lr_mae: float = 2e-3
    lr_cmm: float = 1e-5
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    cmm_lr_schedule: str = "cosine"
    lambda_end: float = -0.1
    fixed_lambda: float | None = None
    w_gauss: float = 10.0
    w_kl: float = 1.0
    w_div: float = 2.0
    mu: float = 0.5
    sigma: float = 0.12
    ratio: float = 0.75
    h: int = 32
    w: int = 32
    c: int = 3
    p: int = 8
    d: int = 64
    heads: int = 4
    depth: int = 4
    dec_d: int = 32
    dec_depth: int = 2
    dec_heads: int = 4
    cmm_depth: int = 5
    head_calibration: float = 2.0
    mode: str = "clmae"
    dtype: str = "float32"
    seed: int = 0
    data: str = ""
    out: str = "run"
    checkpoint_every: int = 0
    dump_steps: str = "quarters"
    dump_samples: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not -1.0 <= self.lambda_end <= 1.0:
            raise ConfigError(f"lambda_end {self.lambda_end} outside [-1, 1]")
        if self.fixed_lambda is not None and not -1.0 <= self.fixed_lambda <= 1.0:
            raise ConfigError(f"fixed_lambda {self.fixed_lambda} outside [-1, 1]")
        if self.lr_mae <= 0 or self.lr_cmm <= 0:
            raise ConfigError("learning rates must be positive")
        if self.T <= 0 or self.batch_size <= 0:
            raise ConfigError("T and batch_size must be positive")
        if self.h % self.p or self.w % self.p:
            raise ConfigError(f"image {self.h}x{self.w} not divisible by patch size {self.p}")
        if self.cmm_lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"cmm_lr_schedule must be cosine or constant, got {self.cmm_lr_schedule!r}")
        if self.head_calibration < 0:
            raise ConfigError("head_calibration must be >= 0 (0 disables it)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def n(self) -> int:
        return (self.h * self.w) // (self.p * self.p)

    @property
    def warmup(self) -> int:
        return int(round(self.warmup_frac * self.T))

    def schedule(self) -> CurriculumSchedule:
        return CurriculumSchedule(self.T, self.lambda_end)

    def lambda_for(self, t: int) -> float:
        return self.fixed_lambda if self.fixed_lambda is not None else self.schedule()(t)

    def weights(self) -> LossWeights:
        return LossWeights(self.w_gauss, self.w_kl, self.w_div, self.mu, self.sigma, self.ratio)

    def dump_step_list(self) -> list[int]:
        if self.dump_steps == "quarters":
            return sorted({0, self.T // 4, self.T // 2, 3 * self.T // 4, self.T})
        if not self.dump_steps.strip():
            return []
        return sorted({int(s) for s in self.dump_steps.split(",")})

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            lines.append(f"{key} = {'' if value is None else value}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        items = [f"{k}={v!r}" for k, v in asdict(self).items() if k not in _NON_NUMERIC]
        return hashlib.sha256("\n".join(items).encode()).digest()


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _coerce(key: str, raw: Any) -> Any:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    kind = _FIELDS[key].type
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "float | None":
            return None if raw in ("", "none", "None") else float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None,
                base: TrainConfig | None = None) -> TrainConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (later wins)."""
    cfg = base or TrainConfig()
    merged: dict[str, Any] = {}
    if path:
        merged.update(parse_config_text(Path(path).read_text()))
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = _coerce(key, value)
    try:
        return replace(cfg, **merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
