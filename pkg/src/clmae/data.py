"""Binary dataset files and a procedural class-structured image generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CLMDS\0"
VERSION = 1
HEADER = struct.Struct("<6sHIHHBH")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (count, h, w, c) uint8
    labels: np.ndarray  # (count,) int
    classes: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def to_bytes(self) -> bytes:
        count, h, w, c = self.images.shape
        if self.labels.size and int(self.labels.max()) >= self.classes:
            raise DatasetError("label out of range for class count")
        header = HEADER.pack(MAGIC, VERSION, count, h, w, c, self.classes)
        rec = np.zeros(count, dtype=np.dtype([("label", "<u2"), ("pixels", "u1", (h * w * c,))]))
        rec["label"] = self.labels
        rec["pixels"] = self.images.reshape(count, -1)
        return header + rec.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> Dataset:
        if len(data) < HEADER.size:
            raise DatasetError("dataset file is truncated")
        magic, version, count, h, w, c, classes = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise DatasetError("not a dataset file (bad magic)")
        if version != VERSION:
            raise DatasetError(f"dataset version {version} is not supported (expected {VERSION})")
        rsize = 2 + h * w * c
        if len(data) != HEADER.size + count * rsize:
            raise DatasetError(f"file length {len(data)} does not match header "
                               f"({HEADER.size} + {count} x {rsize})")
        rec = np.frombuffer(data, offset=HEADER.size, count=count,
                            dtype=np.dtype([("label", "<u2"), ("pixels", "u1", (h * w * c,))]))
        labels = rec["label"].astype(np.int64)
        if labels.size and labels.max() >= classes:
            raise DatasetError("label out of range for class count")
        return cls(rec["pixels"].reshape(count, h, w, c).copy(), labels, classes)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> Dataset:
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# synthetic data


def _class_styles(classes: int, c: int) -> dict[str, np.ndarray]:
    # fixed per-class styles; independent of the sampling seed
    style = np.random.default_rng(12345 + classes)
    return {
        "angle": np.pi * np.arange(classes) / classes,
        "freq": 2.0 + 4.0 * ((np.arange(classes) * 3) % classes) / max(1, classes - 1),
        "color": style.uniform(0.15, 0.85, size=(classes, c)),
        "shape": np.arange(classes) % 3,
    }


def render(label: int, h: int, w: int, c: int, classes: int, rng: np.random.Generator,
           styles: dict[str, np.ndarray] | None = None, noise: float = 0.02) -> np.ndarray:
    """One image in ``[0, 1]``: class texture + random oriented gradient + colored regions.

    Class identity sits in the texture's orientation and frequency, the base
    color and the shape kind. Texture phase, gradient direction, tint,
    recolored blobs, shape position, contrast and offset are drawn per image.
    Every region keeps the texture, so no patch is flat.
    """
    st = styles or _class_styles(classes, c)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    ang = st["angle"][label] + rng.normal(0, 0.08)
    u = np.cos(ang) * xx + np.sin(ang) * yy
    texture = np.sin(2 * np.pi * st["freq"][label] * u + rng.uniform(0, 2 * np.pi))
    g_ang = rng.uniform(0, 2 * np.pi)
    gradient = np.cos(g_ang) * (xx - 0.5) + np.sin(g_ang) * (yy - 0.5)
    tint = np.clip(st["color"][label] + rng.normal(0, 0.25, size=c), 0, 1)
    colour = np.broadcast_to(tint, (h, w, c)).copy()

    for _ in range(2):
        dy, dx = rng.uniform(0.1, 0.9, size=2)
        dr = rng.uniform(0.1, 0.25)
        colour[(yy - dy) ** 2 + (xx - dx) ** 2 < dr * dr] = rng.uniform(0, 1, size=c)

    cy, cx = rng.uniform(0.25, 0.75, size=2)
    r = rng.uniform(0.12, 0.22)
    kind = st["shape"][label]
    if kind == 0:
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
    elif kind == 1:
        inside = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r)
    else:
        inside = np.abs(yy - cy) + np.abs(xx - cx) < r * 1.3
    colour[inside] = 1 - st["color"][label]

    img = 0.5 + (0.25 * texture)[..., None] * (0.4 + 0.6 * colour) + 0.5 * gradient[..., None]
    img = (img - 0.5) * rng.uniform(0.7, 1.3) + 0.5 + rng.uniform(-0.1, 0.1)
    img = img + rng.normal(0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_synthetic(classes: int, per_class: int, h: int, w: int, c: int, seed: int,
                  patch: int | None = None) -> Dataset:
    """Deterministic class-structured dataset with labels in class-major order."""
    if min(classes, per_class, h, w, c) < 1:
        raise DatasetError("classes, per-class count and extents must be positive")
    if patch and (h % patch or w % patch):
        raise DatasetError(f"extents {h}x{w} are not divisible by patch size {patch}")
    rng = np.random.default_rng(seed)
    styles = _class_styles(classes, c)
    labels = np.repeat(np.arange(classes), per_class)
    images = np.stack([render(int(y), h, w, c, classes, rng, styles) for y in labels])
    return Dataset(np.round(images * 255).astype(np.uint8), labels, classes)


def pixel_nn_accuracy(train: Dataset, test: Dataset) -> float:
    """1-NN accuracy (percent) with raw pixels as features."""
    from .evaluation import FeatureSet, nn_classify

    def feats(ds):
        return FeatureSet(ds.images.reshape(len(ds), -1).astype(np.float64) / 255.0, ds.labels)

    return nn_classify(feats(train), feats(test)).acc1
