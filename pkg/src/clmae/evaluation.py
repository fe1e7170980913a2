"""Frozen-encoder evaluation: nearest neighbor, linear probe, few-shot probe."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .mae import MaeParams, embed, encode
from .nn import patchify
from .optim import AdamW, AdamWHyper

log = logging.getLogger(__name__)

RUNS = 3
SHOTS = (1, 2, 4, 8, 16)


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> FeatureSet:
        return FeatureSet(self.features[idx], self.labels[idx])


@dataclass
class ProbeResult:
    protocol: str
    acc1: float
    acc5: float
    runs: list[tuple[float, float]] = field(default_factory=list)
    shots: int | None = None
    seeds: list[int] = field(default_factory=list)


def extract_features(params: MaeParams, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Mean of the encoder's patch-token outputs with every patch visible (CLS excluded)."""
    from .training import preprocess

    images = np.asarray(images)
    p = params.p
    n_expected = params.n
    dtype = params.dtype
    out = []
    with ad.no_grad(), ad.mode(dtype, strict=False):
        for start in range(0, len(images), batch_size):
            grid = patchify(preprocess(images[start:start + batch_size], dtype), p)
            if grid.n != n_expected or grid.patches.shape[-1] != params.patch_embed.w.shape[0]:
                raise ValueError(f"images yield {grid.n} patches of width {grid.patches.shape[-1]}; "
                                 f"encoder expects {n_expected} of width {params.patch_embed.w.shape[0]}")
            latent = encode(embed(grid.patches, params), params)
            out.append(latent.data[:, 1:, :].mean(axis=1))
    return np.concatenate(out).astype(np.float64)


def topk_hits(scores_rank: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    return (scores_rank[:, :k] == labels[:, None]).any(axis=1)


def nn_classify(train: FeatureSet, test: FeatureSet, kmax: int = 5) -> ProbeResult:
    """Euclidean nearest neighbors by exhaustive search; ties go to the lower train index.

    Acc@5 counts a hit when the true label is among the labels of the five
    nearest training rows.
    """
    if len(train) == 0:
        raise ValueError("nearest-neighbor search needs a non-empty train set")
    k = min(kmax, len(train))
    if k < kmax:
        log.info("only %d train rows; Acc@%d uses %d neighbors", len(train), kmax, k)
    neighbors = np.empty((len(test), k), dtype=np.int64)
    chunk = max(1, 2_000_000 // max(1, train.features.size))
    for s in range(0, len(test), chunk):
        q = test.features[s:s + chunk]
        dist = ((q[:, None, :] - train.features[None, :, :]) ** 2).sum(axis=-1)
        neighbors[s:s + chunk] = np.argsort(dist, axis=1, kind="stable")[:, :k]
    nl = train.labels[neighbors]
    acc1 = 100.0 * float(np.mean(nl[:, 0] == test.labels)) if len(test) else 0.0
    acc5 = 100.0 * float(np.mean(topk_hits(nl, test.labels, k))) if len(test) else 0.0
    return ProbeResult("nn", acc1, acc5)


def _standardizer(train: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0) + 1e-6
    return lambda x: (x - mu) / sd


def _train_softmax(x: np.ndarray, y: np.ndarray, classes: int, seed: int, epochs: int,
                   lr: float) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    with ad.mode(np.float64, strict=True):
        w = ad.Tensor(rng.normal(0, 0.01, size=(x.shape[1], classes)), requires_grad=True)
        b = ad.Tensor(np.zeros(classes), requires_grad=True)
        opt = AdamW({"w": w, "b": b}, AdamWHyper(lr=lr, beta2=0.999, weight_decay=0.0))
        onehot = np.eye(classes)[y]
        xt = ad.Tensor(x)
        for _ in range(epochs):
            logits = ad.linear(xt, w, b)
            shift = logits.data.max(axis=1, keepdims=True)
            z = logits - shift
            lse = ad.log(ad.sum(ad.exp(z), axis=1, keepdims=True))
            loss = ad.neg(ad.mean(ad.sum((z - lse) * onehot, axis=1)))
            opt.zero_grad()
            loss.backward()
            opt.step()
    return w.data.copy(), b.data.copy()


def _topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    k = min(k, logits.shape[1])
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return 100.0 * float(np.mean(topk_hits(order, labels, k)))


def _probe_once(train: FeatureSet, test: FeatureSet, classes: int, seed: int, epochs: int,
                lr: float) -> tuple[float, float]:
    norm = _standardizer(train.features)
    w, b = _train_softmax(norm(train.features), train.labels, classes, seed, epochs, lr)
    logits = norm(test.features) @ w + b
    return _topk_accuracy(logits, test.labels, 1), _topk_accuracy(logits, test.labels, 5)


def _num_classes(*sets: FeatureSet) -> int:
    return int(max(int(s.labels.max()) for s in sets if len(s)) + 1)


def linear_probe(train: FeatureSet, test: FeatureSet, epochs: int = 100, lr: float = 0.01,
                 seed: int = 0, runs: int = RUNS) -> ProbeResult:
    """Softmax classifier on frozen (standardized) features, averaged over seeded runs."""
    if len(np.unique(train.labels)) < 2:
        raise ValueError("linear probing needs at least two classes in the train set")
    classes = _num_classes(train, test)
    seeds = [seed + r for r in range(runs)]
    per_run = [_probe_once(train, test, classes, s, epochs, lr) for s in seeds]
    acc1 = float(np.mean([a for a, _ in per_run]))
    acc5 = float(np.mean([a for _, a in per_run]))
    return ProbeResult("linear", acc1, acc5, per_run, None, seeds)


class NotEnoughShots(ValueError):
    def __init__(self, label: int, available: int, k: int):
        super().__init__(f"class {label} has {available} train samples, fewer than {k} shots")
        self.label = label


def sample_shots(train: FeatureSet, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``k`` samples per class, kept in original order."""
    picked = []
    for label in np.unique(train.labels):
        idx = np.flatnonzero(train.labels == label)
        if idx.size < k:
            raise NotEnoughShots(int(label), int(idx.size), k)
        picked.append(rng.choice(idx, size=k, replace=False))
    return np.sort(np.concatenate(picked))


def few_shot_probe(train: FeatureSet, test: FeatureSet, k: int, epochs: int = 100,
                   lr: float = 0.01, seed: int = 0, runs: int = RUNS) -> ProbeResult:
    if k not in SHOTS:
        log.info("shot count %d is outside the usual %s", k, SHOTS)
    classes = _num_classes(train, test)
    seeds = [seed + r for r in range(runs)]
    per_run = []
    for s in seeds:
        idx = sample_shots(train, k, np.random.default_rng([s, k]))
        per_run.append(_probe_once(train.subset(idx), test, classes, s, epochs, lr))
    acc1 = float(np.mean([a for a, _ in per_run]))
    acc5 = float(np.mean([a for _, a in per_run]))
    return ProbeResult("fewshot", acc1, acc5, per_run, k, seeds)


RESULT_COLUMNS = ("protocol", "backbone", "k", "acc1", "acc5", "seeds")


def results_csv(results: list[ProbeResult], backbone: str) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for r in results:
        writer.writerow([r.protocol, backbone, "" if r.shots is None else r.shots,
                         repr(r.acc1), repr(r.acc5), " ".join(str(s) for s in r.seeds)])
    return buf.getvalue()
