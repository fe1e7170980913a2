"""Command-line entry point: data generation, pretraining, evaluation and diagnostics.

Exit status is 0 on success, 1 for usage errors and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, TrainConfig, load_config
from .data import Dataset, DatasetError, gen_synthetic, pixel_nn_accuracy

log = logging.getLogger("clmae")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", help="output path (file or directory, per command)")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="training dataset file")
    p.add_argument("--steps", type=int, dest="T", help="total iterations T")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda-end", type=float, help="curriculum weight at the last iteration")
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="checkpoint whose MAE encoder provides features")
    src.add_argument("--pixels", action="store_true", help="use raw pixels as features")
    p.add_argument("--train", required=True, help="labelled train dataset")
    p.add_argument("--test", required=True, help="labelled test dataset")
    p.add_argument("--backbone", help="tag written to the results CSV")


def _probe_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)


def build_parser() -> Parser:
    parser = Parser(prog="clmae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic class-structured dataset")
    _common(p)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--patch", type=int, help="patch size the extents must divide")

    for name, text in (("pretrain", "jointly train the MAE and the masking module"),
                       ("pretrain-baseline", "train the MAE alone on uniform random masks")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _train_flags(p)

    p = sub.add_parser("resume", help="continue training from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="training dataset (defaults to the one in the checkpoint config)")

    p = sub.add_parser("eval-nn", help="nearest-neighbor classification on frozen features")
    _common(p)
    _eval_flags(p)

    p = sub.add_parser("eval-probe", help="linear probe on frozen features")
    _common(p)
    _eval_flags(p)
    _probe_flags(p)

    p = sub.add_parser("eval-fewshot", help="few-shot linear probes on frozen features")
    _common(p)
    _eval_flags(p)
    _probe_flags(p)
    p.add_argument("--shots", default="1,2,4,8,16", help="comma-separated shot counts")

    p = sub.add_parser("dump-masks", help="write binary mask images and per-image mask statistics")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=16)

    p = sub.add_parser("grad-check", help="finite-difference check of every differentiable component")
    _common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


# ---------------------------------------------------------------------------
# commands


def _config(args, **extra) -> TrainConfig:
    overrides = {}
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    for key in ("T", "batch_size", "lambda_end", "dtype", "checkpoint_every", "data", "seed", "out"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    overrides.update(extra)
    return load_config(args.config, overrides)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    h = args.height or cfg.h
    w = args.width or cfg.w
    c = args.channels or cfg.c
    patch = args.patch or cfg.p
    ds = gen_synthetic(args.classes, args.per_class, h, w, c, cfg.seed, patch=patch)
    out = Path(args.out or "data.clmds")
    ds.save(out)
    print(f"wrote {len(ds)} images ({args.classes} classes, {h}x{w}x{c}) to {out}")
    if args.per_class >= 2 and args.classes >= 2:
        half = np.arange(len(ds)) % args.per_class < args.per_class // 2
        acc = pixel_nn_accuracy(Dataset(ds.images[half], ds.labels[half], ds.classes),
                                Dataset(ds.images[~half], ds.labels[~half], ds.classes))
        chance = 100.0 / args.classes
        print(f"pixel-space 1-NN accuracy (split halves): {acc:.1f}% (chance {chance:.1f}%)")
        if not chance < acc < 100.0:
            log.warning("pixel-space 1-NN accuracy %.1f%% is outside (%.1f, 100)", acc, chance)
    return 0


def _load_images(path: str | None, cfg: TrainConfig) -> np.ndarray:
    if not path:
        raise ConfigError("no dataset given (use --data or set 'data' in the config)")
    ds = Dataset.load(path)
    if ds.shape != (cfg.h, cfg.w, cfg.c):
        raise DatasetError(f"dataset images are {ds.shape}, config expects {(cfg.h, cfg.w, cfg.c)}")
    return ds.images


def _train(cfg: TrainConfig, images: np.ndarray, state=None) -> int:
    from .training import run_training

    result = run_training(images, cfg if state is None else None, state=state, out_dir=cfg.out)
    last = result.rows[-1] if result.rows else None
    print(f"trained to step {result.state.t - 1}; outputs in {cfg.out}")
    if last:
        print("last metrics: " + ", ".join(f"{k}={v}" for k, v in zip(
            ("step", "lambda_cl", "loss_mae", "loss_cl"), last[:4]) if v))
    return 0


def cmd_pretrain(args, mode: str) -> int:
    cfg = _config(args, mode=mode)
    return _train(cfg, _load_images(cfg.data, cfg))


def cmd_resume(args) -> int:
    from .checkpoint import checkpoint_load

    state = checkpoint_load(args.checkpoint)
    cfg = state.config
    if args.seed is not None and args.seed != cfg.seed:
        raise ConfigError("a resumed run keeps its original seed")
    updates = {"out": args.out or str(Path(args.checkpoint).parent)}
    if args.data:
        updates["data"] = args.data
    cfg = load_config(overrides=updates, base=cfg)
    state.config = cfg
    if state.t > cfg.T:
        print(f"checkpoint is already at the end of training (t={state.t})")
        return 0
    return _train(cfg, _load_images(cfg.data, cfg), state)


def _features(args):
    from .evaluation import FeatureSet, extract_features

    train, test = Dataset.load(args.train), Dataset.load(args.test)
    if args.pixels:
        def feats(ds):
            return ds.images.reshape(len(ds), -1).astype(np.float64) / 255.0
        tag = args.backbone or "pixels"
        return FeatureSet(feats(train), train.labels), FeatureSet(feats(test), test.labels), tag
    from .checkpoint import checkpoint_load

    state = checkpoint_load(args.checkpoint)
    tag = args.backbone or f"{state.config.mode}@{state.t - 1}"
    return (FeatureSet(extract_features(state.mae, train.images), train.labels),
            FeatureSet(extract_features(state.mae, test.images), test.labels), tag)


def _emit(results, tag: str, out: str | None) -> None:
    from .evaluation import results_csv

    text = results_csv(results, tag)
    if out:
        Path(out).write_text(text)
    sys.stdout.write(text)


def cmd_eval_nn(args) -> int:
    from .evaluation import nn_classify

    train, test, tag = _features(args)
    _emit([nn_classify(train, test)], tag, args.out)
    return 0


def cmd_eval_probe(args) -> int:
    from .evaluation import linear_probe

    train, test, tag = _features(args)
    seed = args.seed if args.seed is not None else 0
    _emit([linear_probe(train, test, epochs=args.epochs, lr=args.lr, seed=seed)], tag, args.out)
    return 0


def _shots(text: str) -> list[int]:
    try:
        shots = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--shots expects comma-separated integers, got {text!r}") from None
    if not shots or min(shots) < 1:
        raise UsageError("--shots needs positive integers")
    return shots


def cmd_eval_fewshot(args) -> int:
    from .evaluation import few_shot_probe

    shots = _shots(args.shots)
    train, test, tag = _features(args)
    seed = args.seed if args.seed is not None else 0
    results = [few_shot_probe(train, test, k, epochs=args.epochs, lr=args.lr, seed=seed)
               for k in shots]
    _emit(results, tag, args.out)
    return 0


def cmd_dump_masks(args) -> int:
    from .analysis import mask_stats
    from .checkpoint import checkpoint_load
    from .masking import cmm_forward, threshold, write_mask_pgm
    from .training import preprocess

    state = checkpoint_load(args.checkpoint)
    cfg = state.config
    ds = Dataset.load(args.data)
    if ds.shape != (cfg.h, cfg.w, cfg.c):
        raise DatasetError(f"dataset images are {ds.shape}, checkpoint expects {(cfg.h, cfg.w, cfg.c)}")
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    count = min(args.samples, len(ds))
    idx = np.sort(rng.choice(len(ds), size=count, replace=False))
    with ad.no_grad(), ad.mode(state.dtype, strict=False):
        z = cmm_forward(preprocess(ds.images[idx], state.dtype), state.cmm).data
    masks = threshold(z)
    out = Path(args.out or "masks")
    out.mkdir(parents=True, exist_ok=True)
    step = state.t - 1
    gh, gw = cfg.h // cfg.p, cfg.w // cfg.p
    with (out / "index.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("file", "image", "mean_z", "fraction_masked", "entropy"))
        for s, (i, st) in enumerate(zip(idx, mask_stats(z))):
            name = f"mask_{step}_{s}.pgm"
            write_mask_pgm(out / name, masks[s], gh, gw, cfg.p)
            writer.writerow((name, int(i), repr(st.mean_z), repr(st.fraction_masked), repr(st.entropy)))
    print(f"wrote {count} masks and index.csv to {out}")
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import main_report

    ok, report = main_report(args.tolerance)
    print(report)
    return 0 if ok else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": lambda a: cmd_pretrain(a, "clmae"),
    "pretrain-baseline": lambda a: cmd_pretrain(a, "baseline"),
    "resume": cmd_resume,
    "eval-nn": cmd_eval_nn,
    "eval-probe": cmd_eval_probe,
    "eval-fewshot": cmd_eval_fewshot,
    "dump-masks": cmd_dump_masks,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    from .checkpoint import CheckpointError
    from .evaluation import NotEnoughShots
    from .training import TrainingAborted

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    except (NotEnoughShots, ConfigError, DatasetError, CheckpointError, TrainingAborted,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
