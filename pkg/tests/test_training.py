import numpy as np
import pytest

from clmae.config import load_config
from clmae.data import gen_synthetic
from clmae.losses import NonFiniteLoss
from clmae.mae import NothingToReconstruct
from clmae.training import (Loader, TrainState, TrainingAborted, make_batch, propose_masks,
                            random_masks, run_training, step_cmm, step_mae)


def test_freeze_contracts(tiny_config, tiny_images):
    state = TrainState.create(tiny_config, len(tiny_images))
    batch = make_batch(tiny_images[:4], tiny_config.p, state.dtype)
    cmm_before, mae_before = state.param_digest("cmm"), state.param_digest("mae")
    step_mae(batch, state)
    assert state.param_digest("cmm") == cmm_before
    assert state.param_digest("mae") != mae_before
    mae_before = state.param_digest("mae")
    step_cmm(batch, state, 0.5)
    assert state.param_digest("mae") == mae_before
    assert state.param_digest("cmm") != cmm_before


def test_all_visible_mask_rejected(tiny_config, tiny_images):
    state = TrainState.create(tiny_config, len(tiny_images))
    batch = make_batch(tiny_images[:2], tiny_config.p, state.dtype)
    with pytest.raises(NothingToReconstruct):
        step_mae(batch, state, masks=np.ones((2, tiny_config.n), dtype=np.int8))


def test_degenerate_masks_fall_back(tiny_config, tiny_images):
    state = TrainState.create(tiny_config, len(tiny_images))
    batch = make_batch(tiny_images[:3], tiny_config.p, state.dtype)
    z = np.array([[0.9] * 4, [0.1] * 4, [0.9, 0.1, 0.1, 0.1]])
    masks, _, fallbacks = propose_masks(batch, state, z)
    assert fallbacks == 2
    assert masks[2].tolist() == [1, 0, 0, 0]
    assert all(0 < row.sum() < 4 for row in masks)


def test_overfit_one_batch():
    images = gen_synthetic(2, 1, 32, 32, 3, seed=5).images
    cfg = load_config(overrides=dict(T=200, batch_size=2, dtype="float64", warmup_frac=0.0))
    state = TrainState.create(cfg, len(images))
    batch = make_batch(images, cfg.p, state.dtype)
    masks = random_masks(state, 2)
    losses = []
    for _ in range(200):
        losses.append(step_mae(batch, state, masks=masks.copy())["loss_mae"])
        state.t += 1
    assert losses[-1] < 0.05 * losses[0]


def test_gaussian_only_polarizes():
    images = gen_synthetic(2, 4, 32, 32, 3, seed=5).images
    cfg = load_config(overrides=dict(T=50, batch_size=8, dtype="float64", w_kl=0, w_div=0,
                                     fixed_lambda=0.0, mode="cmm-only", head_calibration=0,
                                     lr_cmm=1e-3, warmup_frac=0))
    state = TrainState.create(cfg, len(images))
    batch = make_batch(images, cfg.p, state.dtype)
    dist = []
    for _ in range(50):
        dist.append(np.abs(step_cmm(batch, state, 0.0)["z"] - 0.5).mean())
        state.t += 1
    assert np.all(np.diff(dist) > 0)


def test_loader_wraps_and_reshuffles():
    rng = np.random.default_rng(0)
    loader = Loader.create(rng, 5, 3)
    seen = [loader.next(rng) for _ in range(5)]
    counts = np.bincount(np.concatenate(seen), minlength=5)
    assert counts.tolist() == [3, 3, 3, 3, 3]


def test_run_logs_schedule_and_alternation(tiny_config, tiny_images, tmp_path):
    result = run_training(tiny_images, tiny_config, out_dir=tmp_path)
    lam = result.column("lambda_cl")
    assert lam[0] == 1.0 and lam[-1] == tiny_config.lambda_end
    assert len(result.rows) == tiny_config.T + 1
    assert [int(r[0]) for r in result.rows] == list(range(tiny_config.T + 1))
    assert not np.isnan(result.column("loss_mae")).any()
    assert not np.isnan(result.column("loss_joint")).any()
    assert (tmp_path / "metrics.csv").read_text() == result.csv_text()
    dumped = sorted(p.name for p in (tmp_path / "masks").iterdir())
    assert "mask_0_0.pgm" in dumped and f"mask_{tiny_config.T}_0.pgm" in dumped


def test_same_seed_identical_csv(tiny_config, tiny_images):
    a = run_training(tiny_images, tiny_config).csv_text()
    b = run_training(tiny_images, tiny_config).csv_text()
    assert a == b
    c = run_training(tiny_images, load_config(overrides={"seed": 1}, base=tiny_config)).csv_text()
    assert c != a


def test_baseline_mode_skips_cmm(tiny_config, tiny_images):
    cfg = load_config(overrides={"mode": "baseline"}, base=tiny_config)
    state = TrainState.create(cfg, len(tiny_images))
    before = state.param_digest("cmm")
    result = run_training(tiny_images, state=state)
    assert state.param_digest("cmm") == before
    assert np.isnan(result.column("loss_joint")).all()


def test_geometry_mismatch(tiny_config):
    with pytest.raises(ValueError):
        run_training(np.zeros((4, 32, 32, 3), np.uint8), tiny_config)


def test_nonfinite_aborts(tiny_config, tiny_images):
    state = TrainState.create(tiny_config, len(tiny_images))
    batch = make_batch(tiny_images[:4], tiny_config.p, state.dtype)
    state.mae.dec_pred.b.data[...] = np.inf
    with pytest.raises((TrainingAborted, NonFiniteLoss, FloatingPointError)):
        step_cmm(batch, state, 0.5)
