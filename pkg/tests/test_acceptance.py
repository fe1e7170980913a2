"""Acceptance criteria 1-9, each at its stated tolerance.

Every test prints one ``acceptance <n> ...: PASS/FAIL`` line. The full module
trains several toy models and takes roughly 40 minutes on one CPU core.
"""

from __future__ import annotations

import time
from fractions import Fraction

import numpy as np
import pytest

from clmae import autodiff as ad
from clmae.analysis import compare_with_random, mean_pairwise_hamming
from clmae.checkpoint import checkpoint_bytes, checkpoint_load, checkpoint_save
from clmae.config import load_config
from clmae.data import gen_synthetic, pixel_nn_accuracy
from clmae.evaluation import (RUNS, FeatureSet, extract_features, few_shot_probe, linear_probe,
                              nn_classify)
from clmae.gradcheck import run_suite
from clmae.losses import CurriculumSchedule
from clmae.masking import cmm_forward, threshold
from clmae.training import TrainState, preprocess, run_training

SEEDS = (0, 1, 2)
CMM_STEPS = 1000
CMM_LR = 1e-5  # masking-module rate for the 1000-step control runs


def report(capsys, n: int, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nacceptance {n} {name}: {'PASS' if ok else 'FAIL'} ({detail})", flush=True)


@pytest.fixture(scope="module")
def pool():
    return gen_synthetic(10, 200, 32, 32, 3, seed=3).images


@pytest.fixture(scope="module")
def held_out():
    return gen_synthetic(10, 320, 32, 32, 3, seed=4).images


def soft_masks(images, cmm) -> np.ndarray:
    with ad.no_grad(), ad.mode(cmm.cls.data.dtype, strict=False):
        return cmm_forward(preprocess(images, cmm.cls.data.dtype), cmm).data


# ---------------------------------------------------------------------------
# 1, 2: gradients and schedule


def test_gradient_suite(capsys):
    start = time.perf_counter()
    results = run_suite()
    elapsed = time.perf_counter() - start
    worst = max(results, key=results.get)
    ok = results[worst] < 1e-4 and elapsed < 120
    report(capsys, 1, "gradient suite", ok,
           f"{len(results)} components, max rel err {results[worst]:.2e} ({worst}), {elapsed:.1f}s")
    assert ok


def test_schedule_exactness(capsys):
    failures = []
    for T, end in ((3000, -0.1), (100, -0.1), (7, 0.3), (1000, -1.0), (3, 1.0)):
        sched = load_config(overrides={"T": T, "lambda_end": end}).schedule()
        lam = [sched(t) for t in range(T + 1)]
        if lam[0] != 1.0 or lam[-1] != end:
            failures.append(f"T={T}: endpoints {lam[0]!r}, {lam[-1]!r}")
        # the float trajectory is the correctly rounded image of an affine rational sequence
        exact = [Fraction(1) + (Fraction(end) - 1) * Fraction(t, T) for t in range(T + 1)]
        if any(float(e) != v for e, v in zip(exact, lam)):
            failures.append(f"T={T}: value not the nearest double of the affine line")
        second = {exact[t + 2] - 2 * exact[t + 1] + exact[t] for t in range(T - 1)}
        if second - {0}:
            failures.append(f"T={T}: nonzero second difference")
        if not 0.0 <= sched.k <= 2.0 / T:
            failures.append(f"T={T}: k={sched.k} outside [0, 2/T]")
    with pytest.raises(ValueError):
        CurriculumSchedule.from_decay(100, 2.0 / 100 + 1e-9)
    with pytest.raises(ValueError):
        CurriculumSchedule.from_decay(100, -1e-9)
    sched = CurriculumSchedule(3000, -0.1)
    float_second = np.abs(np.diff([sched(t) for t in range(3001)], 2)).max()
    ok = not failures
    report(capsys, 2, "schedule exactness", ok,
           "; ".join(failures) or f"endpoints exact, max float 2nd diff {float_second:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 3, 4, 5: masking-module mechanisms in CMM-only runs against a pretrained MAE


class CmmRuns:
    def __init__(self, pool, held_out):
        self.pool = pool
        self.held_out = held_out
        cfg = load_config(overrides=dict(mode="baseline", T=300, seed=0))
        self.mae = run_training(pool, cfg).state.mae
        self.cache: dict[str, dict] = {}

    def get(self, name: str, **overrides) -> dict:
        if name not in self.cache:
            cfg = load_config(overrides=dict(mode="cmm-only", T=CMM_STEPS, seed=0, lr_cmm=CMM_LR,
                                             **overrides))
            state = TrainState.create(cfg, len(self.pool))
            state.mae = self.mae
            hamming = []

            def track(st, row, info):
                hamming.append(mean_pairwise_hamming(threshold(info["cmm"]["z"])))

            start = time.perf_counter()
            run_training(self.pool, state=state, callback=track)
            z = soft_masks(self.held_out, state.cmm)
            self.cache[name] = dict(
                seconds=time.perf_counter() - start, z=z, fraction=float(1.0 - z.mean()),
                middle=float(np.mean((z >= 0.4) & (z <= 0.6))), hamming=np.array(hamming))
        return self.cache[name]


@pytest.fixture(scope="module")
def cmm_runs(pool, held_out):
    return CmmRuns(pool, held_out)


def test_ratio_compliance(cmm_runs, capsys):
    tuned = cmm_runs.get("tuned")
    no_kl = cmm_runs.get("no_kl", w_kl=0.0, fixed_lambda=-1.0)
    seconds = tuned["seconds"] + no_kl["seconds"]
    ok = (0.70 <= tuned["fraction"] <= 0.80 and not 0.60 <= no_kl["fraction"] <= 0.90
          and seconds < 600)
    report(capsys, 3, "ratio compliance", ok,
           f"masked fraction {tuned['fraction']:.3f} with KL, {no_kl['fraction']:.3f} without KL "
           f"and lambda=-1; {seconds:.0f}s")
    assert ok


def test_bimodality(cmm_runs, held_out, capsys):
    tuned = cmm_runs.get("tuned")
    cfg = load_config(overrides=dict(mode="cmm-only", seed=0, w_gauss=0.0, head_calibration=0.0))
    z0 = soft_masks(held_out, TrainState.create(cfg, 1).cmm)
    init_middle = float(np.mean((z0 >= 0.4) & (z0 <= 0.6)))
    no_gauss = cmm_runs.get("no_gauss", w_gauss=0.0, head_calibration=0.0)
    ok = tuned["middle"] < 0.10 and init_middle > 0.30
    report(capsys, 4, "bimodality", ok,
           f"z in [0.4,0.6]: {100 * tuned['middle']:.1f}% with gaussian weight 10, "
           f"{100 * init_middle:.1f}% at init with weight 0 "
           f"({100 * no_gauss['middle']:.1f}% after {CMM_STEPS} steps)")
    assert ok


def test_diversity(cmm_runs, capsys):
    tuned = cmm_runs.get("tuned")
    no_div = cmm_runs.get("no_div", w_div=0.0)
    collapsed = bool((no_div["hamming"] < 0.01).any())
    shrank = no_div["hamming"][-1] < tuned["hamming"][-1]
    ok = tuned["hamming"].min() > 0.05 and (collapsed or shrank)
    report(capsys, 5, "diversity", ok,
           f"weight 2: min Hamming {tuned['hamming'].min():.3f}, final {tuned['hamming'][-1]:.3f}; "
           f"weight 0: min {no_div['hamming'].min():.3f}, final {no_div['hamming'][-1]:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 6: curriculum direction


PARTNER_STEP = 545  # state after iteration 544, lambda = 0.8005


def test_curriculum_direction(pool, held_out, capsys):
    start = time.perf_counter()
    lines, holds = [], 0
    for seed in SEEDS:
        cfg = load_config(overrides=dict(mode="clmae", T=3000, lambda_end=-0.1, seed=seed))
        state = TrainState.create(cfg, len(pool))
        found = {}

        def probe(st, row, info):
            if st.t == PARTNER_STEP:
                found["lam"] = float(row[1])
                found["partner"] = compare_with_random(held_out, st.mae, st.cmm, batches=100,
                                                       seed=seed)

        run_training(pool, state=state, callback=probe)
        partner = found["partner"]
        end = compare_with_random(held_out, state.mae, state.cmm, batches=100, seed=seed)
        ok = partner.margin <= 0 and end.margin >= 0
        holds += ok
        lines.append(f"seed {seed}: lambda {found['lam']:.3f} margin {partner.margin:+.4f} "
                     f"({partner.cmm_loss:.3f} vs {partner.random_loss:.3f}), end margin "
                     f"{end.margin:+.4f} ({end.cmm_loss:.3f} vs {end.random_loss:.3f})")
    minutes = (time.perf_counter() - start) / 60
    ok = holds >= 2 and minutes < 30
    report(capsys, 6, "curriculum direction", ok,
           f"{holds}/3 seeds; " + "; ".join(lines) + f"; {minutes:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 7: baseline learning sanity

BASELINE_BATCH = 64


def test_learning_sanity(pool, capsys):
    train = gen_synthetic(10, 10, 32, 32, 3, seed=1)
    test = gen_synthetic(10, 50, 32, 32, 3, seed=2)
    pixel_acc = pixel_nn_accuracy(train, test)
    lines, ok = [], True
    for seed in SEEDS:
        cfg = load_config(overrides=dict(mode="baseline", T=3000, seed=seed,
                                          batch_size=BASELINE_BATCH))
        result = run_training(pool, cfg)
        loss = result.column("loss_mae")
        early, late = loss[40:61].mean(), loss[-21:].mean()
        drop = 1.0 - late / early
        mae = result.state.mae
        feat_acc = nn_classify(FeatureSet(extract_features(mae, train.images), train.labels),
                               FeatureSet(extract_features(mae, test.images), test.labels)).acc1
        seed_ok = drop >= 0.5 and feat_acc - pixel_acc >= 5.0
        ok &= seed_ok
        lines.append(f"seed {seed}: loss {early:.3f}->{late:.3f} (-{100 * drop:.0f}%), "
                     f"NN {feat_acc:.1f}% vs pixels {pixel_acc:.1f}%")
    report(capsys, 7, "learning sanity", ok, "; ".join(lines))
    assert ok


# ---------------------------------------------------------------------------
# 8: evaluation protocols


def _brute_nn(train: FeatureSet, test: FeatureSet) -> float:
    preds = []
    for q in test.features:
        d = [float(((q - x) ** 2).sum()) for x in train.features]
        preds.append(train.labels[int(np.argmin(d))])
    return 100.0 * float(np.mean(np.array(preds) == test.labels))


def test_protocol_fidelity(capsys):
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(200):
        n_train, n_test, dim = rng.integers(1, 30), rng.integers(1, 20), rng.integers(1, 6)
        train = FeatureSet(rng.integers(-50, 50, (n_train, dim)), rng.integers(0, 5, n_train))
        test = FeatureSet(rng.integers(-50, 50, (n_test, dim)), rng.integers(0, 5, n_test))
        mismatches += nn_classify(train, test).acc1 != _brute_nn(train, test)

    def blobs(per_class):
        centers = np.array([[-4.0, 0.0], [4.0, 0.0], [0.0, 6.0]])
        x = np.concatenate([rng.normal(c, 0.5, (per_class, 2)) for c in centers])
        return FeatureSet(x, np.repeat(np.arange(3), per_class))

    train, test = blobs(12), blobs(20)
    probe = linear_probe(train, test, epochs=200, lr=0.05)
    few = few_shot_probe(train, test, 12, epochs=200, lr=0.05)
    exact = few.runs == probe.runs and few.acc1 == probe.acc1 and few.acc5 == probe.acc5
    runs = (len(probe.runs), len(few.runs), len(few_shot_probe(train, test, 2, epochs=5).runs))
    mean_ok = probe.acc1 == float(np.mean([a for a, _ in probe.runs]))
    ok = mismatches == 0 and probe.acc1 == 100.0 and exact and runs == (RUNS,) * 3 \
        and mean_ok
    report(capsys, 8, "protocol fidelity", ok,
           f"NN mismatches {mismatches}/200, probe Acc@1 {probe.acc1:.1f}%, "
           f"full-class few-shot identical: {exact}, runs per protocol {runs}")
    assert ok


# ---------------------------------------------------------------------------
# 9: determinism and persistence


def test_determinism_and_persistence(pool, tmp_path, capsys):
    cfg = load_config(overrides=dict(mode="clmae", T=40, seed=5))
    images = pool[:256]
    a = run_training(images, cfg, out_dir=tmp_path / "a")
    b = run_training(images, cfg, out_dir=tmp_path / "b")
    same_csv = (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()

    checkpoint_save(a.state, tmp_path / "x.clmae")
    checkpoint_save(checkpoint_load(tmp_path / "x.clmae"), tmp_path / "y.clmae")
    roundtrip = (tmp_path / "x.clmae").read_bytes() == (tmp_path / "y.clmae").read_bytes()

    state = TrainState.create(cfg, len(images))
    first = run_training(images, state=state, stop_at=cfg.T // 2)
    checkpoint_save(state, tmp_path / "half.clmae")
    rest = run_training(images, state=checkpoint_load(tmp_path / "half.clmae"))
    resumed = (first.rows + rest.rows == a.rows
               and checkpoint_bytes(rest.state) == checkpoint_bytes(a.state))
    ok = same_csv and roundtrip and resumed
    report(capsys, 9, "determinism and persistence", ok,
           f"identical CSVs {same_csv}, byte-identical round trip {roundtrip}, "
           f"resume at T/2 bit-exact {resumed}")
    assert ok
