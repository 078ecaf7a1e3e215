"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Criteria 7 and 8 train the desk-scale benchmark on three seeds and take
roughly a quarter of an hour together.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from gfdaseg import evaluation as ev
from gfdaseg import objectives as obj
from gfdaseg.gfda import gaussian_mask, spectral_transfer
from gfdaseg.gradcheck import run_gradcheck
from gfdaseg.netcore.model import REDUCED, ModelState
from gfdaseg.synthdata import generate, random_record
from gfdaseg.tensorfft import Grid2D, fft2, fft2_array, ifft2
from gfdaseg.trainer import Finetuner, Pretrainer, TrainConfig, run_pipeline
import oracles

SEEDS = (0, 1, 2)
# Desk-scale step size shared by every arm of the directional experiments;
# 1e-4 underfits the 50/100-epoch schedule on 40 images per domain.
DESK_LR = 1e-3


@pytest.fixture()
def report(capsys):
    def emit(number, passed, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number} {'PASS' if passed else 'FAIL'}: {detail}")
        assert passed, detail
    return emit


def test_criterion_1_fft(report):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_dft = worst_parseval = worst_trip = 0.0
    for n in (4, 8, 16):
        x = rng.normal(size=(n, n))
        spec = fft2(Grid2D(x))
        worst_dft = max(worst_dft, float(np.max(np.abs(spec.data - oracles.naive_dft2_centered(x)))))
        energy = np.sum(np.abs(spec.data) ** 2) / x.size
        worst_parseval = max(worst_parseval, abs(energy - np.sum(x ** 2)) / np.sum(x ** 2))
        worst_trip = max(worst_trip, float(np.max(np.abs(ifft2(spec).data - x))))
    elapsed = time.perf_counter() - start
    ok = worst_dft <= 1e-9 and worst_parseval <= 1e-6 and worst_trip <= 1e-6 and elapsed < 1
    report(1, ok, f"dft err {worst_dft:.1e}, parseval {worst_parseval:.1e}, "
                  f"round trip {worst_trip:.1e}, {elapsed:.2f}s")


def test_criterion_2_gfda_identity(report):
    start = time.perf_counter()
    identity = 0.0
    phase = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, y = rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32))
        identity = max(identity, float(np.max(np.abs(spectral_transfer(x, x) - x))))
        out = spectral_transfer(x, y, clamp=False)
        s_out, s_src = fft2_array(out), fft2_array(x)
        keep = np.abs(s_out) > 1e-9
        phase = max(phase, float(np.max(np.abs(np.angle(s_out[keep] * np.conj(s_src[keep]))))))
    dc = float(gaussian_mask(32, 32).values[16, 16])
    elapsed = time.perf_counter() - start
    ok = identity <= 1e-4 and dc == 1.0 and phase <= 1e-6 and elapsed < 5
    report(2, ok, f"identity err {identity:.1e}, mask(DC)={dc}, phase err {phase:.1e}, "
                  f"{elapsed:.2f}s")


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def test_criterion_3_loss_oracles(report):
    start = time.perf_counter()
    worst = {k: 0.0 for k in ("scl", "ccl", "dfpm", "con", "sup", "reg")}
    styles, ids = list("AABBAABB"), list("sstt" * 2)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(8, 6))
        worst["scl"] = max(worst["scl"], _rel(obj.scl_loss(z, styles).item(),
                                               oracles.scl(z.tolist(), styles, 0.07)))
        worst["ccl"] = max(worst["ccl"], _rel(obj.ccl_loss(z, ids).item(),
                                               oracles.ccl(z.tolist(), ids, 0.07)))
        f, K = rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(4, 4))
        worst["dfpm"] = max(worst["dfpm"], float(np.max(np.abs(
            obj.dfpm_propagate(f, K).data - oracles.dfpm(f, K)))))
        r1 = [random_record(rng, 32) for _ in range(2)]
        r2 = [random_record(rng, 32) for _ in range(2)]
        f1, f2, t1, t2 = (rng.normal(size=(2, 4, 4, 3)) for _ in range(4))
        pairs = obj.build_pairs(obj.feature_map(f1, r1, 32), obj.feature_map(f2, r2, 32), 8.0)
        expected_pairs = oracles.pairs(r1, r2, 32, 4, 0.6)
        same = sorted(zip(pairs.batch.tolist(), pairs.m.tolist(), pairs.n.tolist())) == sorted(
            expected_pairs)
        con = _rel(obj.consistency_loss((t1, t2), (f1, f2), pairs).item(),
                   oracles.consistency(t1, t2, f1, f2, expected_pairs))
        worst["con"] = max(worst["con"], con if same else np.inf)
        logits, teacher = rng.normal(size=(2, 4, 4, 2)), rng.normal(size=(2, 4, 4, 2))
        labels = rng.integers(0, 2, size=(2, 4, 4))
        worst["sup"] = max(worst["sup"], _rel(obj.supervised_loss(logits, labels).item(),
                                               oracles.cross_entropy(logits, labels)))
        worst["reg"] = max(worst["reg"], _rel(obj.reg_loss(logits, teacher).item(),
                                               oracles.soft_cross_entropy(logits, teacher)))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-12 and elapsed < 10
    report(3, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.2f}s")


def test_criterion_4_gradcheck(report):
    start = time.perf_counter()
    n_model = ModelState.create(REDUCED, 0)
    n_model.init_teacher(0)
    results = run_gradcheck(seed=0, h=1e-3, tol=1e-4)
    elapsed = time.perf_counter() - start
    size = sum(v.size for k, v in n_model.params.items()
               if not k.startswith(("mom.", "teacher.")))
    ok = all(r.passed for r in results) and size <= 2000 and elapsed < 120
    worst = max(results, key=lambda r: r.max_rel_error)
    report(4, ok, f"{sum(r.passed for r in results)}/{len(results)} losses pass, worst "
                  f"{worst.loss} {worst.max_rel_error:.1e}, {size} params, {elapsed:.1f}s")


def test_criterion_5_ema_replay(report):
    split = generate(0, 4, 4, 16, labeled=2, n_test=2)
    net = REDUCED.to_dict()
    size = net.pop("image_size")
    config = TrainConfig(image_size=size, net=net, pretrain_epochs=100, finetune_epochs=200)
    worst = 0.0
    for stage, prefix in ((Pretrainer(config, split), "mom."), (Finetuner(config, split), "teacher.")):
        start = {k: v for k, v in stage.state.params.items() if k.startswith(prefix)}
        trajectory = []
        for _ in range(200):
            stage.step()
            trajectory.append(dict(stage.state.params))
        for name, value in start.items():
            fast = name[len(prefix):]
            expected = oracles.ema_closed_form(value, [p[fast] for p in trajectory], config.alpha)
            worst = max(worst, float(np.max(np.abs(stage.state.params[name] - expected))))
    report(5, worst <= 1e-12, f"max replay deviation {worst:.1e} over 200 steps")


def test_criterion_6_metrics(report):
    mismatches = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        p = rng.uniform(size=(16, 16)) < rng.uniform(0.2, 0.7)
        g = rng.uniform(size=(16, 16)) < rng.uniform(0.2, 0.7)
        p[0, 0] = g[0, 0] = True
        mismatches += ev.dsc(p, g) != oracles.dice(p, g)
        mismatches += ev.hausdorff(p, g) != oracles.hausdorff(p, g)
    a, b = np.zeros((10, 10)), np.zeros((10, 10))
    a[1, 1], b[4, 5] = 1, 1
    c, d = np.zeros((4, 4)), np.zeros((4, 4))
    c[:, :2], d[:, 1:3] = 1, 1
    fixtures = ev.hausdorff(a, b) == 5.0 and ev.dsc(c, d) == 0.5
    report(6, mismatches == 0 and fixtures,
           f"{mismatches} mismatches on 50 pairs, 3-4-5 HD {ev.hausdorff(a, b)}, "
           f"half-overlap Dice {ev.dsc(c, d)}")


@pytest.fixture(scope="module")
def desk_experiment():
    """Ablation rows a and e plus the source-only baseline on the synthetic benchmark."""
    config = TrainConfig(image_size=64, labeled=0.5, pretrain_epochs=50, finetune_epochs=100,
                         lr=DESK_LR)
    start = time.perf_counter()
    rows = ev.ablation(config, rows=("a", "e"), seeds=SEEDS, baseline=True,
                       data=lambda s: generate(s, 40, 40, 64, labeled=0.5, n_test=40))
    return {r.experiment: r for r in rows}, time.perf_counter() - start, config


def test_criterion_7_directional_ssda(report, desk_experiment):
    rows, elapsed, _ = desk_experiment
    base, a, e = rows[ev.BASELINE].dsc_mean, rows["a"].dsc_mean, rows["e"].dsc_mean
    ok = e - base >= 0.05 and e > a and elapsed < 15 * 60
    per_seed = " ".join(f"[{n}: " + ",".join(f"{r['dsc_mean']:.3f}" for r in rows[n].reports) + "]"
                        for n in (ev.BASELINE, "a", "e"))
    report(7, ok, f"DSC noDA {base:.4f}, row a {a:.4f}, row e {e:.4f} "
                  f"(e-noDA {e - base:+.4f}, e-a {e - a:+.4f}) {per_seed}, {elapsed / 60:.1f} min")


def test_criterion_8_directional_uda(report, desk_experiment):
    rows, _, config = desk_experiment
    start = time.perf_counter()
    scores = []
    for seed in SEEDS:
        split = generate(seed, 40, 40, 64, labeled=0, n_test=40)
        cfg = replace(config, seed=seed, mode="UDA", labeled=0)
        scores.append(run_pipeline(cfg, split).report.metrics["target"]["dsc_mean"])
    elapsed = time.perf_counter() - start
    base, uda = rows[ev.BASELINE].dsc_mean, float(np.mean(scores))
    ok = uda - base >= 0.03 and elapsed < 15 * 60
    report(8, ok, f"DSC noDA {base:.4f}, UDA {uda:.4f} (diff {uda - base:+.4f}) "
                  f"per seed {[round(s, 3) for s in scores]}, {elapsed / 60:.1f} min")


def test_criterion_9_determinism_and_resume(report, tmp_path):
    split = generate(0, 4, 4, 32, labeled=2, n_test=4)
    config = TrainConfig(image_size=32, pretrain_epochs=2, finetune_epochs=3)
    r1 = run_pipeline(config, split).report.to_json()
    r2 = run_pipeline(config, split).report.to_json()
    same_report = r1 == r2
    resumes = []
    for cls in (Pretrainer, Finetuner):
        continuous = cls(config, split).run(5)
        first = cls(config, split).run(2)
        first.save(tmp_path / f"{cls.__name__}.ckpt")
        resumed = cls.from_checkpoint(tmp_path / f"{cls.__name__}.ckpt", split).run(3)
        resumes.append(all(np.array_equal(continuous.state.params[k], resumed.state.params[k])
                           for k in continuous.state.params)
                       and continuous.log == resumed.log and resumed.step_count == 5)
    report(9, same_report and all(resumes),
           f"reports identical: {same_report}, pretrain resume exact: {resumes[0]}, "
           f"finetune resume exact: {resumes[1]}")
