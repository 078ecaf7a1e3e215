import json
from dataclasses import replace

import numpy as np
import pytest

from gfdaseg import trainer as tr
from gfdaseg.gradcheck import reduced_config
from gfdaseg.netcore.model import ModelState
from gfdaseg.synthdata import LabelWithheldError, generate
from oracles import ema_closed_form


@pytest.fixture(scope="module")
def split():
    return generate(0, 4, 4, 16, labeled=2, n_test=2)


def small(**kw):
    return replace(reduced_config(0), pretrain_epochs=2, finetune_epochs=4, **kw)


def params_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# --------------------------------------------------------------------- config

def test_config_round_trip_and_validation():
    c = tr.TrainConfig()
    assert tr.TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    assert (c.lr, c.batch_size, c.alpha, c.tau, c.threshold) == (1e-4, 4, 0.999, 0.07, 0.6)
    assert (c.lambda1, c.lambda2, c.lambda3, c.pretrain_epochs, c.finetune_epochs) == (
        0.75, 0.75, 0.5, 50, 100)
    bad = [dict(lr=0), dict(alpha=1.0), dict(mode="X"), dict(tcl=True),
           dict(scl=False, ccl=False, dfpm=False), dict(mode="SSDA", labeled=0),
           dict(teacher_init="zeros"), dict(reg_rampup=2.0), dict(image_size=60)]
    for kw in bad:
        with pytest.raises(tr.ConfigError):
            replace(c, **kw).validate()
    with pytest.raises(tr.ConfigError):
        tr.TrainConfig.from_dict({"nope": 1})


def test_ablation_rows_switches():
    c = tr.TrainConfig()
    a, e = tr.ablation_config(c, "a"), tr.ablation_config(c, "e")
    assert a.tcl and not (a.scl or a.ccl or a.dfpm)
    assert e.scl and e.ccl and e.dfpm and not e.tcl
    for row in "abcde":
        tr.ablation_config(c, row).validate()


def test_history_csv_columns():
    text = tr.history_csv([{"epoch": 0, "l_pre": 1.5}])
    assert text.splitlines()[0] == ",".join(tr.HISTORY_COLUMNS)


# --------------------------------------------------------------------- EMA replay

def test_momentum_encoder_replays_closed_form(split):
    t = tr.Pretrainer(replace(small(), pretrain_epochs=50), split)
    start = t.state.group("mom.enc")
    trajectory = []
    for _ in range(200):
        t.step()
        trajectory.append(t.state.group("enc"))
    for name, value in start.items():
        fast = name[len("mom."):]
        expected = ema_closed_form(value, [p[fast] for p in trajectory], t.config.alpha)
        assert np.max(np.abs(t.state.params[name] - expected)) <= 1e-12


def test_teacher_replays_closed_form(split):
    t = tr.Finetuner(replace(small(), finetune_epochs=200), split)
    start = {k: v for k, v in t.state.params.items() if k.startswith("teacher.")}
    trajectory = []
    for _ in range(200):
        t.step()
        trajectory.append({k: v for k, v in t.state.params.items() if not k.startswith("teacher.")})
    for name, value in start.items():
        fast = name[len("teacher."):]
        expected = ema_closed_form(value, [p[fast] for p in trajectory], t.config.alpha)
        assert np.max(np.abs(t.state.params[name] - expected)) <= 1e-12


# --------------------------------------------------------------------- determinism and resume

@pytest.mark.parametrize("stage", ["pretrain", "finetune"])
def test_resume_matches_continuous(split, tmp_path, stage):
    cls = tr.Pretrainer if stage == "pretrain" else tr.Finetuner
    continuous = cls(small(), split).run(5)
    first = cls(small(), split).run(2)
    first.save(tmp_path / "c.ckpt")
    resumed = cls.from_checkpoint(tmp_path / "c.ckpt", split).run(3)
    assert resumed.step_count == 5
    assert params_equal(continuous.state.params, resumed.state.params)
    assert continuous.log == resumed.log
    assert params_equal(continuous.opt.state_arrays(), resumed.opt.state_arrays())


def test_pipeline_is_deterministic(split):
    cfg = small()
    r1 = tr.run_pipeline(cfg, split).report
    r2 = tr.run_pipeline(cfg, split).report
    assert r1.to_json() == r2.to_json()
    assert "wall_clock" not in r1.to_dict() and "wall_clock" in r1.to_dict(include_timing=True)


def test_checkpoint_stage_mismatch(split, tmp_path):
    tr.Pretrainer(small(), split).run(1).save(tmp_path / "p.ckpt")
    with pytest.raises(Exception, match="pretrain"):
        tr.Finetuner.from_checkpoint(tmp_path / "p.ckpt", split)
    state, meta = tr.load_state(tmp_path / "p.ckpt")
    assert meta["stage"] == "pretrain" and "enc.conv1.w" in state.params


# --------------------------------------------------------------------- fine-tuning semantics

def test_zero_lambda3_equals_supervised_only(split):
    a = tr.Finetuner(small(lambda3=0.0), split).run(6)
    b = tr.Finetuner(small(lambda3=0.0), split, use_unlabeled=False).run(6)
    student = [k for k in a.state.params if not k.startswith("teacher.")]
    assert all(np.array_equal(a.state.params[k], b.state.params[k]) for k in student)


def test_label_pools(split):
    ssda = tr.Finetuner(small(), split)
    assert len(ssda.labeled_images) == len(split.S) + len(split.T1)
    assert len(ssda.unlabeled_images) == len(split.T2)
    uda = tr.Finetuner(small(mode="UDA", labeled=0), split)
    assert len(uda.labeled_images) == len(split.S)
    assert len(uda.unlabeled_images) == len(split.target_train)
    base = tr.Finetuner(small(), split, source_only=True)
    assert base.unlabeled_images is None and "teacher.enc.conv1.w" not in base.state.params


def test_uda_runs_without_target_labels():
    split = generate(1, 4, 4, 16, labeled=0, n_test=2)
    assert not split.T1
    t = tr.Finetuner(small(mode="UDA", labeled=0), split).run(3)
    assert np.isfinite(t.log[-1]["total"])
    with pytest.raises(tr.ConfigError):
        tr.Finetuner(small(), split)


def test_withheld_labels_are_never_read(split, monkeypatch):
    calls = []
    original = type(split.T2[0]).mask

    def spy(self):
        if not self.labeled:
            calls.append(self.id)
        return original.fget(self)

    monkeypatch.setattr(type(split.T2[0]), "mask", property(spy))
    tr.run_pipeline(small(), split)
    tr.Finetuner(small(mode="UDA", labeled=0), split).run(2)
    assert calls == []
    with pytest.raises(LabelWithheldError):
        original.fget(split.T2[0])


def test_tiny_threshold_is_a_config_error(split):
    with pytest.raises(tr.ConfigError, match="threshold"):
        tr.Pretrainer(small(threshold=1e-9), split).step()


def test_tcl_row_runs(split):
    t = tr.Pretrainer(tr.ablation_config(small(), "a"), split).run(2)
    assert set(t.log[0]) == {"step", "epoch", "l_pre"}


def test_overfits_a_frozen_batch(split):
    cfg = small(lr=1e-2, augment=False, batch_size=2)
    t = tr.Finetuner(cfg, split, source_only=True)
    images, masks, _ = t.batch_for_step(0)
    t.batch_for_step = lambda k: (images, masks, None)
    t.epochs = 1000
    first = t.step()["total"]
    for _ in range(19):
        last = t.step()["total"]
    assert last < 0.5 * first


def test_divergence_saves_checkpoint(split, tmp_path):
    t = tr.Finetuner(small(), split, source_only=True)
    t.checkpoint_path = tmp_path / "d.ckpt"
    t.state.params["dec.out.b"] = np.array([np.nan, 0.0])
    with pytest.raises(tr.TrainingDiverged) as info:
        t.step()
    assert info.value.checkpoint_path == tmp_path / "d.ckpt" and (tmp_path / "d.ckpt").exists()


def test_warmup_and_rampup_schedules(split):
    t = tr.Finetuner(small(ema_warmup=True, reg_rampup=0.5), split)
    assert t.alpha_at(0) == 0.0 and t.alpha_at(9) == pytest.approx(0.9)
    assert t.alpha_at(10**6) == t.config.alpha
    assert t.lambda3_at(0) == pytest.approx(0.5 * np.exp(-5))
    assert t.lambda3_at(t.total_steps) == 0.5
    plain = tr.Finetuner(small(), split)
    assert plain.alpha_at(0) == plain.config.alpha and plain.lambda3_at(0) == 0.5


def test_teacher_init_modes(split):
    s = ModelState.create(small().net_config(), 0)
    copy = tr.Finetuner(small(teacher_init="copy"), split, s)
    assert np.array_equal(copy.state.params["teacher.enc.conv1.w"], copy.state.params["enc.conv1.w"])
    rand = tr.Finetuner(small(), split, s)
    assert not np.array_equal(rand.state.params["teacher.enc.conv1.w"], rand.state.params["enc.conv1.w"])
