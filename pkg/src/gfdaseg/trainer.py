"""Stage-1 contrastive pretraining and stage-2 mean-teacher fine-tuning.

Every random draw is keyed by ``(seed, stream, step)`` or ``(seed, stream,
epoch)``, so the only cursor a checkpoint needs is the step counter.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import objectives as obj
from .gfda import BASE_VIEWS, DEFAULT_SIGMA, make_view_set
from .netcore import autodiff as ad
from .netcore import checkpoint
from .netcore.model import (
    ModelState,
    NetConfig,
    as_tensors,
    decoder_forward,
    decoder_shapes,
    encoder_forward,
    head_forward,
    init_params,
    segment_logits,
)
from .netcore.optim import Adam, NonFiniteGradientError, ema_update
from .synthdata import DatasetSplit, Sample, apply_record, random_record

MODES = ("SSDA", "UDA")
FULL_EPOCHS = {"pretrain": 300, "finetune": 500}
HISTORY_COLUMNS = ("epoch", "l_scl", "l_ccl", "l_con", "l_pre", "l_sup", "l_reg", "total")

# RNG stream ids
_PAIR_ORDER, _VIEW_AUG, _LABELED_ORDER, _UNLABELED_DRAW, _FT_AUG = 11, 12, 21, 22, 23


class ConfigError(ValueError):
    """Invalid or inconsistent training configuration."""


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, checkpoint_path: Path | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    seed: int = 0
    image_size: int = 64
    batch_size: int = 4
    lr: float = 1e-4
    pretrain_epochs: int = 50
    finetune_epochs: int = 100
    sigma: float = DEFAULT_SIGMA
    tau: float = obj.TAU
    alpha: float = 0.999
    lambda1: float = obj.LAMBDA_SCL
    lambda2: float = obj.LAMBDA_CCL
    lambda3: float = obj.LAMBDA_REG
    threshold: float = obj.THRESHOLD
    mode: str = "SSDA"
    labeled: float = 0.5
    tcl: bool = False
    scl: bool = True
    ccl: bool = True
    dfpm: bool = True
    dfpm_literal: bool = False
    teacher_init: str = "random"
    pairs_per_step: int = 1
    augment: bool = True
    ema_warmup: bool = False
    reg_rampup: float = 0.0
    net: dict = field(default_factory=dict)

    def validate(self) -> "TrainConfig":
        positive = ("image_size", "batch_size", "lr", "sigma", "tau", "threshold", "pairs_per_step")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("pretrain_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 <= self.alpha < 1:
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if not 0 <= self.reg_rampup <= 1:
            raise ConfigError(f"reg_rampup must lie in [0, 1], got {self.reg_rampup}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "SSDA" and not self.labeled > 0:
            raise ConfigError("SSDA needs a positive labeled target fraction or count")
        if self.labeled < 0:
            raise ConfigError("labeled must be non-negative")
        if self.teacher_init not in ("random", "copy"):
            raise ConfigError(f"teacher_init must be 'random' or 'copy', got {self.teacher_init!r}")
        if self.tcl and (self.scl or self.ccl or self.dfpm):
            raise ConfigError("the TCL baseline cannot be combined with SCL, CCL or DFPM")
        if not (self.tcl or self.scl or self.ccl or self.dfpm):
            raise ConfigError("pretraining needs at least one loss switched on")
        try:
            net = self.net_config()
        except TypeError as exc:
            raise ConfigError(f"bad network settings: {exc}") from None
        if net.image_size % net.cell_size:
            raise ConfigError(f"image size {net.image_size} is not divisible by {net.cell_size}")
        return self

    def net_config(self) -> NetConfig:
        d = NetConfig().to_dict()
        d.update(self.net)
        d["image_size"] = self.image_size
        return NetConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


ABLATION_ROWS = {
    "a": dict(tcl=True, scl=False, ccl=False, dfpm=False),
    "b": dict(tcl=False, scl=True, ccl=False, dfpm=False),
    "c": dict(tcl=False, scl=False, ccl=True, dfpm=False),
    "d": dict(tcl=False, scl=True, ccl=True, dfpm=False),
    "e": dict(tcl=False, scl=True, ccl=True, dfpm=True),
}


def ablation_config(config: TrainConfig, row: str) -> TrainConfig:
    if row not in ABLATION_ROWS:
        raise ConfigError(f"unknown ablation row {row!r}")
    return replace(config, **ABLATION_ROWS[row])


# --------------------------------------------------------------------- shared plumbing

def _mean_by_epoch(log: list[dict]) -> list[dict]:
    rows: dict[int, list[dict]] = {}
    for entry in log:
        rows.setdefault(entry["epoch"], []).append(entry)
    out = []
    for epoch in sorted(rows):
        entries = rows[epoch]
        row = {"epoch": epoch}
        for col in HISTORY_COLUMNS[1:]:
            vals = [e[col] for e in entries if e.get(col) is not None]
            row[col] = float(np.mean(vals)) if vals else None
        out.append(row)
    return out


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow(["" if row.get(c) is None else repr(row[c]) if isinstance(row[c], float)
                         else row[c] for c in HISTORY_COLUMNS])
    return buf.getvalue()


class _Stage:
    stage = ""

    def __init__(self, config: TrainConfig, state: ModelState):
        self.config = config
        self.net = config.net_config()
        self.state = state
        self.opt = Adam(config.lr)
        self.step_count = 0
        self.log: list[dict] = []
        self.checkpoint_path: Path | None = None

    # subclasses provide steps_per_epoch, _trainable, _losses
    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.epochs

    def _apply(self, total: ad.Tensor, P: dict, names: Sequence[str]) -> None:
        if not np.isfinite(total.data):
            self._abort(f"non-finite {self.stage} loss at step {self.step_count}")
        grads = ad.backward(total)
        try:
            self.opt.step(self.state.params, {k: grads[k] for k in names})
        except NonFiniteGradientError as exc:
            self._abort(str(exc))

    def _abort(self, message: str):
        path = self.checkpoint_path
        if path is not None:
            self.save(path)
        raise TrainingDiverged(message, path)

    def run(self, steps: int | None = None) -> "_Stage":
        """Advance ``steps`` optimizer steps (default: to the end of the schedule)."""
        end = self.total_steps if steps is None else min(self.total_steps, self.step_count + steps)
        while self.step_count < end:
            self.step()
        return self

    def history(self) -> list[dict]:
        return _mean_by_epoch(self.log)

    # ------------------------------------------------------------- checkpoints

    def save(self, path) -> None:
        arrays = dict(self.state.params)
        arrays.update(self.opt.state_arrays())
        meta = {
            "stage": self.stage,
            "config": self.config.to_dict(),
            "net": self.net.to_dict(),
            "step": self.step_count,
            "adam_t": self.opt.t,
            "log": self.log,
        }
        meta.update(self._extra_meta())
        checkpoint.save(path, arrays, meta)

    def _extra_meta(self) -> dict:
        return {}

    def _restore(self, arrays: dict, meta: dict) -> None:
        if meta.get("stage") != self.stage:
            raise checkpoint.CheckpointError(
                f"checkpoint holds a {meta.get('stage')!r} run, expected {self.stage!r}")
        self.state = ModelState(self.net, {k: v for k, v in arrays.items()
                                           if not k.startswith("adam.")})
        self.opt.load_state_arrays(arrays, meta["adam_t"])
        self.step_count = meta["step"]
        self.log = list(meta["log"])


def load_state(path) -> tuple[ModelState, dict]:
    """Model parameters and metadata from any checkpoint (optimizer state dropped)."""
    arrays, meta = checkpoint.load(path)
    net = NetConfig.from_dict(meta["net"])
    return ModelState(net, {k: v for k, v in arrays.items() if not k.startswith("adam.")}), meta


# --------------------------------------------------------------------- stage 1

def pretrain_losses(P: dict, mom: dict, view_sets: Sequence, config: TrainConfig,
                    net: NetConfig) -> dict[str, ad.Tensor]:
    """Stage-1 loss terms for a list of 8-view sets.

    ``P`` maps parameter names to tensors (trainable or not); ``mom`` holds
    the momentum encoder arrays under ``mom.enc.*``.
    """
    views = [v for vs in view_sets for v in vs.views]
    images = np.stack([v.image for v in views])
    feat, pooled = encoder_forward(P, images, net, "enc")
    out: dict[str, ad.Tensor] = {}
    if config.scl:
        out["l_scl"] = obj.scl_loss(head_forward(P, pooled, "style"), [v.style for v in views],
                                    config.tau)
    if config.ccl:
        out["l_ccl"] = obj.ccl_loss(head_forward(P, pooled, "content"),
                                    [v.instance for v in views], config.tau)
    if config.dfpm:
        pos = {(k, v.name): i for k, vs in enumerate(view_sets)
               for i, v in enumerate(vs.views, start=k * len(vs))}
        idx1 = [pos[(k, n)] for k in range(len(view_sets)) for n in BASE_VIEWS]
        idx2 = [pos[(k, f"aug_{n}")] for k in range(len(view_sets)) for n in BASE_VIEWS]
        mom_feat, _ = encoder_forward(as_tensors(mom, False), images, net, "mom.enc")
        K = P["dfpm.k"]
        ft1 = obj.dfpm_propagate(mom_feat.data[idx1], K, config.dfpm_literal)
        ft2 = obj.dfpm_propagate(mom_feat.data[idx2], K, config.dfpm_literal)
        fm1 = obj.feature_map(feat[idx1], [views[i].record for i in idx1], net.image_size)
        fm2 = obj.feature_map(feat[idx2], [views[i].record for i in idx2], net.image_size)
        pairs = obj.build_pairs(fm1, fm2, net.cell_size, config.threshold)
        out["l_con"] = obj.consistency_loss((ft1, ft2), (fm1.features, fm2.features), pairs)
    zero = ad.Tensor(np.array(0.0))
    out["l_pre"] = obj.pretrain_loss(out.get("l_scl", zero), out.get("l_ccl", zero),
                                     out.get("l_con", zero), config.lambda1, config.lambda2)
    return out


def tcl_views(x_s: np.ndarray, x_t: np.ndarray, rng: np.random.Generator, id_s: str, id_t: str
              ) -> tuple[list[np.ndarray], list[str]]:
    """Each image with one augmentation of itself (no style transfer)."""
    images, ids = [], []
    for x, name in ((x_s, id_s), (x_t, id_t)):
        rec = random_record(rng, x.shape[0])
        images += [x, apply_record(x, rec)]
        ids += [name, name]
    return images, ids


class Pretrainer(_Stage):
    """Self-supervised stage on unlabeled source and target images."""

    stage = "pretrain"

    def __init__(self, config: TrainConfig, split: DatasetSplit, state: ModelState | None = None):
        config.validate()
        source = [s.image for s in split.S]
        target = [s.image for s in split.target_train]
        if not source or not target:
            raise ConfigError("pretraining needs images from both domains")
        super().__init__(config, state.copy() if state is not None
                         else ModelState.create(config.net_config(), config.seed))
        self.source, self.target = source, target
        self.epochs = config.pretrain_epochs

    @property
    def n_pairs(self) -> int:
        return max(len(self.source), len(self.target))

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.n_pairs / self.config.pairs_per_step)

    def trainable(self) -> list[str]:
        c = self.config
        groups = ["enc"]
        if c.scl:
            groups.append("style")
        if c.ccl or c.tcl:
            groups.append("content")
        if c.dfpm:
            groups.append("dfpm")
        return sorted(k for k in self.state.params if k.split(".")[0] in groups)

    def pairs_for_step(self, k: int) -> list[tuple[int, int]]:
        epoch, pos = divmod(k, self.steps_per_epoch)
        rng = np.random.default_rng([self.config.seed, _PAIR_ORDER, epoch])
        ps = rng.permutation(len(self.source))
        pt = rng.permutation(len(self.target))
        pairs = [(int(ps[i % len(ps)]), int(pt[i % len(pt)])) for i in range(self.n_pairs)]
        per = self.config.pairs_per_step
        return pairs[pos * per:(pos + 1) * per]

    def losses_for_step(self, k: int, P: dict) -> dict[str, ad.Tensor]:
        c = self.config
        rng = np.random.default_rng([c.seed, _VIEW_AUG, k])
        pairs = self.pairs_for_step(k)
        if c.tcl:
            images, ids = [], []
            for i, j in pairs:
                im, idx = tcl_views(self.source[i], self.target[j], rng, f"s{i}", f"t{j}")
                images += im
                ids += idx
            _, pooled = encoder_forward(P, np.stack(images), self.net, "enc")
            loss = obj.tcl_loss(head_forward(P, pooled, "content"), ids, c.tau)
            return {"l_pre": loss}
        view_sets = [make_view_set(self.source[i], self.target[j], c.sigma, rng, f"s{i}", f"t{j}")
                     for i, j in pairs]
        try:
            return pretrain_losses(P, self.state.group("mom.enc"), view_sets, c, self.net)
        except obj.EmptyPairSetError as exc:
            raise ConfigError(
                f"{exc}; threshold {c.threshold} is too small for the augmentation range") from None

    def step(self) -> dict:
        k = self.step_count
        names = self.trainable()
        P = as_tensors(self.state.params, trainable=False)
        P.update({n: ad.param(self.state.params[n], n) for n in names})
        losses = self.losses_for_step(k, P)
        self._apply(losses["l_pre"], P, names)
        enc = self.state.group("enc")
        for name, value in enc.items():
            mname = "mom." + name
            self.state.params[mname] = ema_update(self.state.params[mname], value, self.config.alpha)
        entry = {"step": k, "epoch": k // self.steps_per_epoch}
        entry.update({n: float(t.data) for n, t in losses.items()})
        self.log.append(entry)
        self.step_count += 1
        return entry

    @classmethod
    def from_checkpoint(cls, path, split: DatasetSplit) -> "Pretrainer":
        arrays, meta = checkpoint.load(path)
        trainer = cls(TrainConfig.from_dict(meta["config"]), split)
        trainer._restore(arrays, meta)
        return trainer


def pretrain(config: TrainConfig, split: DatasetSplit) -> ModelState:
    return Pretrainer(config, split).run().state


# --------------------------------------------------------------------- stage 2

def finetune_losses(P: dict, teacher_logits: np.ndarray | None, labeled: tuple,
                    unlabeled: np.ndarray | None, net: NetConfig, lambda3: float
                    ) -> dict[str, ad.Tensor]:
    """Supervised and teacher-consistency terms for one step.

    Labeled and unlabeled images go through separate forward passes so the
    supervised path does not depend on the unlabeled batch.
    """
    images, masks = labeled
    feat, _ = encoder_forward(P, images, net, "enc")
    out = {"l_sup": obj.supervised_loss(decoder_forward(P, feat, net, "dec"), masks)}
    if unlabeled is not None:
        feat_u, _ = encoder_forward(P, unlabeled, net, "enc")
        student = decoder_forward(P, feat_u, net, "dec")
        out["l_reg"] = obj.reg_loss(student, teacher_logits)
        out["total"] = obj.finetune_loss(out["l_sup"], out["l_reg"], lambda3)
    else:
        out["total"] = out["l_sup"]
    return out


class Finetuner(_Stage):
    """Student/teacher segmentation training.

    SSDA: supervised on S and T1, teacher consistency on T2.  UDA:
    supervised on S only, consistency on all target images.  With
    ``source_only`` the student sees S alone and no teacher is built;
    ``use_unlabeled=False`` drops the consistency branch but keeps the
    mode's labeled pool.
    """

    stage = "finetune"

    def __init__(self, config: TrainConfig, split: DatasetSplit,
                 pretrained: ModelState | None = None, source_only: bool = False,
                 use_unlabeled: bool = True):
        config.validate()
        net = config.net_config()
        if source_only:
            labeled, unlabeled = list(split.S), []
        elif config.mode == "SSDA":
            if not split.T1:
                raise ConfigError("SSDA fine-tuning needs labeled target samples (T1 is empty)")
            labeled, unlabeled = list(split.S) + list(split.T1), list(split.T2)
        else:
            labeled = list(split.S)
            unlabeled = [s.withheld() for s in split.target_train]
        if not use_unlabeled:
            unlabeled = []
        if not labeled:
            raise ConfigError("fine-tuning needs labeled samples")
        if pretrained is not None:
            state = pretrained.copy()
            state.params.update(init_params(decoder_shapes(net, "dec"), config.seed))
        else:
            state = ModelState.create(net, config.seed)
        if unlabeled:
            state.init_teacher(config.seed, copy=config.teacher_init == "copy")
        super().__init__(config, state)
        self.labeled_images = np.stack([s.image for s in labeled])
        self.labeled_masks = np.stack([s.mask for s in labeled])
        self.unlabeled_images = np.stack([s.image for s in unlabeled]) if unlabeled else None
        self.source_only = source_only
        self.epochs = config.finetune_epochs

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.labeled_images) / self.config.batch_size)

    def trainable(self) -> list[str]:
        return sorted(k for k in self.state.params if k.split(".")[0] in ("enc", "dec"))

    def batch_for_step(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        c = self.config
        epoch, pos = divmod(k, self.steps_per_epoch)
        order = np.random.default_rng([c.seed, _LABELED_ORDER, epoch]).permutation(
            len(self.labeled_images))
        idx = order[pos * c.batch_size:(pos + 1) * c.batch_size]
        images, masks = self.labeled_images[idx], self.labeled_masks[idx]
        unlabeled = None
        if self.unlabeled_images is not None:
            n_u = len(self.unlabeled_images)
            pick = np.random.default_rng([c.seed, _UNLABELED_DRAW, k]).choice(
                n_u, size=min(c.batch_size, n_u), replace=False)
            unlabeled = self.unlabeled_images[pick]
        if c.augment:
            rng = np.random.default_rng([c.seed, _FT_AUG, k])
            size = images.shape[1]
            recs = [random_record(rng, size) for _ in range(len(images))]
            images = np.stack([apply_record(x, r) for x, r in zip(images, recs)])
            masks = np.stack([apply_record(m, r) for m, r in zip(masks, recs)])
            if unlabeled is not None:
                rng_u = np.random.default_rng([c.seed, _FT_AUG + 100, k])
                unlabeled = np.stack([apply_record(x, random_record(rng_u, size))
                                      for x in unlabeled])
        return images, masks, unlabeled

    def alpha_at(self, k: int) -> float:
        """Teacher EMA rate for step ``k``; with warm-up, min(alpha, 1 - 1/(k+1))."""
        a = self.config.alpha
        return min(a, 1.0 - 1.0 / (k + 1)) if self.config.ema_warmup else a

    def lambda3_at(self, k: int) -> float:
        """Consistency weight, optionally ramped up as exp(-5 (1 - t)^2) over a fraction of training."""
        c = self.config
        if c.reg_rampup <= 0:
            return c.lambda3
        t = min(1.0, k / (c.reg_rampup * self.total_steps))
        return c.lambda3 * float(np.exp(-5.0 * (1.0 - t) ** 2))

    def step(self) -> dict:
        k = self.step_count
        c = self.config
        images, masks, unlabeled = self.batch_for_step(k)
        names = self.trainable()
        P = {n: ad.param(self.state.params[n], n) for n in names}
        teacher = None
        if unlabeled is not None:
            teacher = segment_logits(self.state.params, unlabeled, self.net, "teacher.")
        losses = finetune_losses(P, teacher, (images, masks), unlabeled, self.net,
                                 self.lambda3_at(k))
        self._apply(losses["total"], P, names)
        if unlabeled is not None:
            for name in list(self.state.params):
                if name.startswith("teacher."):
                    self.state.params[name] = ema_update(
                        self.state.params[name], self.state.params[name[len("teacher."):]],
                        self.alpha_at(k))
        entry = {"step": k, "epoch": k // self.steps_per_epoch}
        entry.update({n: float(t.data) for n, t in losses.items()})
        self.log.append(entry)
        self.step_count += 1
        return entry

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Student logits; the teacher is never used for inference."""
        return segment_logits(self.state.params, images, self.net)

    def _extra_meta(self) -> dict:
        return {"finetune": {"source_only": self.source_only,
                             "use_unlabeled": self.unlabeled_images is not None}}

    @classmethod
    def from_checkpoint(cls, path, split: DatasetSplit) -> "Finetuner":
        arrays, meta = checkpoint.load(path)
        config = TrainConfig.from_dict(meta["config"])
        extra = meta.get("finetune", {})
        trainer = cls(config, split, source_only=extra.get("source_only", False),
                      use_unlabeled=extra.get("use_unlabeled", True))
        trainer._restore(arrays, meta)
        return trainer


def finetune(config: TrainConfig, pretrained: ModelState | None, split: DatasetSplit) -> ModelState:
    return Finetuner(config, split, pretrained).run().state


# --------------------------------------------------------------------- reports

@dataclass
class RunReport:
    config: dict
    seed: int
    history: dict            # stage name -> per-epoch rows
    metrics: dict            # domain -> MetricReport dict
    wall_clock: float | None = None

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)


@dataclass
class PipelineResult:
    student: ModelState
    report: RunReport
    pretrainer: Pretrainer | None
    finetuner: Finetuner


def run_pipeline(config: TrainConfig, split: DatasetSplit, pretrained: ModelState | None = None,
                 skip_pretrain: bool = False, source_only: bool = False) -> PipelineResult:
    """Pretrain (unless skipped or supplied), fine-tune, then score both test sets."""
    from .evaluation import evaluate

    start = time.perf_counter()
    history = {}
    pre = None
    if pretrained is None and not skip_pretrain:
        pre = Pretrainer(config, split).run()
        pretrained = pre.state
        history["pretrain"] = pre.history()
    ft = Finetuner(config, split, pretrained, source_only=source_only).run()
    history["finetune"] = ft.history()
    metrics = {}
    if split.test_T:
        metrics["target"] = evaluate(ft.predict, split.test_T).to_dict()
    if split.test_S:
        metrics["source"] = evaluate(ft.predict, split.test_S).to_dict()
    report = RunReport(config.to_dict(), config.seed, history, metrics,
                       time.perf_counter() - start)
    return PipelineResult(ft.state, report, pre, ft)
