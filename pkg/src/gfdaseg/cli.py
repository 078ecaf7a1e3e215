"""``gfdaseg`` command-line interface.

Exit codes: 0 success, 2 invalid configuration or missing input, 1 any
other runtime failure.  ``GFDASEG_OUTPUT_DIR`` replaces the default output
directory when ``--out-dir`` is not given.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import gfda, synthdata
from .tensorfft import DimensionError, SpectralDomainError
from .trainer import FULL_EPOCHS, ConfigError, TrainConfig

log = logging.getLogger("gfdaseg")

DEFAULT_OUT = "gfdaseg-out"
ENV_OUT = "GFDASEG_OUTPUT_DIR"


class UsageError(Exception):
    """Bad invocation: reported with exit code 2."""


def out_dir(args) -> Path:
    path = Path(args.out_dir or os.environ.get(ENV_OUT) or DEFAULT_OUT)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {p}")
    return p


# --------------------------------------------------------------------- config

_CONFIG_FLAGS = {
    "seed": int, "image_size": int, "batch_size": int, "lr": float,
    "pretrain_epochs": int, "finetune_epochs": int, "sigma": float, "tau": float,
    "alpha": float, "lambda1": float, "lambda2": float, "lambda3": float,
    "threshold": float, "mode": str, "labeled": float, "teacher_init": str,
    "pairs_per_step": int, "reg_rampup": float,
}
_SWITCHES = ("tcl", "scl", "ccl", "dfpm", "dfpm_literal", "augment", "ema_warmup")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields (flags take precedence)")
    for name, kind in _CONFIG_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)
    for name in _SWITCHES:
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None,
                       action=argparse.BooleanOptionalAction)
    p.add_argument("--full-epochs", action="store_true",
                   help="use the full-scale 300/500 epoch schedule")


def resolve_config(args) -> TrainConfig:
    data: dict = {}
    if getattr(args, "config", None):
        path = _require(args.config)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    for name in list(_CONFIG_FLAGS) + list(_SWITCHES):
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if getattr(args, "full_epochs", False):
        data["pretrain_epochs"] = FULL_EPOCHS["pretrain"]
        data["finetune_epochs"] = FULL_EPOCHS["finetune"]
    try:
        config = TrainConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return config.validate()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------- commands

def cmd_gfda(args) -> int:
    src = synthdata.read_image(_require(args.src))
    tgt = synthdata.read_image(_require(args.tgt))
    if src.shape != tgt.shape:
        raise DimensionError(f"image shapes differ: {src.shape} vs {tgt.shape}")
    mask = gfda.rect_mask(*src.shape[:2], beta=args.beta) if args.rect_baseline else None
    out = gfda.spectral_transfer(src, tgt, args.sigma, mask=mask)
    dest = Path(args.out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    synthdata.write_image(dest, out)
    print(dest)
    return 0


def cmd_gen(args) -> int:
    labeled = args.labeled
    if labeled is not None and labeled >= 1:
        labeled = int(labeled)
    try:
        split = synthdata.generate(args.seed, args.n_source, args.n_target, args.size,
                                   labeled=labeled or 0, n_test=args.n_test, workers=args.workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = synthdata.write_dataset(split, out_dir(args))
    print(manifest)
    return 0


def _dataset(args) -> synthdata.DatasetSplit:
    return synthdata.read_dataset(_require(args.manifest))


def cmd_pretrain(args) -> int:
    from .trainer import Pretrainer, history_csv

    config = resolve_config(args)
    split = _dataset(args)
    dest = out_dir(args)
    trainer = (Pretrainer.from_checkpoint(_require(args.resume), split) if args.resume
               else Pretrainer(config, split))
    trainer.checkpoint_path = dest / "pretrain.ckpt"
    trainer.run()
    trainer.save(dest / "pretrain.ckpt")
    (dest / "pretrain_history.csv").write_text(history_csv(trainer.history()))
    _write_json(dest / "pretrain_config.json", trainer.config.to_dict())
    print(dest / "pretrain.ckpt")
    return 0


def cmd_finetune(args) -> int:
    from .evaluation import evaluate
    from .trainer import Finetuner, RunReport, history_csv, load_state

    split = _dataset(args)
    dest = out_dir(args)
    start = time.perf_counter()
    if args.resume:
        trainer = Finetuner.from_checkpoint(_require(args.resume), split)
    else:
        config = resolve_config(args)
        pretrained = None
        if args.checkpoint:
            pretrained, meta = load_state(_require(args.checkpoint))
            if meta.get("stage") != "pretrain":
                raise ConfigError(f"{args.checkpoint} is not a pretraining checkpoint")
        elif not args.source_only:
            raise ConfigError("--checkpoint is required unless --source-only is given")
        trainer = Finetuner(config, split, pretrained, source_only=args.source_only)
    trainer.checkpoint_path = dest / "finetune.ckpt"
    trainer.run()
    trainer.save(dest / "finetune.ckpt")
    history = trainer.history()
    (dest / "finetune_history.csv").write_text(history_csv(history))
    metrics = {}
    if split.test_T:
        metrics["target"] = evaluate(trainer.predict, split.test_T).to_dict()
    if split.test_S:
        metrics["source"] = evaluate(trainer.predict, split.test_S).to_dict()
    report = RunReport(trainer.config.to_dict(), trainer.config.seed, {"finetune": history},
                       metrics, time.perf_counter() - start)
    (dest / "report.json").write_text(report.to_json(include_timing=args.timing) + "\n")
    print(dest / "finetune.ckpt")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .netcore.model import segment_logits
    from .trainer import load_state

    state, meta = load_state(_require(args.checkpoint))
    if meta.get("stage") != "finetune":
        raise ConfigError(f"{args.checkpoint} is not a fine-tuning checkpoint")
    split = _dataset(args)
    samples = getattr(split, args.split)
    if not samples:
        raise ConfigError(f"dataset has no {args.split} samples")

    def predict(images):
        return segment_logits(state.params, images, state.config)

    report = evaluate(predict, samples, percentile=args.percentile)
    payload = {"checkpoint": str(args.checkpoint), "split": args.split,
               "config": meta.get("config"), "metrics": report.to_dict()}
    dest = Path(args.out) if args.out else out_dir(args) / "eval.json"
    dest.parent.mkdir(parents=True, exist_ok=True)
    _write_json(dest, payload)
    print(f"DSC {report.dsc_mean:.4f} +- {report.dsc_std:.4f}  HD "
          f"{report.hd_mean if report.hd_mean is not None else float('nan'):.3f} "
          f"(missing {report.hd_missing}/{report.n})")
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import ablation, ablation_csv

    config = resolve_config(args)
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    table = ablation(config, rows, seeds, baseline=args.baseline)
    dest = out_dir(args)
    (dest / "ablation.csv").write_text(ablation_csv(table))
    _write_json(dest / "ablation_configs.json",
                {r.experiment: {"configs": r.configs, "reports": r.reports} for r in table})
    sys.stdout.write(ablation_csv(table))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    results = run_gradcheck(args.seed if args.seed is not None else 0, args.h, args.tol)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.loss:6s} max_rel_err={r.max_rel_error:.3e} params={r.n_params} "
              f"relu_margin={r.relu_margin:.3e} kink_crossings={r.kink_crossings}")
    return 0 if all(r.passed for r in results) else 1


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfdaseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out-dir", default=None)
        return p

    p = add("gfda", cmd_gfda, "style-transfer one image onto another")
    p.add_argument("src")
    p.add_argument("tgt")
    p.add_argument("--sigma", type=float, default=gfda.DEFAULT_SIGMA)
    p.add_argument("--out", required=True)
    p.add_argument("--rect-baseline", action="store_true",
                   help="use the hard rectangular low-frequency window instead")
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")

    p = add("gen", cmd_gen, "generate the synthetic benchmark")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-source", type=int, default=40)
    p.add_argument("--n-target", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--labeled", type=float, default=0.5,
                   help="target labels: fraction in (0,1), count >= 1, or 0 for none")
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--workers", type=int, default=1,
                   help="threads for rendering (output is identical to serial)")

    p = add("pretrain", cmd_pretrain, "stage-1 contrastive pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", help="continue from a pretraining checkpoint")
    _add_config_flags(p)

    p = add("finetune", cmd_finetune, "stage-2 student/teacher fine-tuning")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", help="pretraining checkpoint supplying the encoder")
    p.add_argument("--source-only", action="store_true", help="no-adaptation baseline on S")
    p.add_argument("--resume", help="continue from a fine-tuning checkpoint")
    p.add_argument("--timing", action="store_true", help="include wall-clock in report.json")
    _add_config_flags(p)

    p = add("eval", cmd_eval, "score a fine-tuned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test_T", choices=("test_T", "test_S"))
    p.add_argument("--percentile", type=float, default=100.0)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")

    p = add("ablate", cmd_ablate, "run the ablation rows over several seeds")
    p.add_argument("--rows", default="a,b,c,d,e")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--baseline", action="store_true", help="add the source-only row")
    _add_config_flags(p)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DimensionError, SpectralDomainError, synthdata.ImageFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level diagnostics
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
