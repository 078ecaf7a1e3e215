"""Segmentation metrics and model scoring."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree


class EmptyMaskError(ValueError):
    """Hausdorff distance is undefined when either mask has no foreground."""


def _binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p.astype(bool), g.astype(bool)


def dsc(pred, gt) -> float:
    """Dice score 2|P & G| / (|P| + |G|); two empty masks score 1."""
    p, g = _binary_pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background or off the image."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(b).query(a)
    return d


def hausdorff(pred, gt, percentile: float = 100.0) -> float:
    """Symmetric Hausdorff distance (pixels) between mask boundaries.

    ``percentile < 100`` gives the robust variant (e.g. 95 for HD95).
    """
    p, g = _binary_pair(pred, gt)
    if not p.any() or not g.any():
        raise EmptyMaskError("Hausdorff distance needs two non-empty masks")
    bp = np.argwhere(boundary(p)).astype(np.float64)
    bg = np.argwhere(boundary(g)).astype(np.float64)
    d_pg, d_gp = _directed(bp, bg), _directed(bg, bp)
    if percentile >= 100:
        return float(max(d_pg.max(), d_gp.max()))
    return float(max(np.percentile(d_pg, percentile), np.percentile(d_gp, percentile)))


@dataclass
class MetricReport:
    dsc: list
    hd: list                       # None where undefined (empty prediction)
    hd_missing: int = 0
    dsc_mean: float = 0.0
    dsc_std: float = 0.0
    hd_mean: float | None = None
    hd_std: float | None = None
    n: int = 0
    ids: list = field(default_factory=list)

    @classmethod
    def from_scores(cls, dsc_values: Sequence[float], hd_values: Sequence[float | None],
                    ids: Sequence[str] = ()) -> "MetricReport":
        if len(dsc_values) == 0:
            raise ValueError("cannot build a report from zero samples")
        d = np.asarray(dsc_values, dtype=np.float64)
        h = np.asarray([v for v in hd_values if v is not None], dtype=np.float64)
        return cls(
            dsc=[float(v) for v in d],
            hd=[None if v is None else float(v) for v in hd_values],
            hd_missing=sum(v is None for v in hd_values),
            dsc_mean=float(d.mean()),
            dsc_std=float(d.std()),
            hd_mean=float(h.mean()) if h.size else None,
            hd_std=float(h.std()) if h.size else None,
            n=len(d),
            ids=list(ids),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(predict: Callable[[np.ndarray], np.ndarray], samples: Sequence,
             batch_size: int = 8, percentile: float = 100.0) -> MetricReport:
    """Score ``predict`` (images -> (N, H, W, K) logits) on ``samples``.

    Empty predictions get no Hausdorff value; they are counted in ``hd_missing``.
    """
    dsc_values, hd_values, ids = [], [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        logits = predict(np.stack([s.image for s in chunk]))
        for s, lg in zip(chunk, logits):
            pred = np.argmax(lg, axis=-1)
            gt = s.eval_mask
            dsc_values.append(dsc(pred, gt))
            try:
                hd_values.append(hausdorff(pred, gt, percentile))
            except EmptyMaskError:
                hd_values.append(None)
            ids.append(s.id)
    return MetricReport.from_scores(dsc_values, hd_values, ids)


def threshold_segmenter(samples: Sequence, candidates: Sequence[float] | None = None
                        ) -> tuple[float, Callable[[np.ndarray], np.ndarray]]:
    """Pick the intensity threshold maximizing mean Dice on ``samples``.

    Returns the threshold and a predictor emitting two-class pseudo-logits.
    """
    cand = np.linspace(0.0, 1.0, 101) if candidates is None else np.asarray(candidates)

    def scores(t):
        return np.mean([dsc(s.image[..., 0] > t, s.eval_mask) for s in samples])

    best = float(max(cand, key=scores))

    def predict(images):
        fg = (images[..., 0] > best).astype(np.float64)
        return np.stack([1.0 - fg, fg], axis=-1)

    return best, predict


# --------------------------------------------------------------------- ablation harness

ABLATION_COLUMNS = ("experiment", "dsc_mean", "dsc_std", "hd_mean", "hd_std", "seeds")
BASELINE = "noDA"


@dataclass
class AblationRow:
    experiment: str
    dsc_mean: float
    dsc_std: float
    hd_mean: float | None
    hd_std: float | None
    seeds: list
    configs: list = field(default_factory=list)     # resolved config per seed
    reports: list = field(default_factory=list)     # target-test MetricReport dict per seed


def _summarize(name: str, seeds: Sequence[int], configs: list, reports: list[dict]) -> AblationRow:
    d = np.array([r["dsc_mean"] for r in reports])
    h = np.array([r["hd_mean"] for r in reports if r["hd_mean"] is not None])
    return AblationRow(name, float(d.mean()), float(d.std()),
                       float(h.mean()) if h.size else None, float(h.std()) if h.size else None,
                       list(seeds), configs, reports)


def ablation(config, rows: Sequence[str] = ("a", "b", "c", "d", "e"), seeds: Sequence[int] = (0, 1, 2),
             data: Callable | None = None, baseline: bool = False) -> list[AblationRow]:
    """Train every ablation row (plus optionally the source-only baseline) on common seeds.

    ``data(seed)`` returns the :class:`DatasetSplit` for a seed; by default the
    desk-scale synthetic benchmark.  Rows differ only in stage-1 switches.
    """
    from .synthdata import generate
    from .trainer import ablation_config, run_pipeline

    if data is None:
        def data(seed):
            return generate(seed, 40, 40, config.image_size, labeled=config.labeled, n_test=40)

    names = ([BASELINE] if baseline else []) + list(rows)
    configs: dict[str, list] = {n: [] for n in names}
    reports: dict[str, list] = {n: [] for n in names}
    for seed in seeds:
        split = data(seed)
        base = replace(config, seed=seed)
        for name in names:
            if name == BASELINE:
                cfg = base
                result = run_pipeline(cfg, split, skip_pretrain=True, source_only=True)
            else:
                cfg = ablation_config(base, name)
                result = run_pipeline(cfg, split)
            configs[name].append(cfg.to_dict())
            reports[name].append(result.report.metrics["target"])
    return [_summarize(n, seeds, configs[n], reports[n]) for n in names]


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS)
    for r in rows:
        writer.writerow([r.experiment, repr(r.dsc_mean), repr(r.dsc_std),
                         "" if r.hd_mean is None else repr(r.hd_mean),
                         "" if r.hd_std is None else repr(r.hd_std),
                         ";".join(str(s) for s in r.seeds)])
    return buf.getvalue()
