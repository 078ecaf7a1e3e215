"""Contrastive, dense-consistency and segmentation losses.

All losses take and return :class:`~gfdaseg.netcore.autodiff.Tensor` values so
they can be differentiated; plain arrays are accepted as constants.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .netcore import autodiff as ad
from .netcore.autodiff import Tensor
from .synthdata import AugmentRecord

log = logging.getLogger(__name__)

TAU = 0.07
LAMBDA_SCL = 0.75
LAMBDA_CCL = 0.75
LAMBDA_REG = 0.5
THRESHOLD = 0.6


class EmptyPairSetError(ValueError):
    """No cell pair fell under the distance threshold (augmentations do not overlap)."""


class ContrastError(ValueError):
    pass


# --------------------------------------------------------------------- InfoNCE family

def _normalized(z: Tensor) -> Tensor:
    try:
        return ad.l2_normalize(z, axis=-1, eps=None)
    except ZeroDivisionError:
        raise ContrastError("zero-norm embedding in contrastive batch") from None


def info_nce(anchor, positives: Sequence, negatives: Sequence, tau: float = TAU) -> Tensor:
    """Mean over positives of the SimCLR-style term for a single anchor."""
    if len(positives) == 0 or len(negatives) == 0:
        raise ContrastError("info_nce needs at least one positive and one negative")
    a = _normalized(ad.as_tensor(anchor).reshape(1, -1))
    pos = _normalized(ad.concat([ad.as_tensor(p).reshape(1, -1) for p in positives]))
    neg = _normalized(ad.concat([ad.as_tensor(n).reshape(1, -1) for n in negatives]))
    s_pos = (pos @ a.reshape(-1, 1)).reshape(-1) * (1.0 / tau)
    s_neg = (neg @ a.reshape(-1, 1)).reshape(-1) * (1.0 / tau)
    neg_lse = ad.logsumexp(s_neg, axis=0)
    return ad.mean(ad.logaddexp(s_pos, neg_lse) - s_pos)


def grouped_info_nce(z, pos_mask: np.ndarray, neg_mask: np.ndarray, tau: float = TAU
                     ) -> tuple[Tensor, int]:
    """Sum over anchors of :func:`info_nce` with positives/negatives given by masks.

    ``pos_mask[i, j]`` marks j as a positive of anchor i (the diagonal must be
    False).  Anchors without positives are skipped and counted.
    """
    z = _normalized(ad.as_tensor(z))
    pos_mask = np.asarray(pos_mask, dtype=bool)
    neg_mask = np.asarray(neg_mask, dtype=bool)
    n_pos = pos_mask.sum(axis=1)
    active = n_pos > 0
    if np.any(active & ~neg_mask.any(axis=1)):
        raise ContrastError("an anchor with positives has no negatives")
    if not active.any():
        raise ContrastError("no anchor in the batch has a positive")
    sim = (z @ ad.transpose(z)) * (1.0 / tau)
    neg_lse = ad.logsumexp(sim, axis=1, keepdims=True, where=neg_mask & active[:, None])
    terms = ad.logaddexp(sim, neg_lse) - sim
    weights = np.where(pos_mask, 1.0 / np.maximum(n_pos, 1)[:, None], 0.0)
    # mask before multiplying so rows without negatives (-inf) never enter the sum
    rows = np.flatnonzero(active)
    loss = ad.tsum(terms[rows] * weights[rows])
    return loss, int((~active).sum())


def _check_batch(embeddings, tau):
    if tau <= 0:
        raise ContrastError(f"temperature must be positive, got {tau}")
    return ad.as_tensor(embeddings)


def scl_loss(embeddings, styles: Sequence[str], tau: float = TAU) -> Tensor:
    """Style contrast: positives share the style tag, negatives carry the other one."""
    z = _check_batch(embeddings, tau)
    tags = np.asarray(styles)
    if len(set(tags.tolist())) < 2:
        raise ContrastError("style contrast needs both style tags in the batch")
    same = tags[:, None] == tags[None, :]
    pos = same & ~np.eye(len(tags), dtype=bool)
    loss, _ = grouped_info_nce(z, pos, ~same, tau)
    return loss


def ccl_loss(embeddings, instances: Sequence[str], tau: float = TAU) -> Tensor:
    """Content contrast: positives share the instance id, negatives do not."""
    z = _check_batch(embeddings, tau)
    ids = np.asarray(instances)
    if len(set(ids.tolist())) < 2:
        raise ContrastError("content contrast needs at least two instances")
    same = ids[:, None] == ids[None, :]
    pos = same & ~np.eye(len(ids), dtype=bool)
    loss, skipped = grouped_info_nce(z, pos, ~same, tau)
    if skipped:
        log.warning("ccl_loss: %d singleton anchors skipped", skipped)
    return loss


def tcl_loss(embeddings, instances: Sequence[str], tau: float = TAU) -> Tensor:
    """Plain instance discrimination; callers pass each image with its augmentation."""
    return ccl_loss(embeddings, instances, tau)


# --------------------------------------------------------------------- dense consistency

@dataclass
class FeatureMap:
    """Per-cell features plus where each cell centre lands in the original image."""

    features: Tensor            # (N, g, g, D)
    src_coords: np.ndarray      # (N, g, g, 2) original-image (row, col)
    valid: np.ndarray           # (N, g, g) centre maps inside the original image

    @property
    def grid(self) -> tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]

    @property
    def dim(self) -> int:
        return self.features.shape[3]


def cell_coords(records: Sequence[AugmentRecord], image_size: int, grid: int
                ) -> tuple[np.ndarray, np.ndarray]:
    """Original-image coordinates of every feature cell centre, per record."""
    cell = image_size / grid
    centres = (np.arange(grid) + 0.5) * cell - 0.5
    rr, cc = np.meshgrid(centres, centres, indexing="ij")
    pts = np.stack([rr, cc], axis=-1)
    coords = np.stack([rec.inverse_coords(pts, image_size) for rec in records])
    valid = np.all((coords >= -0.5) & (coords <= image_size - 0.5), axis=-1)
    return coords, valid


def feature_map(features, records: Sequence[AugmentRecord], image_size: int) -> FeatureMap:
    features = ad.as_tensor(features)
    coords, valid = cell_coords(records, image_size, features.shape[1])
    return FeatureMap(features, coords, valid)


@dataclass(frozen=True)
class PairSet:
    batch: np.ndarray
    m: np.ndarray        # flat cell index in view 1
    n: np.ndarray        # flat cell index in view 2
    distance: np.ndarray

    def __len__(self) -> int:
        return len(self.batch)


def build_pairs(view1: FeatureMap, view2: FeatureMap, cell_size: float,
                threshold: float = THRESHOLD) -> PairSet:
    """Cell pairs whose original-image distance, in cell diagonals, is below ``threshold``."""
    n_b = view1.src_coords.shape[0]
    c1 = view1.src_coords.reshape(n_b, -1, 2)
    c2 = view2.src_coords.reshape(n_b, -1, 2)
    v1 = view1.valid.reshape(n_b, -1)
    v2 = view2.valid.reshape(n_b, -1)
    d = np.linalg.norm(c1[:, :, None, :] - c2[:, None, :, :], axis=-1) / (cell_size * np.sqrt(2.0))
    keep = (d < threshold) & v1[:, :, None] & v2[:, None, :]
    b, m, n = np.nonzero(keep)
    return PairSet(b, m, n, d[b, m, n])


def dfpm_propagate(f, K, literal: bool = False) -> Tensor:
    """Similarity-weighted propagation: mean over cells n of cos(f_m, f_n) * K(f_n).

    ``K(v)`` is ``v @ K``.  ``literal=True`` applies K to the anchor cell
    instead (``K(f_m) * mean_n cos(f_m, f_n)``).
    """
    f = ad.as_tensor(f)
    n_b, gh, gw, dim = f.shape
    flat = f.reshape(n_b, gh * gw, dim)
    unit = ad.l2_normalize(flat, axis=-1)
    cos = unit @ ad.transpose(unit, (0, 2, 1))
    kf = flat @ K
    if literal:
        out = kf * ad.mean(cos, axis=-1, keepdims=True)
    else:
        out = (cos @ kf) * (1.0 / (gh * gw))
    return out.reshape(n_b, gh, gw, dim)


def _flat(t: Tensor) -> Tensor:
    n_b, gh, gw, dim = t.shape
    return t.reshape(n_b * gh * gw, dim)


def _rowwise_cos(a: Tensor, b: Tensor) -> Tensor:
    return ad.tsum(ad.l2_normalize(a, axis=-1) * ad.l2_normalize(b, axis=-1), axis=-1)


def consistency_loss(f_tilde: Sequence, f: Sequence, pairs: PairSet) -> Tensor:
    """Mean over pairs of -[cos(f~1_m, f2_n) + cos(f1_m, f~2_n)].

    ``f_tilde`` are the propagated momentum-encoder maps of (view 1, view 2),
    ``f`` the online-encoder maps of the same views.
    """
    if len(pairs) == 0:
        raise EmptyPairSetError("no feature-cell pairs under the distance threshold")
    t1, t2 = (ad.as_tensor(x) for x in f_tilde)
    r1, r2 = (ad.as_tensor(x) for x in f)
    cells = t1.shape[1] * t1.shape[2]
    i1 = pairs.batch * cells + pairs.m
    i2 = pairs.batch * cells + pairs.n
    c_a = _rowwise_cos(_flat(t1)[i1], _flat(r2)[i2])
    c_b = _rowwise_cos(_flat(r1)[i1], _flat(t2)[i2])
    return -ad.mean(c_a + c_b)


def pretrain_loss(l_scl, l_ccl, l_con, lambda1: float = LAMBDA_SCL,
                  lambda2: float = LAMBDA_CCL) -> Tensor:
    return ad.as_tensor(l_scl) * lambda1 + ad.as_tensor(l_ccl) * lambda2 + ad.as_tensor(l_con)


# --------------------------------------------------------------------- segmentation

def log_softmax(logits) -> Tensor:
    logits = ad.as_tensor(logits)
    return logits - ad.logsumexp(logits, axis=-1, keepdims=True)


def softmax(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def supervised_loss(logits, mask) -> Tensor:
    """Mean per-pixel softmax cross-entropy against integer labels."""
    logits = ad.as_tensor(logits)
    mask = np.asarray(mask)
    if mask.shape != logits.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    k = logits.shape[-1]
    if mask.size and (mask.min() < 0 or mask.max() >= k or not np.issubdtype(mask.dtype, np.integer)):
        raise ValueError(f"labels must be integers in [0, {k - 1}]")
    onehot = np.eye(k)[mask]
    return -ad.mean(ad.tsum(log_softmax(logits) * onehot, axis=-1))


def reg_loss(student_logits, teacher_logits) -> Tensor:
    """Mean per-pixel cross-entropy of the student against teacher soft targets.

    The teacher side is treated as a constant.
    """
    s = ad.as_tensor(student_logits)
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if s.shape != t.shape:
        raise ValueError(f"student {s.shape} and teacher {t.shape} logits differ in shape")
    return -ad.mean(ad.tsum(log_softmax(s) * softmax(t), axis=-1))


def finetune_loss(l_sup, l_reg, lambda3: float = LAMBDA_REG) -> Tensor:
    return ad.as_tensor(l_sup) + ad.as_tensor(l_reg) * lambda3
