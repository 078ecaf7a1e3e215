"""Synthetic two-domain segmentation benchmark, augmentation and raster I/O.

Both domains draw foreground shapes (1-3 ellipses) from the same
distribution; only the rendering differs.  Source images are bright with a
smooth illumination ramp.  Target images are the intensity-inverted
rendering with an additive band-limited texture.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensorfft import fft2_array, ifft2_array

SOURCE, TARGET = "source", "target"
_DOMAIN_CODE = {SOURCE: 0, TARGET: 1}
_PART_CODE = {"train": 0, "test": 1}


class LabelWithheldError(RuntimeError):
    """A training routine asked for the mask of an unlabeled sample."""


class ImageFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


# --------------------------------------------------------------------- types

@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray            # (H, W, C) in [0, 1]
    truth: np.ndarray = field(repr=False)   # (H, W) int labels
    domain: str = SOURCE
    labeled: bool = True
    id: str = ""

    @property
    def mask(self) -> np.ndarray:
        if not self.labeled:
            raise LabelWithheldError(f"label of sample {self.id!r} is withheld from training")
        return self.truth

    @property
    def eval_mask(self) -> np.ndarray:
        """Ground truth for scoring only; never feed this to a loss."""
        return self.truth

    def withheld(self) -> "Sample":
        return replace(self, labeled=False)


@dataclass
class DatasetSplit:
    S: list
    T1: list
    T2: list
    test_T: list
    test_S: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    @property
    def target_train(self) -> list:
        return list(self.T1) + list(self.T2)

    def all_train(self) -> list:
        return list(self.S) + self.target_train


@dataclass(frozen=True)
class StyleParams:
    source_background: tuple = (0.6, 0.75)
    source_ramp: float = 0.2
    contrast: tuple = (0.2, 0.3)
    noise: float = 0.02
    target_texture: float = 0.06
    texture_band: tuple = (0.1, 0.3)
    invert_target: bool = True


@dataclass(frozen=True)
class AugmentRecord:
    """Rotation by ``quarter_turns`` x 90 deg (counter-clockwise), then shift."""

    quarter_turns: int = 0
    dy: int = 0
    dx: int = 0

    @property
    def rotation(self) -> int:
        return 90 * self.quarter_turns

    @property
    def translation(self) -> tuple[int, int]:
        return self.dy, self.dx

    def forward_coords(self, coords: np.ndarray, size: int) -> np.ndarray:
        """Map (row, col) pixel coordinates of the original into the augmented image."""
        c = np.array(coords, dtype=np.float64)
        for _ in range(self.quarter_turns % 4):
            c = np.stack([size - 1 - c[..., 1], c[..., 0]], axis=-1)
        return c + np.array([self.dy, self.dx], dtype=np.float64)

    def inverse_coords(self, coords: np.ndarray, size: int) -> np.ndarray:
        c = np.array(coords, dtype=np.float64) - np.array([self.dy, self.dx], dtype=np.float64)
        for _ in range(self.quarter_turns % 4):
            c = np.stack([c[..., 1], size - 1 - c[..., 0]], axis=-1)
        return c


IDENTITY = AugmentRecord()


# --------------------------------------------------------------------- generation

def _ellipse_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        ay, ax = rng.uniform(0.08, 0.18, size=2) * size
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    return mask


def _band_limited_noise(rng: np.random.Generator, size: int, band: tuple) -> np.ndarray:
    white = rng.standard_normal((size, size))
    f = (np.arange(size) - size // 2) / size
    radius = np.hypot(f[:, None], f[None, :])
    keep = (radius >= band[0]) & (radius <= band[1])
    tex = ifft2_array(fft2_array(white) * keep).real
    return tex / (tex.std() + 1e-12)


def render(mask: np.ndarray, domain: str, rng: np.random.Generator,
           style: StyleParams = StyleParams()) -> np.ndarray:
    size = mask.shape[0]
    bg = rng.uniform(*style.source_background)
    contrast = rng.uniform(*style.contrast)
    base = bg + contrast * mask
    if domain == SOURCE:
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size - 0.5
        ramp = style.source_ramp * (np.cos(angle) * xx + np.sin(angle) * yy)
        img = base + ramp
    else:
        img = 1.0 - base if style.invert_target else base
        img = img + style.target_texture * _band_limited_noise(rng, size, style.texture_band)
    img = img + style.noise * rng.standard_normal((size, size))
    return np.clip(img, 0.0, 1.0)[:, :, None]


def make_sample(seed: int, domain: str, part: str, index: int, size: int,
                style: StyleParams = StyleParams()) -> Sample:
    # one stream per sample so generation order never matters
    rng = np.random.default_rng([seed, _DOMAIN_CODE[domain], _PART_CODE[part], index])
    mask = _ellipse_mask(rng, size)
    image = render(mask, domain, rng, style)
    sid = f"{domain[0]}{'' if part == 'train' else 'test'}{index:03d}"
    return Sample(image=image, truth=mask.astype(np.int64), domain=domain, labeled=True, id=sid)


def generate(seed: int, n_source: int, n_target: int, size: int = 64,
             style: StyleParams = StyleParams(), labeled: float | int = 0,
             n_test: int | None = None, workers: int = 1) -> DatasetSplit:
    """Build a benchmark split.

    ``labeled`` is forwarded to :func:`split_target` (0 keeps every target
    training sample unlabeled).  Test sets default to a quarter of each
    training count (minimum 4).  ``workers > 1`` renders samples in a thread
    pool; results are identical to serial generation.
    """
    if size not in (16, 32, 64):
        raise ValueError(f"size must be 16, 32 or 64, got {size}")
    if n_source < 4 or n_target < 4:
        raise ValueError(f"need at least 4 samples per domain, got {n_source}/{n_target}")
    n_test_s = n_test if n_test is not None else max(4, n_source // 4)
    n_test_t = n_test if n_test is not None else max(4, n_target // 4)
    jobs = ([(SOURCE, "train", i) for i in range(n_source)]
            + [(TARGET, "train", i) for i in range(n_target)]
            + [(SOURCE, "test", i) for i in range(n_test_s)]
            + [(TARGET, "test", i) for i in range(n_test_t)])

    def build(job):
        return make_sample(seed, job[0], job[1], job[2], size, style)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(build, jobs))
    else:
        samples = [build(j) for j in jobs]
    S = samples[:n_source]
    T = samples[n_source:n_source + n_target]
    test_S = samples[n_source + n_target:n_source + n_target + n_test_s]
    test_T = samples[n_source + n_target + n_test_s:]
    if labeled:
        T1, T2 = split_target(T, labeled, seed)
    else:
        T1, T2 = [], [s.withheld() for s in T]
    params = {"seed": seed, "n_source": n_source, "n_target": n_target, "size": size,
              "labeled": labeled, "n_test_source": n_test_s, "n_test_target": n_test_t,
              "style": asdict(style)}
    return DatasetSplit(S=S, T1=T1, T2=T2, test_T=test_T, test_S=test_S, params=params)


def split_target(T: Sequence[Sample], labeled: float | int, seed: int = 0
                 ) -> tuple[list[Sample], list[Sample]]:
    """Split target training samples into labeled T1 and unlabeled T2.

    A float in (0, 1) is a fraction of ``len(T)``; an int is an absolute count.
    """
    n = len(T)
    if isinstance(labeled, float) and 0 < labeled < 1:
        k = int(round(labeled * n))
    else:
        k = int(labeled)
    if k <= 0 or k >= n:
        raise ValueError(f"labeled portion {labeled!r} of {n} samples leaves an empty side")
    chosen = set(np.random.default_rng([seed, 99]).permutation(n)[:k].tolist())
    T1 = [replace(s, labeled=True) for i, s in enumerate(T) if i in chosen]
    T2 = [s.withheld() for i, s in enumerate(T) if i not in chosen]
    return T1, T2


# --------------------------------------------------------------------- augmentation

def apply_record(arr: np.ndarray, rec: AugmentRecord) -> np.ndarray:
    """Apply an augmentation to an (H, W) or (H, W, C) array, zero-filling."""
    out = np.rot90(arr, rec.quarter_turns % 4, axes=(0, 1))
    shifted = np.zeros_like(out)
    h, w = out.shape[:2]
    dy, dx = rec.dy, rec.dx
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    shifted[yd, xd] = out[ys, xs]
    return shifted


def random_record(rng: np.random.Generator, size: int) -> AugmentRecord:
    lim = size // 8
    turns = int(rng.integers(0, 4))
    dy, dx = (int(v) for v in rng.integers(-lim, lim + 1, size=2))
    return AugmentRecord(turns, dy, dx)


def augment(image: np.ndarray, mask: np.ndarray | None, seed
            ) -> tuple[np.ndarray, np.ndarray | None, AugmentRecord]:
    """Random quarter-turn rotation plus integer translation (|shift| <= size/8)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rec = random_record(rng, image.shape[0])
    out_mask = None if mask is None else apply_record(mask, rec)
    return apply_record(image, rec), out_mask, rec


# --------------------------------------------------------------------- PGM / PPM

def write_image(path, image: np.ndarray) -> None:
    """16-bit binary PGM (1 channel) or PPM (3 channels)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError(f"only 1 or 3 channels are supported, got {c}")
    q = np.round(np.clip(img, 0.0, 1.0) * 65535).astype(">u2")
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())


def write_mask(path, mask: np.ndarray) -> None:
    m = (np.asarray(mask) > 0).astype(np.uint8) * 255
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + m.tobytes())


def _parse_netpbm(blob: bytes) -> tuple[np.ndarray, int]:
    if len(blob) == 0:
        raise ImageFormatError("empty file", 0)
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}", 0)
    channels = 1 if magic == b"P5" else 3
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed header: expected a decimal number", pos)
        fields.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise ImageFormatError("malformed header: missing whitespace before raster", pos)
    pos += 1
    w, h, maxval = fields
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError(f"invalid header values {w}x{h} maxval {maxval}", pos)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * channels * dtype.itemsize
    if len(blob) - pos < need:
        raise ImageFormatError(
            f"truncated raster: need {need} bytes, found {len(blob) - pos}", len(blob))
    data = np.frombuffer(blob, dtype=dtype, count=w * h * channels, offset=pos)
    return data.reshape(h, w, channels).astype(np.float64), maxval


def read_image(path) -> np.ndarray:
    data, maxval = _parse_netpbm(Path(path).read_bytes())
    return data / maxval


def read_mask(path) -> np.ndarray:
    data, maxval = _parse_netpbm(Path(path).read_bytes())
    return (data[:, :, 0] * 2 > maxval).astype(np.int64)


# --------------------------------------------------------------------- manifest

def _membership(split: DatasetSplit):
    for part, samples in (("S", split.S), ("T1", split.T1), ("T2", split.T2),
                          ("test_S", split.test_S), ("test_T", split.test_T)):
        for s in samples:
            yield part, s


def write_dataset(split: DatasetSplit, out_dir) -> Path:
    """Write images, masks and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for part, s in _membership(split):
        ext = "pgm" if s.image.shape[2] == 1 else "ppm"
        img_rel = f"images/{part}_{s.id}.{ext}"
        mask_rel = f"masks/{part}_{s.id}.pgm"
        write_image(out / img_rel, s.image)
        write_mask(out / mask_rel, s.truth)
        entries.append({"id": s.id, "domain": s.domain, "split": part, "labeled": s.labeled,
                        "image": img_rel, "mask": mask_rel})
    manifest = {"format": "gfdaseg-dataset/1", "generator": split.params, "samples": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(manifest_path) -> DatasetSplit:
    path = Path(manifest_path)
    manifest = json.loads(path.read_text())
    root = path.parent
    parts: dict[str, list] = {"S": [], "T1": [], "T2": [], "test_S": [], "test_T": []}
    for e in manifest["samples"]:
        s = Sample(image=read_image(root / e["image"]), truth=read_mask(root / e["mask"]),
                   domain=e["domain"], labeled=bool(e["labeled"]), id=e["id"])
        parts[e["split"]].append(s)
    return DatasetSplit(params=manifest.get("generator", {}), **parts)

