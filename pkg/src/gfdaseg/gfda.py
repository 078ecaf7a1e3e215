"""Gaussian-masked Fourier style transfer and four-view set construction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synthdata import IDENTITY, AugmentRecord, apply_record, random_record
from .tensorfft import DimensionError, SpectralDomainError, fft2_array, ifft2_array, is_power_of_two

STYLE_A, STYLE_B = "A", "B"
DEFAULT_SIGMA = 0.1


@dataclass(frozen=True)
class GaussianMask:
    sigma: float
    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def gaussian_mask(h: int, w: int, sigma: float = DEFAULT_SIGMA) -> GaussianMask:
    """Centered Gaussian over normalized frequency coordinates; 1 at the DC bin."""
    if not sigma > 0:
        raise SpectralDomainError(f"sigma must be positive, got {sigma}")
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise DimensionError(f"mask dimensions must be powers of two, got {h}x{w}")
    u = (np.arange(h) - h // 2) / h
    v = (np.arange(w) - w // 2) / w
    vals = np.exp(-(u[:, None] ** 2 + v[None, :] ** 2) / (2.0 * sigma ** 2))
    return GaussianMask(float(sigma), vals)


def rect_mask(h: int, w: int, beta: float = 0.1) -> np.ndarray:
    """Hard square low-frequency window (the original FDA swap), for comparison."""
    b = int(np.floor(min(h, w) * beta))
    u = np.abs(np.arange(h) - h // 2)
    v = np.abs(np.arange(w) - w // 2)
    return ((u[:, None] <= b) & (v[None, :] <= b)).astype(np.float64)


def _as_chw(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    return np.moveaxis(x, -1, 0)


def blend_spectrum(x_src: np.ndarray, x_tgt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-channel spectrum carrying the source phase and the blended amplitude."""
    spec_s = fft2_array(_as_chw(x_src))
    spec_t = fft2_array(_as_chw(x_tgt))
    amp = np.abs(spec_t) * mask + np.abs(spec_s) * (1.0 - mask)
    return amp * np.exp(1j * np.angle(spec_s))


def spectral_transfer(x_src: np.ndarray, x_tgt: np.ndarray, sigma: float = DEFAULT_SIGMA,
                      mask: np.ndarray | None = None, clamp: bool = True,
                      imag_tol: float = 1e-6) -> np.ndarray:
    """Give ``x_src`` the low-frequency amplitude (style) of ``x_tgt``.

    Images are (H, W, C) or (H, W); each channel is transferred on its own.
    ``mask`` overrides the Gaussian window (e.g. :func:`rect_mask`, or zeros
    for a pure round trip).  With ``clamp=False`` the raw inverse is returned.
    """
    src = np.asarray(x_src, dtype=np.float64)
    tgt = np.asarray(x_tgt, dtype=np.float64)
    if src.shape != tgt.shape:
        raise DimensionError(f"image shapes differ: {src.shape} vs {tgt.shape}")
    h, w = src.shape[:2]
    m = gaussian_mask(h, w, sigma).values if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != (h, w):
        raise DimensionError(f"mask shape {m.shape} does not match image {h}x{w}")
    inv = ifft2_array(blend_spectrum(src, tgt, m))
    residue = float(np.max(np.abs(inv.imag)))
    if residue >= imag_tol:
        raise SpectralDomainError(f"imaginary residue {residue:.3e} exceeds {imag_tol:.1e}")
    out = np.moveaxis(inv.real, 0, -1).reshape(src.shape)
    return np.clip(out, 0.0, 1.0) if clamp else out


@dataclass(frozen=True)
class View:
    name: str
    image: np.ndarray
    style: str
    instance: str
    record: AugmentRecord = IDENTITY
    base: str = ""     # name of the un-augmented view this one was derived from


@dataclass(frozen=True)
class ViewSet:
    views: tuple

    def __len__(self) -> int:
        return len(self.views)

    def __getitem__(self, name: str) -> View:
        for v in self.views:
            if v.name == name:
                return v
        raise KeyError(name)

    @property
    def x_s(self) -> np.ndarray:
        return self["x_s"].image

    @property
    def x_t(self) -> np.ndarray:
        return self["x_t"].image

    @property
    def x_s_to_t(self) -> np.ndarray:
        return self["x_s_to_t"].image

    @property
    def x_t_to_s(self) -> np.ndarray:
        return self["x_t_to_s"].image

    def images(self) -> np.ndarray:
        return np.stack([v.image for v in self.views])

    def styles(self) -> list[str]:
        return [v.style for v in self.views]

    def instances(self) -> list[str]:
        return [v.instance for v in self.views]


BASE_VIEWS = ("x_s", "x_s_to_t", "x_t", "x_t_to_s")


def make_view_set(x_s: np.ndarray, x_t: np.ndarray, sigma: float = DEFAULT_SIGMA,
                  aug_seed=0, id_s: str = "s", id_t: str = "t") -> ViewSet:
    """The four base views plus one random augmentation of each (8 views).

    Style A: ``x_s`` and ``x_t_to_s``; style B: ``x_t`` and ``x_s_to_t``.
    The source instance owns ``x_s`` and ``x_s_to_t``; the target instance the rest.
    """
    rng = aug_seed if isinstance(aug_seed, np.random.Generator) else np.random.default_rng(aug_seed)
    x_s = np.asarray(x_s, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    base = {
        "x_s": (x_s, STYLE_A, id_s),
        "x_s_to_t": (spectral_transfer(x_s, x_t, sigma), STYLE_B, id_s),
        "x_t": (x_t, STYLE_B, id_t),
        "x_t_to_s": (spectral_transfer(x_t, x_s, sigma), STYLE_A, id_t),
    }
    views = [View(n, img, sty, inst, IDENTITY, n) for n, (img, sty, inst) in base.items()]
    for n in BASE_VIEWS:
        img, sty, inst = base[n]
        rec = random_record(rng, img.shape[0])
        views.append(View(f"aug_{n}", apply_record(img, rec), sty, inst, rec, n))
    return ViewSet(tuple(views))
