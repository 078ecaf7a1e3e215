"""Exact 2-D discrete Fourier transforms on power-of-two grids.

Spectra are stored DC-centered: the zero-frequency bin of an ``h x w`` grid
sits at ``(h // 2, w // 2)``.  Callers never shift by hand.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Grid dimensions are not supported (non power of two, or mismatched)."""


class SpectralDomainError(ValueError):
    """A value lies outside the domain of the operation (e.g. negative amplitude)."""


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid2D:
    """One real-valued channel, shape ``(height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"Grid2D expects a 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Grid2D values must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Spectrum:
    data: np.ndarray
    centered: bool = True

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.complex128)
        if arr.ndim != 2:
            raise DimensionError(f"Spectrum expects a 2-D array, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class AmplitudePhase:
    amplitude: Grid2D
    phase: Grid2D


def _check_pow2(h: int, w: int) -> None:
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise DimensionError(f"grid dimensions must be powers of two, got {h}x{w}")


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_last_axis(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey along the last axis (unnormalized)."""
    n = x.shape[-1]
    out = x[..., _bit_reverse_indices(n)].astype(np.complex128)
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(out.shape[:-1] + (n // size, size))
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * twiddle
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        out = blocks.reshape(out.shape)
        size *= 2
    return out


def _center(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[-2:]
    return np.roll(a, (h // 2, w // 2), axis=(-2, -1))


def _uncenter(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[-2:]
    return np.roll(a, (-(h // 2), -(w // 2)), axis=(-2, -1))


def fft2_array(a: np.ndarray) -> np.ndarray:
    """DC-centered 2-D DFT over the last two axes of ``a``."""
    h, w = a.shape[-2:]
    _check_pow2(h, w)
    rows = _fft_last_axis(np.asarray(a))
    cols = _fft_last_axis(np.swapaxes(rows, -1, -2))
    return _center(np.swapaxes(cols, -1, -2))


def ifft2_array(s: np.ndarray) -> np.ndarray:
    """Complex inverse of :func:`fft2_array` (input DC-centered)."""
    h, w = s.shape[-2:]
    _check_pow2(h, w)
    raw = _uncenter(np.asarray(s, dtype=np.complex128))
    rows = _fft_last_axis(raw, inverse=True)
    cols = _fft_last_axis(np.swapaxes(rows, -1, -2), inverse=True)
    return np.swapaxes(cols, -1, -2) / (h * w)


def fft2(g: Grid2D) -> Spectrum:
    return Spectrum(fft2_array(g.data), centered=True)


def ifft2(s: Spectrum, imag_tol: float = 1e-6) -> Grid2D:
    """Inverse transform back to a real grid.

    The imaginary residue is dropped once it has been checked to be below
    ``imag_tol`` (max-abs); pass ``imag_tol=None`` to skip the check.
    """
    data = s.data if s.centered else _center(s.data)
    out = ifft2_array(data)
    if imag_tol is not None:
        residue = float(np.max(np.abs(out.imag))) if out.size else 0.0
        if residue >= imag_tol:
            raise SpectralDomainError(
                f"inverse transform has imaginary residue {residue:.3e} >= {imag_tol:.1e}"
            )
    return Grid2D(out.real)


def amp_phase(s: Spectrum) -> AmplitudePhase:
    phase = np.angle(s.data)
    # np.angle yields -pi for a negative real with -0.0 imaginary part
    phase = np.where(phase <= -np.pi, np.pi, phase)
    return AmplitudePhase(Grid2D(np.abs(s.data)), Grid2D(phase))


def compose(ap: AmplitudePhase) -> Spectrum:
    amp = ap.amplitude.data
    if np.any(amp < 0):
        raise SpectralDomainError("amplitude must be non-negative")
    return Spectrum(amp * np.exp(1j * ap.phase.data), centered=True)
