"""Periodic 2D grid fields and the spectral primitives shared by the solvers.

Layout convention: ``values[iy, ix, c]`` with ``y = iy * Ly / H`` and
``x = ix * Lx / W``. The forward transform is unnormalized; the inverse
carries the ``1/(HW)`` factor (numpy's default).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class FieldError(ValueError):
    """Invalid grid field (shape, size or non-finite values)."""


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridField:
    values: np.ndarray
    Lx: float = 1.0
    Ly: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise FieldError(f"expected an H x W x C array, got shape {v.shape}")
        H, W, _ = v.shape
        if H < 4 or W < 4 or not (_is_pow2(H) and _is_pow2(W)):
            raise FieldError(f"grid {H}x{W} must be powers of two and at least 4")
        if not np.all(np.isfinite(v)):
            raise FieldError("field contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    @property
    def H(self) -> int:
        return self.values.shape[0]

    @property
    def W(self) -> int:
        return self.values.shape[1]

    @property
    def C(self) -> int:
        return self.values.shape[2]

    def coords(self):
        """Cell-origin coordinates ``(X, Y)``, each of shape ``(H, W)``."""
        x = np.arange(self.W) * (self.Lx / self.W)
        y = np.arange(self.H) * (self.Ly / self.H)
        return np.meshgrid(x, y)

    def with_values(self, values) -> "GridField":
        return GridField(values, self.Lx, self.Ly)


def wavenumbers(H: int, W: int, Lx: float = 1.0, Ly: float = 1.0):
    """Angular wavenumber grids ``(kx, ky)`` of shape ``(H, W)``."""
    kx = 2 * np.pi * np.fft.fftfreq(W, d=Lx / W)
    ky = 2 * np.pi * np.fft.fftfreq(H, d=Ly / H)
    KX, KY = np.meshgrid(kx, ky)
    return KX, KY


@dataclass(frozen=True)
class SpectralField:
    coeffs: np.ndarray  # complex, (H, W, C)
    Lx: float = 1.0
    Ly: float = 1.0
    kx: np.ndarray = field(init=False, repr=False)
    ky: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        H, W = self.coeffs.shape[:2]
        kx, ky = wavenumbers(H, W, self.Lx, self.Ly)
        object.__setattr__(self, "kx", kx)
        object.__setattr__(self, "ky", ky)


def dft2(f: GridField) -> SpectralField:
    if not np.all(np.isfinite(f.values)):
        raise FieldError("dft2: non-finite input")
    return SpectralField(np.fft.fft2(f.values, axes=(0, 1)), f.Lx, f.Ly)


def idft2(F: SpectralField) -> GridField:
    """Inverse transform; the (numerically tiny) imaginary part is dropped."""
    return GridField(np.fft.ifft2(F.coeffs, axes=(0, 1)).real, F.Lx, F.Ly)


def spectral_gradient(f: GridField, axis: str) -> GridField:
    """Periodic derivative along ``'x'`` or ``'y'`` by ``ik`` multiplication."""
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    F = dft2(f)
    if axis == "x":
        k = F.kx.copy()
        k[:, f.W // 2] = 0.0
    else:
        k = F.ky.copy()
        k[f.H // 2, :] = 0.0
    return idft2(SpectralField(1j * k[:, :, None] * F.coeffs, f.Lx, f.Ly))


def dealias_mask(H: int, W: int, rule: str = "two-thirds") -> np.ndarray:
    """Boolean ``(H, W)`` mask keeping integer modes with ``|n| <= N // 3``."""
    if rule != "two-thirds":
        raise ValueError(f"unknown dealiasing rule {rule!r}")
    if H < 4 or W < 4:
        raise FieldError("dealias_mask needs H, W >= 4")
    ny = np.abs(np.fft.fftfreq(H, d=1.0 / H))
    nx = np.abs(np.fft.fftfreq(W, d=1.0 / W))
    return (ny[:, None] <= H // 3) & (nx[None, :] <= W // 3)


def apply_mask(F: SpectralField, mask: np.ndarray) -> SpectralField:
    return SpectralField(F.coeffs * mask[:, :, None], F.Lx, F.Ly)
