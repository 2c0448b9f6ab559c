"""Single-coil Cartesian acquisition: centered unitary FFT, column masks, A and A^T.

Complex grids are plain ``complex128`` numpy arrays of shape ``(H, W)`` with
power-of-two extents.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ConfigError, ShapeError


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def check_grid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    if z.ndim != 2:
        raise ShapeError(f"expected a 2-D grid, got shape {z.shape}")
    if not (_is_pow2(z.shape[0]) and _is_pow2(z.shape[1])):
        raise ShapeError(f"grid extents must be powers of two, got {z.shape}")
    return z.astype(np.complex128, copy=False)


def fft2_centered(img: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DFT with the DC term at ``(H // 2, W // 2)``."""
    img = check_grid(img)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(img), norm="ortho"))


def ifft2_centered(ksp: np.ndarray) -> np.ndarray:
    ksp = check_grid(ksp)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(ksp), norm="ortho"))


def fft_radix2(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey transform along the last axis (unnormalized)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ShapeError(f"radix-2 FFT needs a power-of-two length, got {n}")
    bits = n.bit_length() - 1
    rev = np.array([int(format(i, f"0{bits}b")[::-1], 2) if bits else 0 for i in range(n)])
    a = x[..., rev].copy()
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(*a.shape[:-1], n // size, size)
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * tw
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        a = blocks.reshape(a.shape)
        size *= 2
    return a


def fft2_centered_radix2(img: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Same transform as :func:`fft2_centered` built on :func:`fft_radix2`."""
    img = check_grid(img)
    h, w = img.shape
    z = np.fft.ifftshift(img)
    z = fft_radix2(z, inverse)
    z = fft_radix2(z.T, inverse).T
    return np.fft.fftshift(z) / math.sqrt(h * w)


@dataclass(frozen=True)
class SamplingMask:
    width: int
    acceleration: int
    center_fraction: float
    offset: int
    kept: np.ndarray  # bool, length width

    @property
    def n_center(self) -> int:
        return center_count(self.width, self.center_fraction)

    @property
    def fraction(self) -> float:
        return float(self.kept.mean())

    def column_weights(self) -> np.ndarray:
        return self.kept.astype(np.float64)

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "acceleration": self.acceleration,
            "center_fraction": self.center_fraction,
            "offset": self.offset,
            "kept_columns": [bool(b) for b in self.kept],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SamplingMask":
        m = make_equispaced_mask(doc["width"], doc["acceleration"], doc["center_fraction"], doc["offset"])
        if [bool(b) for b in m.kept] != list(doc["kept_columns"]):
            raise ConfigError("kept_columns disagree with the mask parameters")
        return m

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def center_count(width: int, center_fraction: float) -> int:
    # round half away from zero
    return int(math.floor(width * center_fraction + 0.5))


def make_equispaced_mask(width: int, acceleration: int, center_fraction: float, offset: int = 0) -> SamplingMask:
    if not (1 <= acceleration <= width):
        raise ConfigError(f"acceleration must lie in [1, {width}], got {acceleration}")
    if not (0.0 < center_fraction <= 1.0):
        raise ConfigError(f"center_fraction must lie in (0, 1], got {center_fraction}")
    if not (0 <= offset < acceleration):
        raise ConfigError(f"offset must lie in [0, {acceleration}), got {offset}")
    n_center = center_count(width, center_fraction)
    kept = np.zeros(width, dtype=bool)
    start = (width - n_center + 1) // 2
    kept[start:start + n_center] = True
    kept[offset::acceleration] = True
    kept.flags.writeable = False
    return SamplingMask(width, int(acceleration), float(center_fraction), int(offset), kept)


@dataclass(frozen=True)
class NoiseSpec:
    std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.std < 0:
            raise ConfigError("noise std must be nonnegative")


def _check_width(z: np.ndarray, mask: SamplingMask) -> None:
    if z.shape[-1] != mask.width:
        raise ShapeError(f"mask width {mask.width} does not match grid width {z.shape[-1]}")


def apply_mask(z: np.ndarray, mask: SamplingMask) -> np.ndarray:
    _check_width(z, mask)
    return z * mask.column_weights()


def apply_forward(x: np.ndarray, mask: SamplingMask, noise: NoiseSpec | None = None) -> np.ndarray:
    """y = A x + eps; noise lands only on acquired columns."""
    x = check_grid(x)
    y = apply_mask(x, mask)
    if noise is not None and noise.std > 0:
        rng = np.random.default_rng(noise.seed)
        eps = rng.normal(0.0, noise.std, size=x.shape) + 1j * rng.normal(0.0, noise.std, size=x.shape)
        y = y + apply_mask(eps, mask)
    return y


def adjoint(y: np.ndarray, mask: SamplingMask) -> np.ndarray:
    # A is a real 0/1 diagonal, so A^T = A
    return apply_mask(check_grid(y), mask)


def data_consistency(x: np.ndarray, y: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """A^T (A x - y)."""
    x, y = check_grid(x), check_grid(y)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    return adjoint(apply_mask(x, mask) - y, mask)
