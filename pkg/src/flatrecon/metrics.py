"""PSNR, SSIM (plain and on the tape), and the pooled two-sample t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, ShapeError, Var

PSNR_CAP = 100.0


def psnr(ref: np.ndarray, test: np.ndarray, data_range: float = 1.0, cap: float = PSNR_CAP) -> float:
    if data_range <= 0:
        raise ConfigError("data_range must be positive")
    ref, test = np.asarray(ref, dtype=np.float64), np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ShapeError(f"shape mismatch {ref.shape} vs {test.shape}")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(data_range**2 / mse))


def _box(img: np.ndarray, win: int) -> np.ndarray:
    cs = np.cumsum(np.pad(img, ((1, 0), (0, 0))), axis=0)
    rows = cs[win:] - cs[:-win]
    cs = np.cumsum(np.pad(rows, ((0, 0), (1, 0))), axis=1)
    return (cs[:, win:] - cs[:, :-win]) / (win * win)


def ssim(ref: np.ndarray, test: np.ndarray, window: int = 7, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all ``window x window`` patches fully inside the image.

    Local statistics use a uniform window and unbiased (N - 1) covariances.
    """
    if data_range <= 0:
        raise ConfigError("data_range must be positive")
    x, y = np.asarray(ref, dtype=np.float64), np.asarray(test, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ShapeError(f"ssim needs two equal 2-D images, got {x.shape} and {y.shape}")
    if window > min(x.shape):
        raise ShapeError(f"window {window} larger than image {x.shape}")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    cov_norm = window * window / (window * window - 1.0)
    ux, uy = _box(x, window), _box(y, window)
    vx = cov_norm * (_box(x * x, window) - ux * ux)
    vy = cov_norm * (_box(y * y, window) - uy * uy)
    vxy = cov_norm * (_box(x * y, window) - ux * uy)
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return float(s.mean())


def ssim_loss_var(ref: Var, test: Var, window: int = 7, k1: float = 0.01, k2: float = 0.03,
                  data_range: float = 1.0) -> Var:
    """1 - SSIM on ``(1, H, W)`` tape nodes; same statistics as :func:`ssim`."""
    if ref.shape != test.shape:
        raise ShapeError(f"shape mismatch {ref.shape} vs {test.shape}")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    cov_norm = window * window / (window * window - 1.0)
    box = lambda v: ad.box_filter(v, window)  # noqa: E731
    ux, uy = box(ref), box(test)
    uxx, uyy, uxy = box(ad.square(ref)), box(ad.square(test)), box(ad.mul(ref, test))
    ux2, uy2, uxuy = ad.square(ux), ad.square(uy), ad.mul(ux, uy)
    vx = ad.scale(ad.sub(uxx, ux2), cov_norm)
    vy = ad.scale(ad.sub(uyy, uy2), cov_norm)
    vxy = ad.scale(ad.sub(uxy, uxuy), cov_norm)
    num = ad.mul(ad.add_scalar(ad.scale(uxuy, 2.0), c1), ad.add_scalar(ad.scale(vxy, 2.0), c2))
    den = ad.mul(ad.add_scalar(ad.add(ux2, uy2), c1), ad.add_scalar(ad.add(vx, vy), c2))
    return ad.add_scalar(ad.scale(ad.reduce_mean(ad.div(num, den)), -1.0), 1.0)


def ssim_loss(ref: np.ndarray, test: np.ndarray) -> float:
    """1 - SSIM of two magnitude images."""
    tape = ad.Tape()
    return float(ssim_loss_var(tape.const(np.asarray(ref)[None]), tape.const(np.asarray(test)[None])).value)


# --------------------------------------------------------------------------
# significance testing


def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    return betainc(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    significant: bool


def unpaired_t_test(a, b, alpha: float = 0.05) -> TTestResult:
    """Two-sided Student t-test with pooled variance."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise ValueError("each sample needs at least two values")
    df = na + nb - 2
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / df
    diff = a.mean() - b.mean()
    if pooled == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, 1.0, False)
        return TTestResult(math.copysign(math.inf, diff), 0.0, True)
    t = float(diff / math.sqrt(pooled * (1.0 / na + 1.0 / nb)))
    p = t_sf_two_sided(t, df)
    return TTestResult(t, p, p < alpha)
