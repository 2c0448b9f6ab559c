"""Continuous-flow side of the unrolled network.

Time schedule and parameter grounding, the straight-line target trajectory and
its velocities, the alignment losses, and the energy-based conditional
velocity field with an explicit Gaussian prior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import ConfigError, ShapeError
from .physics import SamplingMask, apply_mask, data_consistency

LambdaFn = Callable[[float], float]


def const_one(t: float) -> float:
    return 1.0


def time_schedule(K: int, alpha: float) -> np.ndarray:
    """t_k = 1 - (1 - k/K)^(1 + alpha), k = 0..K; denser near t = 1 for alpha > 0."""
    if int(K) != K or K < 1:
        raise ConfigError(f"K must be a positive integer, got {K}")
    if alpha <= -1:
        raise ConfigError(f"alpha must exceed -1, got {alpha}")
    k = np.arange(K + 1, dtype=np.float64)
    t = 1.0 - (1.0 - k / K) ** (1.0 + alpha)
    t[0], t[-1] = 0.0, 1.0
    return t


@dataclass(frozen=True)
class CascadeSchedule:
    K: int
    alpha: float
    sigma: float
    t: np.ndarray
    delta: np.ndarray
    eta: np.ndarray
    lam: np.ndarray
    mu: float
    lambda_name: str = "const1"

    def to_json(self) -> dict:
        return {
            "K": self.K,
            "alpha": self.alpha,
            "sigma": self.sigma,
            "lambda": self.lambda_name,
            "t": self.t.tolist(),
            "delta": self.delta.tolist(),
            "eta": self.eta.tolist(),
            "mu": self.mu,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CascadeSchedule":
        if doc.get("lambda", "const1") != "const1":
            raise ConfigError(f"unsupported lambda {doc['lambda']!r}")
        sched = build_schedule(doc["K"], doc["alpha"], doc["sigma"])
        if not np.array_equal(sched.t, np.asarray(doc["t"], dtype=np.float64)):
            raise ConfigError("stored time points disagree with K and alpha")
        return sched


def ground_parameters(
    t: np.ndarray,
    lambda_fn: LambdaFn = const_one,
    sigma: float = 1.0,
    alpha: float = float("nan"),
    lambda_name: str = "const1",
) -> CascadeSchedule:
    """Step sizes from the flow discretization: eta_k = delta_k lambda(t_k) / sigma^2, mu = sigma^2."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 1 or t.size < 2 or t[0] != 0.0 or t[-1] != 1.0 or np.any(np.diff(t) <= 0):
        raise ConfigError("time points must increase strictly from 0 to 1")
    delta = np.diff(t)
    lam = np.array([lambda_fn(float(tk)) for tk in t[:-1]])
    if np.any(lam <= 0):
        raise ConfigError("lambda(t) must be positive")
    eta = delta * lam / sigma**2
    return CascadeSchedule(
        K=t.size - 1, alpha=float(alpha), sigma=float(sigma), t=t, delta=delta,
        eta=eta, lam=lam, mu=float(sigma**2), lambda_name=lambda_name,
    )


def build_schedule(K: int, alpha: float = 4.0, sigma: float = 1.0) -> CascadeSchedule:
    return ground_parameters(time_schedule(K, alpha), const_one, sigma, alpha)


# --------------------------------------------------------------------------
# target trajectory


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def ideal_state(x0, x1, t: float):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    _check_pair(x0, x1)
    return t * np.asarray(x1) + (1.0 - t) * np.asarray(x0)


def ideal_velocity(x_k, x0, x1, t_k: float, t_k1: float):
    """(x*_{t_{k+1}} - x_k) / (t_{k+1} - t_k), starting from the current state x_k."""
    if not t_k < t_k1 <= 1.0:
        raise ValueError(f"need t_k < t_k1 <= 1, got {t_k}, {t_k1}")
    _check_pair(x_k, x0)
    return (ideal_state(x0, x1, t_k1) - np.asarray(x_k)) / (t_k1 - t_k)


def predicted_velocity(x_k, x_k1, t_k: float, t_k1: float):
    if not t_k < t_k1 <= 1.0:
        raise ValueError(f"need t_k < t_k1 <= 1, got {t_k}, {t_k1}")
    _check_pair(x_k, x_k1)
    return (np.asarray(x_k1) - np.asarray(x_k)) / (t_k1 - t_k)


@dataclass
class VelocityPair:
    ideal: np.ndarray
    predicted: np.ndarray
    step_index: int = 0

    def __post_init__(self):
        _check_pair(self.ideal, self.predicted)


def _real_components(z) -> np.ndarray:
    z = np.asarray(z)
    if np.iscomplexobj(z):
        return np.stack([z.real, z.imag])
    return z.astype(np.float64)


def velocity_loss(pair: VelocityPair, norm: str = "L1") -> float:
    """Mean absolute (L1) or squared (L2) gap over all real components."""
    gap = _real_components(pair.ideal) - _real_components(pair.predicted)
    if norm == "L1":
        return float(np.mean(np.abs(gap)))
    if norm == "L2":
        return float(np.mean(gap * gap))
    raise ConfigError(f"velocity norm must be L1 or L2, got {norm!r}")


def flat_loss(recon_loss: float, velocity_losses, w_velocity: float) -> float:
    if w_velocity < 0:
        raise ConfigError("w_velocity must be nonnegative")
    total = recon_loss + w_velocity * float(sum(velocity_losses))
    if not np.isfinite(total):
        raise FloatingPointError("non-finite FLAT loss")
    return total


# --------------------------------------------------------------------------
# energy and conditional velocity field


@dataclass
class GaussianPrior:
    """Isotropic Gaussian prior N(mean, tau^2) with closed-form score."""

    mean: np.ndarray
    tau: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("prior tau must be positive")
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("prior mean must be finite")

    def score(self, x: np.ndarray) -> np.ndarray:
        return -(x - self.mean) / self.tau**2


def energy(x, y, mask: SamplingMask, prior: GaussianPrior, sigma: float = 1.0) -> float:
    """||Ax - y||^2 / (2 sigma^2) + ||x - m||^2 / (2 tau^2), normalizing constant dropped."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    r = apply_mask(x, mask) - y
    d = x - prior.mean
    return float(np.sum(np.abs(r) ** 2) / (2 * sigma**2) + np.sum(np.abs(d) ** 2) / (2 * prior.tau**2))


def analytic_velocity(x, t: float, y, mask: SamplingMask, prior: GaussianPrior,
                      lambda_fn: LambdaFn = const_one, sigma: float = 1.0) -> np.ndarray:
    """lambda(t) [score(x) - A^T(Ax - y) / sigma^2]."""
    lam = lambda_fn(t)
    return lam * (prior.score(x) - data_consistency(x, y, mask) / sigma**2)


def euler_step(x, t_k: float, delta_k: float, velocity_field: Callable) -> np.ndarray:
    if delta_k <= 0:
        raise ValueError("delta_k must be positive")
    return x + delta_k * velocity_field(x, t_k)


def euler_integrate(x0, schedule: CascadeSchedule, velocity_field: Callable) -> list[np.ndarray]:
    states = [np.asarray(x0)]
    for k in range(schedule.K):
        states.append(euler_step(states[-1], schedule.t[k], schedule.delta[k], velocity_field))
    return states
