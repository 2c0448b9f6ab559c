"""Closed-form check that a grounded cascade is one Euler step of the Gaussian-prior flow.

With prior N(m, tau^2) and constant lambda the conditional velocity field

    v(x) = lambda [-(x - m) / tau^2 - A^T(Ax - y) / sigma^2]

is diagonal in k-space, so each frequency follows dx/dt = b - a x with

    a = lambda (1/tau^2 + m_f/sigma^2),   b = lambda (m_f y / sigma^2 + m / tau^2),

and x(t) = b/a + (x(0) - b/a) exp(-a t).  The checks here run the network's own
cascade code with a regularizer whose weights realize the prior score exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .autodiff import ConfigError, ContractError
from .flow import GaussianPrior, analytic_velocity, build_schedule, euler_step, ground_parameters, time_schedule
from .model import DivergenceError, UnrolledModel, cascade_update
from .physics import SamplingMask, apply_forward, fft2_centered, make_equispaced_mask


@dataclass
class LinearFlowCoefficients:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if np.any(~np.isfinite(self.a)) or np.any(self.a <= 0):
            raise ContractError("flow coefficients need a > 0 everywhere")

    @property
    def fixed_point(self) -> np.ndarray:
        return self.b / self.a

    @classmethod
    def from_problem(cls, y, mask: SamplingMask, prior: GaussianPrior, sigma: float = 1.0,
                     lam: float = 1.0) -> "LinearFlowCoefficients":
        if sigma <= 0 or lam <= 0:
            raise ContractError("sigma and lambda must be positive")
        mf = np.broadcast_to(mask.column_weights(), np.shape(y))
        a = lam * (1.0 / prior.tau**2 + mf / sigma**2)
        b = lam * (mf * y / sigma**2 + prior.mean / prior.tau**2)
        return cls(np.array(a, dtype=np.float64), np.asarray(b, dtype=np.complex128))


def closed_form_solution(x0, t: float, coeffs: LinearFlowCoefficients) -> np.ndarray:
    at = coeffs.a * t
    # weighted form is exact at t = 0 and keeps precision for small a t
    return np.exp(-at) * np.asarray(x0) - np.expm1(-at) * coeffs.fixed_point


def rk4_integrate(x0, t_end: float, n_steps: int, velocity_field: Callable, t0: float = 0.0) -> np.ndarray:
    """Classical Runge-Kutta with n_steps uniform steps; velocity_field(x, t)."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    h = (t_end - t0) / n_steps
    x = np.asarray(x0)
    for i in range(n_steps):
        t = t0 + i * h
        k1 = velocity_field(x, t)
        k2 = velocity_field(x + 0.5 * h * k1, t + 0.5 * h)
        k3 = velocity_field(x + 0.5 * h * k2, t + 0.5 * h)
        k4 = velocity_field(x + h * k3, t + h)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(i, "rk4 state")
    return x


# --------------------------------------------------------------------------
# a regularizer network that computes the Gaussian score exactly


def score_network(schedule, tau: float, mean_value: complex, channels=(2, 16, 16, 2)) -> UnrolledModel:
    """Unrolled model whose every f_theta maps img to -(img - c) / tau^2.

    The first layer splits each channel into positive and negative parts, the
    second passes them through, the third recombines them.  ReLU(u) - ReLU(-u) = u,
    so the map is linear and exact.  The constant image c is the prior mean.
    """
    c_in, hid1, hid2, c_out = channels
    if hid1 < 2 * c_in or hid2 < 2 * c_in or c_out != c_in:
        raise ConfigError("hidden layers too narrow for the score construction")
    w0 = np.zeros((hid1, c_in, 3, 3))
    for c in range(c_in):
        w0[2 * c, c, 1, 1] = 1.0
        w0[2 * c + 1, c, 1, 1] = -1.0
    w1 = np.zeros((hid2, hid1, 3, 3))
    for j in range(2 * c_in):
        w1[j, j, 1, 1] = 1.0
    w2 = np.zeros((c_out, hid2, 3, 3))
    for c in range(c_in):
        w2[c, 2 * c, 1, 1] = -1.0 / tau**2
        w2[c, 2 * c + 1, 1, 1] = 1.0 / tau**2
    bias = np.array([mean_value.real, mean_value.imag]) / tau**2
    params = {}
    for k in range(schedule.K):
        pre = f"c{k:02d}"
        params.update({f"{pre}.conv0.w": w0, f"{pre}.conv0.b": np.zeros(hid1),
                       f"{pre}.conv1.w": w1, f"{pre}.conv1.b": np.zeros(hid2),
                       f"{pre}.conv2.w": w2, f"{pre}.conv2.b": bias})
    return UnrolledModel(schedule, params, False, True, tuple(channels), 0)


# --------------------------------------------------------------------------
# verification


@dataclass
class VerifyConfig:
    n_instances: int = 20
    size: int = 16
    K: int = 12
    alpha: float = 4.0
    K_values: tuple[int, ...] = (6, 12, 24, 48)
    convergence_alpha: float = 4.0
    lam: float = 1.0
    seed: int = 0
    step_tolerance: float = 1e-12
    slope_band: tuple[float, float] = (0.8, 1.2)
    rk4_steps: int = 256

    @classmethod
    def from_json(cls, doc: dict) -> "VerifyConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown verification keys {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.K_values = tuple(int(k) for k in cfg.K_values)
        cfg.slope_band = tuple(float(s) for s in cfg.slope_band)
        return cfg


@dataclass
class Instance:
    sigma: float
    tau: float
    mean_value: complex
    mask: SamplingMask
    y: np.ndarray
    x0: np.ndarray

    @property
    def prior(self) -> GaussianPrior:
        # a constant image has all its k-space energy at the centre frequency
        h, w = self.y.shape
        return GaussianPrior(fft2_centered(np.full((h, w), self.mean_value)), self.tau)


def random_instance(rng: np.random.Generator, size: int = 16) -> Instance:
    acc = int(rng.choice([2, 4, 8]))
    mask = make_equispaced_mask(size, acc, float(rng.uniform(0.05, 0.3)), int(rng.integers(acc)))
    # keeps a <= 0.9, so even the first K=6 step (delta ~ 0.6) is inside Euler's asymptotic regime
    sigma = float(rng.uniform(1.5, 3.0))
    tau = float(rng.uniform(1.5, 3.0))
    mean_value = complex(rng.normal(), rng.normal())
    truth = rng.normal(size=(size, size)) + 1j * rng.normal(size=(size, size))
    y = apply_forward(truth, mask)
    return Instance(sigma, tau, mean_value, mask, y, y.copy())


@dataclass
class VerificationReport:
    n_instances: int
    max_step_discrepancy: float
    step_tolerance: float
    K_values: list[int]
    global_errors: list[list[float]]
    slopes: list[float]
    slope_min: float
    slope_max: float
    rk4_max_error: float
    step_identity_pass: bool
    convergence_pass: bool
    passed: bool
    per_instance_discrepancy: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def summary(self) -> str:
        lines = [
            f"instances            {self.n_instances}",
            f"max step discrepancy {self.max_step_discrepancy:.3e} (tol {self.step_tolerance:.0e})"
            f"  {'PASS' if self.step_identity_pass else 'FAIL'}",
            f"convergence order    {self.slope_min:.3f} .. {self.slope_max:.3f} over K={self.K_values}"
            f"  {'PASS' if self.convergence_pass else 'FAIL'}",
            f"rk4 vs closed form   {self.rk4_max_error:.3e}",
        ]
        return "\n".join(lines)


def fit_order(K_values, errors) -> float:
    """Least-squares slope of -log(error) against log(K)."""
    slope = np.polyfit(np.log(np.asarray(K_values, dtype=np.float64)), np.log(np.asarray(errors)), 1)[0]
    return float(-slope)


def _field(inst: Instance, lam: float):
    prior = inst.prior
    return lambda x, t: analytic_velocity(x, t, inst.y, inst.mask, prior, lambda t_: lam, inst.sigma)


def step_discrepancy(inst: Instance, K: int, alpha: float, lam: float = 1.0) -> float:
    """Max |cascade - Euler| over the K steps, both taken from the same state."""
    sched = ground_parameters(time_schedule(K, alpha), lambda t: lam, inst.sigma, alpha, "const")
    model = score_network(sched, inst.tau, inst.mean_value)
    v = _field(inst, lam)
    x = inst.x0
    worst = 0.0
    for k in range(K):
        net = cascade_update(x, inst.y, inst.mask, k, model)
        ref = euler_step(x, sched.t[k], sched.delta[k], v)
        if not np.all(np.isfinite(net)):
            raise DivergenceError(k)
        worst = max(worst, float(np.max(np.abs(net - ref))))
        x = ref
    return worst


def euler_global_error(inst: Instance, K: int, alpha: float, lam: float = 1.0) -> float:
    sched = ground_parameters(time_schedule(K, alpha), lambda t: lam, inst.sigma, alpha, "const")
    v = _field(inst, lam)
    x = inst.x0
    for k in range(K):
        x = euler_step(x, sched.t[k], sched.delta[k], v)
    if not np.all(np.isfinite(x)):
        raise DivergenceError(K - 1)
    coeffs = LinearFlowCoefficients.from_problem(inst.y, inst.mask, inst.prior, inst.sigma, lam)
    return float(np.linalg.norm(x - closed_form_solution(inst.x0, 1.0, coeffs)))


def verify_correspondence(config: VerifyConfig | None = None) -> VerificationReport:
    cfg = config or VerifyConfig()
    if cfg.n_instances < 1 or len(cfg.K_values) < 2:
        raise ConfigError("need at least one instance and two K values")
    build_schedule(cfg.K, cfg.alpha)  # validates K and alpha
    rng = np.random.default_rng(cfg.seed)
    disc, errors, slopes, rk4_err = [], [], [], 0.0
    for _ in range(cfg.n_instances):
        inst = random_instance(rng, cfg.size)
        disc.append(step_discrepancy(inst, cfg.K, cfg.alpha, cfg.lam))
        errs = [euler_global_error(inst, K, cfg.convergence_alpha, cfg.lam) for K in cfg.K_values]
        errors.append(errs)
        slopes.append(fit_order(cfg.K_values, errs))
        coeffs = LinearFlowCoefficients.from_problem(inst.y, inst.mask, inst.prior, inst.sigma, cfg.lam)
        ref = rk4_integrate(inst.x0, 1.0, cfg.rk4_steps, _field(inst, cfg.lam))
        rk4_err = max(rk4_err, float(np.max(np.abs(ref - closed_form_solution(inst.x0, 1.0, coeffs)))))
    lo, hi = cfg.slope_band
    step_ok = max(disc) <= cfg.step_tolerance
    conv_ok = all(lo <= s <= hi for s in slopes)
    return VerificationReport(
        n_instances=cfg.n_instances, max_step_discrepancy=max(disc), step_tolerance=cfg.step_tolerance,
        K_values=list(cfg.K_values), global_errors=errors, slopes=slopes, slope_min=min(slopes),
        slope_max=max(slopes), rk4_max_error=rk4_err, step_identity_pass=step_ok,
        convergence_pass=conv_ok, passed=step_ok and conv_ok, per_instance_discrepancy=disc,
    )
