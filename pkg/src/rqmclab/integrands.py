"""Integrands on the open unit cube and two importance-sampling wrappers.

Every integrand maps a batch ``t`` of shape ``(n, s)`` to ``n`` values.  Those
that come from a function of standard normal inputs also expose
``gaussian(y)``, the same function before the inverse-CDF transform; the
scaled-normal wrapper needs that view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, runtime_checkable

import numpy as np
from scipy import optimize, special

from . import lds
from .errors import ConfigError
from .gauss import inv_norm

# smallest argument passed to an inner integrand after the beta-like inverse
T_FLOOR = 1e-300
T_CEIL = 1.0 - 2.0 ** -53


@runtime_checkable
class Integrand(Protocol):
    s: int

    def __call__(self, t: np.ndarray) -> np.ndarray: ...


def _as_batch(t, s: int) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.ndim == 1:
        t = t[None, :]
    if t.shape[-1] != s:
        raise ValueError(f"expected {s} coordinates, got {t.shape[-1]}")
    return t


def exact_mean(g) -> float | None:
    return getattr(g, "exact_mean", None)


@dataclass(frozen=True)
class LognormalProduct:
    """``exp(sum_j sigma_j inv_norm(t_j))`` with known mean ``prod exp(sigma_j^2 / 2)``."""

    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if np.any(sigma <= 0):
            raise ConfigError("sigma must be positive")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)

    @property
    def s(self) -> int:
        return len(self.sigma)

    @property
    def exact_mean(self) -> float:
        return float(np.exp(0.5 * np.sum(self.sigma ** 2)))

    def gaussian(self, y) -> np.ndarray:
        y = _as_batch(y, self.s)
        return np.exp((y * self.sigma).sum(axis=1))

    def __call__(self, t) -> np.ndarray:
        return self.gaussian(inv_norm(_as_batch(t, self.s)))


@dataclass(frozen=True)
class Constant:
    """Constant integrand, mostly a test fixture for the pilot optimizers."""

    s: int
    value: float = 1.0

    @property
    def exact_mean(self) -> float:
        return self.value

    def gaussian(self, y) -> np.ndarray:
        return np.full(_as_batch(y, self.s).shape[0], self.value)

    def __call__(self, t) -> np.ndarray:
        return np.full(_as_batch(t, self.s).shape[0], self.value)


@dataclass(frozen=True)
class FunctionIntegrand:
    """Adapter for a plain vectorized callable on Gaussian inputs."""

    s: int
    func: Callable[[np.ndarray], np.ndarray]
    exact_mean: float | None = None

    def gaussian(self, y) -> np.ndarray:
        return np.asarray(self.func(_as_batch(y, self.s)), dtype=float)

    def __call__(self, t) -> np.ndarray:
        return self.gaussian(inv_norm(_as_batch(t, self.s)))


# scaled-normal proposal ----------------------------------------------------


@dataclass(frozen=True)
class ScaledNormalIS:
    """Sample the Gaussian inputs from ``N(0, alpha_j^2)`` instead of ``N(0, 1)``.

    With ``y = inv_norm(t)`` the weighted integrand is
    ``prod(alpha) * nu(alpha * y) * prod exp(-y^2 (alpha^2 - 1) / 2)``.
    """

    inner: object
    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.broadcast_to(np.asarray(self.alpha, dtype=float), (self.inner.s,)).copy()
        if np.any(alpha < 1.0):
            raise ConfigError("scale factors below 1 inflate the variance and are rejected")
        if not hasattr(self.inner, "gaussian"):
            raise ConfigError("inner integrand has no Gaussian-domain view")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    @property
    def s(self) -> int:
        return self.inner.s

    @property
    def exact_mean(self):
        return exact_mean(self.inner)

    def __call__(self, t) -> np.ndarray:
        y = inv_norm(_as_batch(t, self.s))
        a = self.alpha
        log_w = (-0.5 * y * y * (a * a - 1.0)).sum(axis=1) + float(np.sum(np.log(a)))
        return self.inner.gaussian(y * a) * np.exp(log_w)


# beta-like proposal --------------------------------------------------------


def _check_beta(beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if np.any((beta <= 0) | (beta > 1)):
        raise ConfigError("beta must lie in (0, 1]")
    return beta


def _beta_norm(beta):
    return beta * 0.5 ** (1.0 - beta)


def beta_like_pdf(t, beta):
    """Density ``c t^(beta-1)`` on (0, 1/2], mirrored about 1/2."""
    beta = _check_beta(beta)
    t = np.asarray(t, dtype=float)
    near = np.minimum(t, 1.0 - t)
    return _beta_norm(beta) * near ** (beta - 1.0)


def beta_like_cdf(t, beta):
    beta = _check_beta(beta)
    t = np.asarray(t, dtype=float)
    c = _beta_norm(beta)
    lower = c / beta * np.minimum(t, 1.0 - t) ** beta
    return np.where(t <= 0.5, lower, 1.0 - lower)


def beta_like_inv_cdf(w, beta):
    beta = _check_beta(beta)
    w = np.asarray(w, dtype=float)
    q = np.minimum(w, 1.0 - w)
    lower = 0.5 * (2.0 * q) ** (1.0 / beta)
    return np.where(w <= 0.5, lower, 1.0 - lower)


@dataclass(frozen=True)
class BetaLikeIS:
    """Importance sampling with a symmetric power-law density that piles mass at 0 and 1."""

    inner: object
    beta: np.ndarray

    def __post_init__(self):
        beta = np.broadcast_to(_check_beta(self.beta), (self.inner.s,)).copy()
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @property
    def s(self) -> int:
        return self.inner.s

    @property
    def exact_mean(self):
        return exact_mean(self.inner)

    def __call__(self, w) -> np.ndarray:
        w = _as_batch(w, self.s)
        t = np.clip(beta_like_inv_cdf(w, self.beta), T_FLOOR, T_CEIL)
        log_rho = np.log(beta_like_pdf(t, self.beta)).sum(axis=1)
        return self.inner(t) * np.exp(-log_rho)


# pilot optimizers ----------------------------------------------------------

ETA = 1e-6
ALPHA_STARTS = (1.5, 1.1, 2.0)
BETA_STARTS = (0.7, 0.9, 0.5)
DEFAULT_PILOT_N = 2 ** 12


@dataclass
class PilotResult:
    """Outcome of a pilot search: chosen parameters, objective values and trace."""

    kind: str
    params: np.ndarray
    objective: float
    baseline_objective: float
    trace: list[tuple[int, int, float]] = field(default_factory=list)
    fallback: bool = False
    message: str = ""

    @property
    def improvement(self) -> float:
        return 1.0 - self.objective / self.baseline_objective


def pilot_points(pilot_n: int, seed: int, s: int) -> np.ndarray:
    """Scrambled Sobol' points from the pilot stream, disjoint from the replicate streams."""
    if pilot_n < 1 or pilot_n & (pilot_n - 1):
        raise ConfigError(f"pilot size must be a power of two, got {pilot_n}")
    gen = lds.SobolGenerator(s)
    state = lds.fresh_scramble(seed, 0, s, stream=lds.STREAM_PILOT)
    return gen.points(pilot_n, state)


def _nelder_mead(objective, starts, s, kind, to_params, from_params, baseline) -> PilotResult:
    trace: list[tuple[int, int, float]] = []
    best_x, best_f = None, math.inf
    for restart, p0 in enumerate(starts):
        z0 = np.full(s, from_params(p0))
        f0 = objective(z0)
        shrink = 0
        while not np.isfinite(f0) and shrink < 20:
            # move the start toward the identity proposal
            p0 = 1.0 + 0.5 * (p0 - 1.0)
            z0 = np.full(s, from_params(p0))
            f0 = objective(z0)
            shrink += 1
        if not np.isfinite(f0):
            continue
        step = [0]

        def tracked(z, restart=restart):
            f = objective(z)
            step[0] += 1
            trace.append((restart, step[0], float(f)))
            return f if np.isfinite(f) else math.inf

        res = optimize.minimize(
            tracked,
            z0,
            method="Nelder-Mead",
            options={"xatol": 1e-6, "fatol": 1e-12, "maxiter": 400 * max(s, 1), "adaptive": s > 2},
        )
        if res.fun < best_f:
            best_x, best_f = res.x, float(res.fun)
    if best_x is None:
        ident = np.ones(s)
        return PilotResult(kind, ident, baseline, baseline, trace, True, "objective not finite near any start")
    params = to_params(best_x)
    if not best_f <= baseline:
        return PilotResult(kind, np.ones(s), baseline, baseline, trace, False, "identity proposal was best")
    return PilotResult(kind, params, best_f, baseline, trace)


def alpha_objective(alpha, nu_sq: np.ndarray, y_sq: np.ndarray) -> float:
    """Pilot estimate of the second moment of the scaled-normal integrand.

    ``prod(alpha) * mean(nu(y)^2 * exp(-sum_j y_j^2 (1 - 1/alpha_j^2) / 2))``, evaluated
    in log space so large integrand values do not overflow.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0) or not np.all(np.isfinite(alpha)):
        return math.inf
    log_terms = np.log(nu_sq) - 0.5 * (y_sq * (1.0 - 1.0 / alpha ** 2)).sum(axis=1)
    val = float(np.sum(np.log(alpha))) + float(special.logsumexp(log_terms)) - math.log(len(nu_sq))
    return math.exp(val) if val < 709 else math.inf


def optimize_alpha(nu, pilot_n: int = DEFAULT_PILOT_N, seed: int = 0, s: int | None = None) -> PilotResult:
    """Choose per-dimension scale factors ``alpha >= 1`` by minimizing a pilot second moment.

    Parameters
    ----------
    nu : integrand with a ``gaussian`` method, or a callable on Gaussian batches
    pilot_n : power-of-two pilot size
    seed : master seed; the pilot uses its own stream
    s : dimension, defaults to ``nu.s``
    """
    s = s if s is not None else nu.s
    gauss_fn = nu.gaussian if hasattr(nu, "gaussian") else nu
    y = inv_norm(pilot_points(pilot_n, seed, s))
    with np.errstate(over="ignore"):
        vals = np.asarray(gauss_fn(y), dtype=float)
    nu_sq = np.maximum(vals * vals, np.finfo(float).tiny)
    y_sq = y * y

    def to_params(z):
        return np.maximum(1.0, 1.0 - ETA + np.exp(np.asarray(z)))

    def from_params(a):
        return math.log(a - 1.0 + ETA)

    def objective(z):
        return alpha_objective(to_params(z), nu_sq, y_sq)

    baseline = alpha_objective(np.ones(s), nu_sq, y_sq)
    return _nelder_mead(objective, ALPHA_STARTS, s, "alpha", to_params, from_params, baseline)


def beta_objective(beta, g_sq: np.ndarray, t: np.ndarray) -> float:
    """Pilot estimate ``mean(g(t)^2 / rho_beta(t))`` of the beta-like second moment."""
    beta = np.asarray(beta, dtype=float)
    if np.any((beta <= 0) | (beta > 1)):
        return math.inf
    log_rho = np.log(beta_like_pdf(t, beta)).sum(axis=1)
    val = float(special.logsumexp(np.log(g_sq) - log_rho)) - math.log(len(g_sq))
    return math.exp(val) if val < 709 else math.inf


def optimize_beta(g, pilot_n: int = DEFAULT_PILOT_N, seed: int = 0, s: int | None = None) -> PilotResult:
    """Choose shape parameters in (0, 1] for the beta-like proposal from a pilot run.

    The search runs in logit coordinates, ``beta = min(1, (1 + eta) expit(z))``.
    """
    s = s if s is not None else g.s
    t = pilot_points(pilot_n, seed, s)
    with np.errstate(over="ignore"):
        vals = np.asarray(g(t), dtype=float)
    g_sq = np.maximum(vals * vals, np.finfo(float).tiny)

    def to_params(z):
        return np.minimum(1.0, (1.0 + ETA) * special.expit(np.asarray(z)))

    def from_params(b):
        return float(special.logit(b / (1.0 + ETA)))

    def objective(z):
        return beta_objective(to_params(z), g_sq, t)

    baseline = beta_objective(np.ones(s), g_sq, t)
    return _nelder_mead(objective, BETA_STARTS, s, "beta", to_params, from_params, baseline)
