"""Finite-sample error model for randomized Sobol' quadrature of singular integrands.

The model assumes the integrand grows no faster than ``B prod_j t_j^(-A_j)``
near the corners of the cube, with every exponent below one.  The helpers here
evaluate corner probabilities, the optimal growth exponents for lognormal-type
integrands, the constants of the resulting error bound and closed-form tail
integrals of the growth envelope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DomainError
from .gauss import AS_ERROR

# tolerance below which two exponents are treated as equal
DISTINCT_GAP = 1e-9


@dataclass(frozen=True)
class GrowthSpec:
    """Inputs of the error model.

    ``coefficients`` are the per-dimension growth scales (lognormal volatilities
    or basis sup-norms).  ``C`` is the hyperbolic-set constant, ``eps`` the
    discrepancy exponent, ``delta_bar`` the spacing used to make exponents
    distinct and ``C_eps`` the star-discrepancy constant.
    """

    coefficients: tuple[float, ...]
    C: float = 1.0
    eps: float = 0.05
    delta_bar: float = 1e-6
    C_eps: float = 1.0

    def __post_init__(self):
        coeffs = tuple(float(c) for c in np.atleast_1d(self.coefficients))
        object.__setattr__(self, "coefficients", coeffs)
        if not coeffs or any(not c > 0 for c in coeffs):
            raise DomainError("growth coefficients must be positive")
        if not self.C > 0:
            raise DomainError("hyperbolic constant C must be positive")
        if not 0 < self.eps < 1:
            raise DomainError("discrepancy exponent must lie in (0, 1)")
        if not self.delta_bar > 0 or not self.C_eps > 0:
            raise DomainError("delta_bar and C_eps must be positive")

    @property
    def s(self) -> int:
        return len(self.coefficients)

    @property
    def sum_sq(self) -> float:
        return float(np.sum(np.square(self.coefficients)))


@dataclass(frozen=True)
class BoundEval:
    n: float
    A_star: np.ndarray
    B_star: float
    B_tilde: float
    C1: float
    C2: float
    bound_value: float
    rate_exponent: float
    out_of_range: bool = False
    notes: tuple[str, ...] = field(default_factory=tuple)

    @property
    def A_star_max(self) -> float:
        return float(np.max(self.A_star))

    def as_row(self) -> dict:
        return {
            "n": self.n,
            "A_star_max": self.A_star_max,
            "B_star": self.B_star,
            "B_tilde": self.B_tilde,
            "C1": self.C1,
            "C2": self.C2,
            "bound": self.bound_value,
            "rate_exponent": self.rate_exponent,
        }


# corner probabilities ------------------------------------------------------


def corner_probability(s: int, n: float, r: float, C: float) -> float:
    """Probability that the product of ``s`` uniforms is at most ``C n^-r``.

    Equals the regularized upper incomplete gamma ``Q(s, x)`` with
    ``x = r log n - log C``, evaluated as a finite Poisson sum.
    """
    x = r * math.log(n) - math.log(C)
    if not x > 0:
        raise DomainError(f"threshold exponent r log n - log C = {x} must be positive")
    return poisson_tail(s, x)


def poisson_tail(s: int, x: float) -> float:
    """``exp(-x) sum_{k<s} x^k / k!`` for integer ``s >= 1``."""
    term, total = 1.0, 1.0
    for k in range(1, s):
        term *= x / k
        total += term
    return math.exp(-x) * total


def pinelis_bound(s: int, x: float) -> float:
    """Closed-form upper bound on ``Q(s, x)``; requires ``s >= 2``."""
    if s < 2:
        raise DomainError("the incomplete-gamma bound needs s >= 2")
    if not x > 0:
        raise DomainError("x must be positive")
    b = math.gamma(s + 1) ** (1.0 / (s - 1))
    g = ((x + b) ** s - x ** s) / (s * b) * math.exp(-x)
    return g / math.gamma(s)


# hyperbolic set ------------------------------------------------------------


@dataclass(frozen=True)
class HyperbolicSet:
    n: float
    s: int
    C: float = 1.0

    def contains(self, t) -> bool:
        return in_hyperbolic_set(t, self.n, self.C)


def in_hyperbolic_set(t, n: float, C: float) -> bool:
    """True when ``prod_j min(t_j, 1 - t_j) >= C / n``."""
    t = np.asarray(t, dtype=float)
    return bool(np.prod(np.minimum(t, 1.0 - t)) >= C / n)


# growth exponents ----------------------------------------------------------


def anchor_optimum(sigma, delta: float) -> np.ndarray:
    """Anchor with ``prod v = delta`` maximizing ``sum sigma_j sqrt(-2 log v_j)``."""
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    sigma = np.asarray(sigma, dtype=float)
    z = sigma ** 2 / np.sum(sigma ** 2) * math.log(1.0 / delta)
    return np.exp(-z)


def anchor_objective(v, sigma) -> float:
    return float(np.sum(np.asarray(sigma) * np.sqrt(-2.0 * np.log(v))))


def growth_envelope(v, sigma) -> float:
    """Corner growth ``exp(sum sigma_j sqrt(-2 log v_j))`` of a lognormal product."""
    return math.exp(anchor_objective(v, sigma))


def local_growth(v_c, sigma) -> tuple[np.ndarray, float]:
    """Exponents and constant of the tangent bound of the growth envelope at ``v_c``."""
    v_c = np.asarray(v_c, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    z = -np.log(v_c)
    A = sigma / np.sqrt(2.0 * z)
    B = float(np.exp(np.sum(sigma * np.sqrt(z / 2.0))))
    return A, B


def _log_ratio(n: float, C: float) -> float:
    lr = math.log(n) - math.log(C)
    if not lr > 0:
        raise DomainError(f"need n > C, got n={n}, C={C}")
    return lr


def a_star(coefficients, n: float, C: float = 1.0) -> float:
    ss = float(np.sum(np.square(coefficients)))
    return math.sqrt(ss / (2.0 * _log_ratio(n, C)))


def b_star(coefficients, n: float, C: float = 1.0) -> float:
    ss = float(np.sum(np.square(coefficients)))
    return math.exp(math.sqrt(ss / 2.0 * _log_ratio(n, C)))


# error bound ---------------------------------------------------------------


def perturbed_exponents(a: float, s: int, delta_bar: float) -> np.ndarray:
    return a + delta_bar * np.arange(s, dtype=float)


def _phi_prime(A: np.ndarray) -> np.ndarray:
    # phi(x) = prod (x - A_j); phi'(A_j) = prod_{k != j} (A_j - A_k)
    diff = A[:, None] - A[None, :]
    np.fill_diagonal(diff, 1.0)
    return np.prod(diff, axis=1)


def _check_distinct(A: np.ndarray) -> None:
    if len(A) > 1 and np.min(np.diff(np.sort(A))) < DISTINCT_GAP:
        raise DomainError(
            "exponents closer than 1e-9: use the equal-exponent tail integral or perturb them"
        )


def _log_subset_sum(A: np.ndarray) -> float:
    """log of ``sum_m (1/A_m) prod_{j<m} (1 + 1/(A_m - A_j))`` for ascending ``A``."""
    logs = []
    for m in range(len(A)):
        gaps = A[m] - A[:m]
        logs.append(-math.log(A[m]) + float(np.sum(np.log1p(1.0 / gaps))))
    return float(special.logsumexp(logs))


def _safe_exp(x: float) -> float:
    return math.exp(x) if x < 709.0 else math.inf


def theorem_bound(spec: GrowthSpec, n: float) -> BoundEval:
    """Assemble the error bound at sample size ``n``.

    Exponents at or above one put the model out of range; the result is then
    flagged and carries infinite constants instead of raising.
    """
    s, C = spec.s, spec.C
    sigma = np.asarray(spec.coefficients)
    notes: list[str] = []
    if C / n > 1:
        notes.append("C/n exceeds 1")
    a = a_star(sigma, n, C)
    A = perturbed_exponents(a, s, spec.delta_bar)
    max_a = float(A.max())
    rate = -1.0 + spec.eps + max_a
    K1 = math.exp(AS_ERROR * float(sigma.sum())) * math.sqrt(2 * math.pi) * math.exp(AS_ERROR ** 2 / 2)
    K1 *= float(np.prod(sigma))
    Bs = b_star(sigma, n, C) * K1
    if max_a >= 1.0:
        notes.append("growth exponent >= 1: model out of range")
        return BoundEval(float(n), A, Bs, math.inf, math.inf, math.inf, math.inf, rate, True, tuple(notes))
    _check_distinct(A)
    Bt = 2.0 ** s * Bs * float(np.prod(1.0 + 1.0 / A))
    terms = np.abs(C ** (1.0 - A) / ((A - 1.0) * _phi_prime(A)))
    C1 = 2.0 ** (s + 1) * Bt * float(terms.sum())
    log_c2 = math.log(spec.C_eps * Bs) + s * math.log(2.5) + _log_subset_sum(A) - max_a * math.log(C)
    C2 = _safe_exp(log_c2)
    value = C1 * n ** (-1.0 + max_a) + C2 * n ** rate
    return BoundEval(float(n), A, Bs, Bt, C1, C2, value, rate, False, tuple(notes))


# tail integrals ------------------------------------------------------------


def sobol_tail_integral(A, eps: float) -> float:
    """Integral of ``prod_j t_j^(-A_j)`` over ``{t in [0,1]^s : prod t_j < eps}``.

    Exponents must be pairwise distinct (gap at least 1e-9) and below one.
    """
    A = np.atleast_1d(np.asarray(A, dtype=float))
    if np.any(A >= 1):
        raise DomainError("exponents must be below 1")
    if not 0 < eps <= 1:
        raise DomainError("eps must lie in (0, 1]")
    _check_distinct(A)
    return float(-np.sum(eps ** (1.0 - A) / ((A - 1.0) * _phi_prime(A))))


def sobol_tail_integral_equal(A: float, s: int, eps: float) -> float:
    """Same integral with all ``s`` exponents equal to ``A``."""
    if A >= 1:
        raise DomainError("exponent must be below 1")
    if not 0 < eps <= 1:
        raise DomainError("eps must lie in (0, 1]")
    L = -math.log(eps)
    total = 0.0
    for k in range(1, s + 1):
        total += eps ** (1.0 - A) / (1.0 - A) ** k * L ** (s - k) / math.factorial(s - k)
    return total


def full_integral(A) -> float:
    """``prod_j 1/(1 - A_j)``, the integral over the whole cube."""
    A = np.atleast_1d(np.asarray(A, dtype=float))
    return float(np.prod(1.0 / (1.0 - A)))


def bulk_integral(A, eps: float) -> float:
    """Integral over ``{prod t_j >= eps}``: the full integral minus the tail."""
    return full_integral(A) - sobol_tail_integral(A, eps)


# rates ---------------------------------------------------------------------


def example_bound_monotone(c: float, n1: float, n: float) -> tuple[float, float]:
    """Model bound ``exp(sqrt(c log m)) n^(-1 + sqrt(c / log m))`` at ``m = n`` and ``m = n1``."""
    if not n >= n1 > 1:
        raise DomainError("need n >= n1 > 1")

    def at(m: float) -> float:
        lm = math.log(m)
        return math.exp(math.sqrt(c * lm)) * n ** (-1.0 + math.sqrt(c / lm))

    return at(n), at(n1)


def predicted_is_exponent(kind: str, params, eps: float, delta: float) -> float:
    """Predicted error exponent after importance sampling.

    ``kind`` is ``scaled_normal`` (params are the scale factors) or
    ``beta_like`` (params are the shape parameters in (0, 1]).
    """
    p = np.atleast_1d(np.asarray(params, dtype=float))
    if kind == "scaled_normal":
        if np.any(p <= 0):
            raise DomainError("scale factors must be positive")
        excess = 1.0 - float(np.min(p)) ** 2
    elif kind == "beta_like":
        if np.any((p <= 0) | (p > 1)):
            raise DomainError("shape parameters must lie in (0, 1]")
        excess = 1.0 - float(np.min(1.0 / p))
    else:
        raise ValueError(f"unknown proposal kind {kind!r}")
    return -1.0 + eps + delta + max(0.0, excess)
