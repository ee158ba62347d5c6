"""Standard normal density, distribution function and quantile function."""

from __future__ import annotations

import enum
import math

import numpy as np
from scipy import special

from .errors import DomainError

SQRT2 = math.sqrt(2.0)
SQRT2PI = math.sqrt(2.0 * math.pi)
INV_SQRT2PI = 1.0 / SQRT2PI

# Rational approximation constants (Abramowitz and Stegun 26.2.23).
C0, C1, C2 = 2.515517, 0.802853, 0.010328
D1, D2, D3 = 1.432788, 0.189269, 0.001308
# Absolute error bound of the rational approximation on either half.
AS_ERROR = 4.5e-4


class InverseCdfVariant(str, enum.Enum):
    AS_26_2_23 = "AS_26_2_23"
    REFINED = "Refined"

    @classmethod
    def parse(cls, value: "InverseCdfVariant | str") -> "InverseCdfVariant":
        if isinstance(value, cls):
            return value
        for member in cls:
            if str(value).lower() in (member.value.lower(), member.name.lower()):
                return member
        raise ValueError(f"unknown inverse-CDF variant {value!r}")


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    out = INV_SQRT2PI * np.exp(-0.5 * x * x)
    return out[()] if out.ndim == 0 else out


def norm_cdf(x):
    """Standard normal distribution function via ``erfc``; accurate in both tails."""
    x = np.asarray(x, dtype=float)
    out = 0.5 * special.erfc(-x / SQRT2)
    return out[()] if out.ndim == 0 else out


def _as_lower(q: np.ndarray) -> np.ndarray:
    # valid for 0 < q <= 1/2, returns a value <= 0
    tau = np.sqrt(-2.0 * np.log(q))
    return -(tau - (C0 + C1 * tau + C2 * tau * tau) / (1.0 + D1 * tau + D2 * tau * tau + D3 * tau ** 3))


def _halley_lower(x: np.ndarray, q: np.ndarray) -> np.ndarray:
    # Solve norm_cdf(x) = q for x <= 0, where the lower tail is computed without cancellation.
    for _ in range(2):
        r = (norm_cdf(x) - q) / norm_pdf(x)
        x = x - r / (1.0 + 0.5 * x * r)
    return x


def _check(t: np.ndarray) -> None:
    bad = ~((t > 0.0) & (t < 1.0))
    if np.any(bad):
        first = t[bad].flat[0] if t.ndim else t
        raise DomainError(f"inverse normal CDF needs 0 < t < 1, got {first!r}")


def inv_norm(t, variant: InverseCdfVariant | str = InverseCdfVariant.REFINED):
    """Standard normal quantile.

    Parameters
    ----------
    t : float or array_like
        Probabilities in the open interval (0, 1).
    variant : InverseCdfVariant or str
        ``AS_26_2_23`` for the plain rational approximation (error below 4.5e-4),
        ``Refined`` to polish it with two Halley steps (error near 1e-15).

    Returns
    -------
    float or ndarray
        Quantiles with the shape of ``t``.

    Raises
    ------
    DomainError
        If any entry is outside (0, 1) or is NaN.
    """
    variant = InverseCdfVariant.parse(variant)
    t = np.asarray(t, dtype=float)
    _check(t)
    upper = t > 0.5
    # 1 - t is exact for t > 1/2, so each half is solved as a lower tail.
    q = np.where(upper, 1.0 - t, t)
    x = _as_lower(q)
    if variant is InverseCdfVariant.REFINED:
        x = _halley_lower(x, q)
    x = np.where(upper, -x, x)
    return x[()] if x.ndim == 0 else x


def inv_norm_derivative(t):
    """Derivative of the quantile function, ``sqrt(2 pi) exp(x^2 / 2)`` at ``x = inv_norm(t)``."""
    x = inv_norm(t)
    return SQRT2PI * np.exp(0.5 * np.asarray(x) ** 2)
