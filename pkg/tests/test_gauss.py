from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from rqmclab import gauss
from rqmclab.errors import DomainError

AS = gauss.InverseCdfVariant.AS_26_2_23
REF = gauss.InverseCdfVariant.REFINED


def _grid():
    pts = [10.0 ** -k for k in range(1, 13)]
    pts += [1 - p for p in pts]
    pts += list(np.linspace(0.01, 0.99, 99))
    pts = sorted(set(pts))
    mids = [(a + b) / 2 for a, b in zip(pts, pts[1:])]
    return np.array(sorted(pts + mids))


def test_constants_are_the_published_ones():
    assert (gauss.C0, gauss.C1, gauss.C2) == (2.515517, 0.802853, 0.010328)
    assert (gauss.D1, gauss.D2, gauss.D3) == (1.432788, 0.189269, 0.001308)


def test_median():
    assert abs(gauss.inv_norm(0.5, AS)) < 4.5e-4
    assert abs(gauss.inv_norm(0.5, REF)) < 1e-12


def test_as_variant_error_bound():
    t = _grid()
    assert np.max(np.abs(gauss.inv_norm(t, AS) - gauss.inv_norm(t, REF))) < 4.5e-4


def test_known_quantile():
    # high-precision bisection value
    mpmath.mp.dps = 40
    target = mpmath.findroot(lambda x: mpmath.ncdf(x) - mpmath.mpf("0.975"), 1.96)
    assert abs(gauss.inv_norm(0.975, REF) - 1.959964) < 1e-5
    assert abs(gauss.inv_norm(0.975, REF) - float(target)) < 1e-14


def test_refined_accuracy_against_high_precision():
    mpmath.mp.dps = 50
    ts = np.concatenate([np.logspace(-15, -1, 40), np.linspace(0.05, 0.95, 41), 1 - np.logspace(-15, -1, 40)])
    worst = 0.0
    for t in ts:
        exact = float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(float(t)) - 1))
        worst = max(worst, abs(gauss.inv_norm(t, REF) - exact))
    assert worst <= 1e-12


def test_refined_matches_scipy_ndtri():
    t = np.linspace(1e-6, 1 - 1e-6, 10001)
    assert np.max(np.abs(gauss.inv_norm(t) - special.ndtri(t))) < 1e-12


def test_cdf_pdf_values():
    assert gauss.norm_cdf(0.0) == 0.5
    assert gauss.norm_pdf(0.0) == pytest.approx(0.3989422804014327, rel=1e-15)


def test_cdf_relative_accuracy():
    mpmath.mp.dps = 40
    for x in np.linspace(-8, 8, 161):
        exact = float(mpmath.ncdf(float(x)))
        assert abs(gauss.norm_cdf(x) - exact) <= 1e-14 * exact


@pytest.mark.parametrize("t", [0.01, 0.3, 0.999])
def test_round_trip(t):
    assert abs(gauss.norm_cdf(gauss.inv_norm(t)) - t) < 1e-11


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_domain(bad):
    with pytest.raises(DomainError):
        gauss.inv_norm(bad)
    with pytest.raises(DomainError):
        gauss.inv_norm(np.array([0.5, bad]))


@pytest.mark.parametrize("variant", [AS, REF])
def test_monotone(variant):
    t = np.linspace(1e-6, 1 - 1e-6, 100_000)
    assert np.all(np.diff(gauss.inv_norm(t, variant)) > 0)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-15, 0.5, exclude_max=True))
def test_antisymmetry(t):
    # use a pair whose sum is exactly 1 in floating point
    u = 1 - t
    v = 1 - u
    assert abs(gauss.inv_norm(u, REF) + gauss.inv_norm(v, REF)) <= 1e-12
    assert abs(gauss.inv_norm(u, AS) + gauss.inv_norm(v, AS)) <= 9e-4


@pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
def test_derivative_identity(t):
    h = 1e-6
    fd = (gauss.inv_norm(t + h) - gauss.inv_norm(t - h)) / (2 * h)
    expected = math.sqrt(2 * math.pi) * math.exp(gauss.inv_norm(t) ** 2 / 2)
    assert fd == pytest.approx(expected, rel=1e-6)
    assert gauss.inv_norm_derivative(t) == pytest.approx(expected, rel=1e-14)


def test_variant_parsing():
    assert gauss.InverseCdfVariant.parse("refined") is REF
    assert gauss.InverseCdfVariant.parse("AS_26_2_23") is AS
    with pytest.raises(ValueError):
        gauss.InverseCdfVariant.parse("newton")
