"""Randomized quasi-Monte Carlo laboratory for singular lognormal integrands."""

from __future__ import annotations

__version__ = "0.1.0"
