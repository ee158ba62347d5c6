"""Replicated randomized-QMC means, RMSE and log-log rate fits."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lds
from .errors import ConfigError, NumericError

CHUNK = 1 << 14


@dataclass(frozen=True)
class RqmcConfig:
    """Sample-size grid, replicate count and seeding of an RQMC study."""

    n_grid: tuple[int, ...]
    replicates: int = 30
    seed: int = 12345
    threads: int = 1
    chunk: int = CHUNK

    def __post_init__(self):
        grid = tuple(int(n) for n in self.n_grid)
        object.__setattr__(self, "n_grid", grid)
        if not grid:
            raise ConfigError("empty sample-size grid")
        for n in grid:
            if n < 1 or n & (n - 1):
                raise ConfigError(f"grid value {n} is not a power of two")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("grid must be strictly increasing")
        if self.replicates < 2:
            raise ConfigError("need at least two replicates for an RMSE")
        if self.threads < 1 or self.chunk < 1:
            raise ConfigError("threads and chunk must be positive")

    @classmethod
    def powers(cls, lo: int, hi: int, **kw) -> "RqmcConfig":
        return cls(tuple(2 ** m for m in range(lo, hi + 1)), **kw)


@dataclass
class RqmcResult:
    """``means[i, r]`` is replicate ``r``'s average over the first ``n_grid[i]`` points."""

    n_grid: tuple[int, ...]
    means: np.ndarray
    exact: float | None = None

    @property
    def replicates(self) -> int:
        return self.means.shape[1]

    @property
    def pooled(self) -> np.ndarray:
        return self.means.mean(axis=1)

    @property
    def rmse(self) -> np.ndarray:
        return rmse_from_means(self.means)

    def quantiles(self, probs=(0.05, 0.25, 0.5, 0.75, 0.95)) -> np.ndarray:
        """Replicate-mean quantiles per grid point, shape ``(len(n_grid), len(probs))``."""
        return np.quantile(self.means, probs, axis=1).T


def rmse_from_means(means: np.ndarray) -> np.ndarray:
    """Standard error of the pooled mean, ``sqrt(sum (I_r - I)^2 / (R (R - 1)))``."""
    means = np.atleast_2d(means)
    R = means.shape[1]
    dev = means - means.mean(axis=1, keepdims=True)
    return np.sqrt((dev * dev).sum(axis=1) / (R * (R - 1)))


def _replicate_means(integrand, gen: lds.SobolGenerator, digits: np.ndarray, cfg: RqmcConfig, r: int) -> np.ndarray:
    state = lds.fresh_scramble(cfg.seed, r, gen.s)
    n_max = cfg.n_grid[-1]
    values = np.empty(n_max)
    for lo in range(0, n_max, cfg.chunk):
        hi = min(lo + cfg.chunk, n_max)
        pts = lds.to_unit(state.apply(digits[lo:hi]))
        with np.errstate(over="ignore", invalid="ignore"):
            v = np.asarray(integrand(pts), dtype=float)
        bad = ~np.isfinite(v)
        if bad.any():
            i = lo + int(np.argmax(bad))
            n_at = next(n for n in cfg.n_grid if n > i)
            raise NumericError(f"non-finite integrand value at n={n_at}, replicate={r}, point={i}")
        values[lo:hi] = v
    return np.array([np.sum(values[:n]) / n for n in cfg.n_grid])


def estimate(integrand, config: RqmcConfig, generator: lds.SobolGenerator | None = None) -> RqmcResult:
    """Replicated RQMC averages of ``integrand`` on every grid size.

    Each replicate uses its own scramble, keyed by the replicate index, and
    reuses one point stream so smaller sizes are prefixes of larger ones.
    Replicates may run on several threads; results are gathered in index order.
    """
    gen = generator or lds.SobolGenerator(integrand.s)
    digits = gen.digits(config.n_grid[-1])
    reps = range(config.replicates)
    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            rows = list(pool.map(lambda r: _replicate_means(integrand, gen, digits, config, r), reps))
    else:
        rows = [_replicate_means(integrand, gen, digits, config, r) for r in reps]
    means = np.stack(rows, axis=1)
    return RqmcResult(config.n_grid, means, getattr(integrand, "exact_mean", None))


@dataclass(frozen=True)
class RateFit:
    gamma: float
    intercept: float
    window: tuple[int, int]
    residual: float
    points: int = 0

    @property
    def slope(self) -> float:
        return -self.gamma


def fit_rate(result: RqmcResult | tuple, window: tuple[int, int] | None = None, top: int = 3) -> RateFit:
    """Least-squares slope of ``log2(rmse)`` against ``log2(n)``.

    ``result`` is an :class:`RqmcResult` or a pair ``(n_grid, rmse)``.
    Without a window the largest ``top`` grid points are used.
    """
    if isinstance(result, RqmcResult):
        n, err = np.asarray(result.n_grid, dtype=float), result.rmse
    else:
        n, err = (np.asarray(v, dtype=float) for v in result)
    if window is None:
        if len(n) < 2:
            raise ConfigError("need at least two grid points to fit a rate")
        window = (int(n[-min(top, len(n))]), int(n[-1]))
    lo, hi = window
    if lo not in n or hi not in n:
        raise ConfigError(f"window {window} endpoints must be grid values")
    sel = (n >= lo) & (n <= hi)
    if sel.sum() < 2:
        raise ConfigError("fit window holds fewer than two grid points")
    if np.any(err[sel] <= 0):
        raise NumericError("zero RMSE inside the fit window; the rate is undefined")
    x, y = np.log2(n[sel]), np.log2(err[sel])
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = float(np.linalg.norm(A @ coef - y))
    return RateFit(float(-coef[0]), float(coef[1]), (int(lo), int(hi)), res, int(sel.sum()))


# CSV output ----------------------------------------------------------------


def write_replicates_csv(path, result: RqmcResult, extra: dict | None = None) -> None:
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*extra, "n", "r", "replicate_mean"])
        for i, n in enumerate(result.n_grid):
            for r in range(result.replicates):
                w.writerow([*extra.values(), n, r, repr(float(result.means[i, r]))])


def write_summary_csv(path, result: RqmcResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "pooled_mean", "rmse"])
        for n, m, e in zip(result.n_grid, result.pooled, result.rmse):
            w.writerow([n, repr(float(m)), repr(float(e))])


def read_summary_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(n, rmse)`` from a summary CSV written by :func:`write_summary_csv` or a study."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "rmse" not in rows[0]:
        raise ConfigError(f"{path}: expected columns n and rmse")
    return np.array([float(r["n"]) for r in rows]), np.array([float(r["rmse"]) for r in rows])
