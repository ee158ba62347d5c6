"""Lognormal coefficient fields on the square ``[-1, 1]^2``.

The covariance is a Matérn kernel with half-integer smoothness.  Its
eigenfunctions are approximated by trigonometric products on a larger torus
``[-gamma, gamma]^2``, where stationarity turns the eigenproblem into a
Fourier transform.  Each retained mode is ``psi_j = scale(lambda_j) theta_j``
restricted to the square, and ``b_j`` is its sup-norm there.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize

from .errors import ConfigError, ExtensionTooSmall

DOMAIN = (-1.0, 1.0, -1.0, 1.0)
DOMAIN_DIAMETER = 2.0 * math.sqrt(2.0)
NEG_TOL = 1e-12
SUP_GRID = 512
MAGIC = b"QMCB1"

COS, SIN = 0, 1


# kernels -------------------------------------------------------------------


@dataclass(frozen=True)
class MaternKernel:
    """Unit-variance Matérn covariance with ``nu = p + 1/2``."""

    nu: float = 4.5
    r: float = 1.0

    def __post_init__(self):
        p = self.nu - 0.5
        if p < 0 or abs(p - round(p)) > 1e-12:
            raise ConfigError(f"only half-integer smoothness is supported, got nu={self.nu}")
        if not self.r > 0:
            raise ConfigError("correlation length must be positive")

    def __call__(self, h):
        return matern_cov(h, self.nu, self.r)


@dataclass(frozen=True)
class ConstantKernel:
    """``C(h) = 1``; its covariance operator has a single nonzero eigenvalue."""

    def __call__(self, h):
        return np.ones_like(np.asarray(h, dtype=float))


def matern_cov(h, nu: float = 4.5, r: float = 1.0):
    """Half-integer Matérn covariance in exponential-times-polynomial form."""
    p = int(round(nu - 0.5))
    if p < 0 or abs(nu - 0.5 - p) > 1e-12:
        raise ConfigError(f"only half-integer smoothness is supported, got nu={nu}")
    h = np.abs(np.asarray(h, dtype=float))
    z = math.sqrt(2.0 * nu) * h / r
    poly = np.zeros_like(z)
    lead = math.factorial(p) / math.factorial(2 * p)
    for i in range(p + 1):
        coef = math.factorial(p + i) / (math.factorial(i) * math.factorial(p - i))
        poly = poly + coef * (2.0 * z) ** (p - i)
    out = np.exp(-z) * lead * poly
    return out[()] if out.ndim == 0 else out


def smooth_cutoff(h, inner: float, outer: float):
    """C-infinity step equal to 1 for ``h <= inner`` and 0 for ``h >= outer``."""
    h = np.asarray(h, dtype=float)

    def bump(x):
        safe = np.where(x > 0, x, 1.0)
        return np.where(x > 0, np.exp(-1.0 / safe), 0.0)

    u = (h - inner) / (outer - inner)
    a, b = bump(1.0 - u), bump(u)
    return a / (a + b)


# 1-D mode functions on the torus -------------------------------------------


def _mode_1d(x, k: int, parity: int, gamma: float):
    x = np.asarray(x, dtype=float)
    if k == 0:
        return np.full_like(x, 1.0 / math.sqrt(2.0 * gamma))
    w = math.pi * k / gamma
    f = np.cos if parity == COS else np.sin
    return f(w * x) / math.sqrt(gamma)


def _sup_1d(k: int, parity: int, gamma: float, lo: float = -1.0, hi: float = 1.0) -> float:
    if k == 0:
        return 1.0 / math.sqrt(2.0 * gamma)
    grid = np.linspace(lo, hi, SUP_GRID)
    vals = np.abs(_mode_1d(grid, k, parity, gamma))
    i = int(np.argmax(vals))
    best = float(vals[i])
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, SUP_GRID - 1)]
    if b > a:
        res = optimize.minimize_scalar(
            lambda x: -abs(float(_mode_1d(x, k, parity, gamma))),
            bounds=(a, b),
            method="bounded",
            options={"xatol": 1e-12},
        )
        best = max(best, -float(res.fun))
    return best


# bases ---------------------------------------------------------------------


@dataclass(frozen=True)
class Mode:
    k: tuple[int, int]
    parity: tuple[int, int]
    eigenvalue: float


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Trigonometric modes on ``[-gamma, gamma]^2`` restricted to the square."""

    gamma: float
    grid: int
    modes: tuple[Mode, ...]
    scaling: str
    b: np.ndarray
    taper: bool = False
    lambda_min_ratio: float = 0.0

    @property
    def s(self) -> int:
        return len(self.modes)

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.array([m.eigenvalue for m in self.modes])

    @property
    def scales(self) -> np.ndarray:
        lam = self.eigenvalues
        return lam if self.scaling == "lambda" else np.sqrt(lam)

    def sup_extended(self) -> np.ndarray:
        """Sup-norm of every mode over the whole torus."""
        out = []
        for m, sc in zip(self.modes, self.scales):
            f = 1.0
            for k in m.k:
                f *= 1.0 / math.sqrt(2.0 * self.gamma) if k == 0 else 1.0 / math.sqrt(self.gamma)
            out.append(sc * f)
        return np.array(out)

    def mode_values(self, j: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        m = self.modes[j]
        v = _mode_1d(x[..., 0], m.k[0], m.parity[0], self.gamma)
        v = v * _mode_1d(x[..., 1], m.k[1], m.parity[1], self.gamma)
        return self.scales[j] * v

    def evaluate(self, x) -> np.ndarray:
        """Values ``psi_j(x)`` with shape ``(s,) + x.shape[:-1]``."""
        return np.stack([self.mode_values(j, x) for j in range(self.s)])


def _mode_table(M: int):
    half = M // 2
    out = []
    for k1 in range(half):
        for k2 in range(half):
            for p1 in ((COS,) if k1 == 0 else (COS, SIN)):
                for p2 in ((COS,) if k2 == 0 else (COS, SIN)):
                    out.append((k1, k2, p1, p2))
    return out


def torus_spectrum(kernel: Callable, gamma: float, M: int, taper: bool = True) -> np.ndarray:
    """Eigenvalues ``lambda[k1, k2]`` of the periodized covariance operator."""
    dx = 2.0 * gamma / M
    idx = np.arange(M)
    d = np.minimum(idx, M - idx) * dx
    dist = np.hypot(d[:, None], d[None, :])
    c = np.asarray(kernel(dist), dtype=float)
    if taper and gamma > DOMAIN_DIAMETER:
        c = c * smooth_cutoff(dist, DOMAIN_DIAMETER, gamma)
    return dx * dx * np.real(np.fft.fft2(c))


def build_fourier_basis(
    kernel: Callable | None = None,
    gamma: float = 10.0,
    M: int = 256,
    s: int = 16,
    scaling: str = "lambda",
    taper: bool = True,
) -> SpectralBasis:
    """Leading ``s`` trigonometric modes of a stationary covariance.

    Parameters
    ----------
    kernel : callable of distance, default ``MaternKernel(4.5, 1.0)``
    gamma : half-width of the periodic extension; must be at least 1
    M : FFT points per axis, a power of two no smaller than 64
    s : number of modes kept
    scaling : ``"lambda"`` multiplies each mode by its eigenvalue, ``"sqrt"`` by its square root
    taper : smoothly cut the kernel off between the square's diameter and ``gamma``
        (only when ``gamma`` exceeds that diameter), which keeps the periodized
        spectrum nonnegative for much smaller extensions

    Raises
    ------
    ExtensionTooSmall
        If the periodized spectrum has eigenvalues below ``-1e-12 * max``.
    """
    kernel = kernel if kernel is not None else MaternKernel()
    if M < 64 or M & (M - 1):
        raise ConfigError(f"FFT size must be a power of two >= 64, got {M}")
    if gamma < 1.0:
        raise ConfigError("extension half-width must cover the domain (gamma >= 1)")
    if scaling not in ("lambda", "sqrt"):
        raise ConfigError(f"scaling must be 'lambda' or 'sqrt', got {scaling!r}")
    if s < 1:
        raise ConfigError("need at least one mode")
    lam = torus_spectrum(kernel, gamma, M, taper)
    lmax = float(lam.max())
    lmin = float(lam.min())
    if lmin < -NEG_TOL * lmax:
        raise ExtensionTooSmall(
            f"periodized covariance has eigenvalue {lmin:.3e} (max {lmax:.3e}); increase gamma"
        )
    lam = np.maximum(lam, 0.0)
    table = _mode_table(M)
    # round so that eigenvalues equal up to FFT noise tie and fall back to index order
    keyed = sorted(
        table,
        key=lambda m: (-round(lam[m[0], m[1]] / lmax, 12), m),
    )
    chosen = [m for m in keyed[:s]]
    if lam[chosen[-1][0], chosen[-1][1]] <= 0:
        raise ConfigError(f"fewer than {s} modes have positive eigenvalues")
    # ties differ only by FFT round-off; make the kept sequence exactly nonincreasing
    kept = np.minimum.accumulate([lam[m[0], m[1]] for m in chosen])
    modes = tuple(Mode((m[0], m[1]), (m[2], m[3]), float(v)) for m, v in zip(chosen, kept))
    scales = np.array([md.eigenvalue for md in modes])
    if scaling == "sqrt":
        scales = np.sqrt(scales)
    b = np.array(
        [
            sc * _sup_1d(md.k[0], md.parity[0], gamma) * _sup_1d(md.k[1], md.parity[1], gamma)
            for md, sc in zip(modes, scales)
        ]
    )
    b.setflags(write=False)
    return SpectralBasis(gamma, M, modes, scaling, b, taper and gamma > DOMAIN_DIAMETER, lmin / lmax)


@dataclass(frozen=True, eq=False)
class TabulatedBasis:
    """Modes sampled on a uniform grid, evaluated by bilinear interpolation.

    ``values[j, iy, ix]`` is mode ``j`` at ``(x[ix], y[iy])``.
    """

    values: np.ndarray
    b: np.ndarray
    bounds: tuple[float, float, float, float] = DOMAIN

    @property
    def s(self) -> int:
        return self.values.shape[0]

    @property
    def grid_n(self) -> int:
        return self.values.shape[1]

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        xmin, xmax, ymin, ymax = self.bounds
        g = self.grid_n - 1
        fx = np.clip((x[..., 0] - xmin) / (xmax - xmin) * g, 0.0, g)
        fy = np.clip((x[..., 1] - ymin) / (ymax - ymin) * g, 0.0, g)
        ix = np.minimum(fx.astype(int), g - 1)
        iy = np.minimum(fy.astype(int), g - 1)
        wx, wy = fx - ix, fy - iy
        v = self.values
        return (
            v[:, iy, ix] * (1 - wx) * (1 - wy)
            + v[:, iy, ix + 1] * wx * (1 - wy)
            + v[:, iy + 1, ix] * (1 - wx) * wy
            + v[:, iy + 1, ix + 1] * wx * wy
        )


def tabulate(basis, grid_n: int = 512, bounds=DOMAIN) -> TabulatedBasis:
    xmin, xmax, ymin, ymax = bounds
    xs = np.linspace(xmin, xmax, grid_n)
    ys = np.linspace(ymin, ymax, grid_n)
    pts = np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1)
    values = basis.evaluate(pts)
    b = np.maximum(np.asarray(basis.b, dtype=float), np.abs(values).reshape(basis.s, -1).max(axis=1))
    return TabulatedBasis(values, b, tuple(bounds))


def write_basis(basis, path, grid_n: int = 512) -> None:
    """Write a basis in the little-endian ``QMCB1`` layout."""
    tab = basis if isinstance(basis, TabulatedBasis) else tabulate(basis, grid_n)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", tab.s, tab.grid_n))
        fh.write(struct.pack("<4d", *tab.bounds))
        for j in range(tab.s):
            fh.write(struct.pack("<d", float(tab.b[j])))
            fh.write(np.ascontiguousarray(tab.values[j], dtype="<f8").tobytes())


def load_basis(path, expect_bounds=DOMAIN, rel_tol: float = 1e-12) -> TabulatedBasis:
    """Read a ``QMCB1`` file and validate it against the square domain."""
    data = Path(path).read_bytes()
    head = len(MAGIC) + 8 + 32
    if len(data) < head or data[: len(MAGIC)] != MAGIC:
        raise ConfigError(f"{path}: not a QMCB1 basis file")
    s, n = struct.unpack_from("<II", data, len(MAGIC))
    bounds = struct.unpack_from("<4d", data, len(MAGIC) + 8)
    if s == 0:
        raise ConfigError(f"{path}: basis has no modes")
    if n < 2:
        raise ConfigError(f"{path}: grid resolution {n} too small")
    if expect_bounds is not None and not np.allclose(bounds, expect_bounds, rtol=0, atol=1e-12):
        raise ConfigError(f"{path}: basis domain {bounds} does not match mesh domain {tuple(expect_bounds)}")
    per_mode = 8 + 8 * n * n
    if len(data) != head + s * per_mode:
        raise ConfigError(f"{path}: expected {head + s * per_mode} bytes, found {len(data)}")
    values = np.empty((s, n, n))
    b = np.empty(s)
    off = head
    for j in range(s):
        (b[j],) = struct.unpack_from("<d", data, off)
        values[j] = np.frombuffer(data, dtype="<f8", count=n * n, offset=off + 8).reshape(n, n)
        off += per_mode
        gmax = float(np.abs(values[j]).max())
        if b[j] < gmax * (1 - rel_tol):
            raise ConfigError(f"{path}: mode {j} sup-norm {b[j]!r} is below its grid maximum {gmax!r}")
    return TabulatedBasis(values, b, tuple(bounds))


# fields --------------------------------------------------------------------


@dataclass(frozen=True)
class FieldSample:
    y: np.ndarray
    sigma: np.ndarray | None = None

    def weights(self) -> np.ndarray:
        y = np.asarray(self.y, dtype=float)
        return y if self.sigma is None else y * np.asarray(self.sigma, dtype=float)


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """``a(x) = exp(sum_j y_j sigma_j psi_j(x))``."""

    basis: object
    sample: FieldSample

    def log(self, x) -> np.ndarray:
        psi = self.basis.evaluate(x)
        w = self.sample.weights()
        out = np.zeros(psi.shape[1:])
        for j in range(len(w)):
            out += w[j] * psi[j]
        return out

    def __call__(self, x) -> np.ndarray:
        return np.exp(self.log(x))


def coefficient_field(basis, sample: FieldSample) -> CoefficientField:
    if len(np.atleast_1d(sample.y)) != basis.s:
        raise ConfigError(f"sample has {len(np.atleast_1d(sample.y))} entries, basis has {basis.s} modes")
    return CoefficientField(basis, sample)
