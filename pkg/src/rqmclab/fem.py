"""Bilinear finite elements for ``-div(a grad u) = f`` on ``[-1, 1]^2`` with zero boundary values.

The mesh is uniform with ``N`` cells per axis.  Nodal arrays have shape
``(N+1, N+1)`` indexed ``[iy, ix]``.  Element ``(ey, ex)`` has corners in the
order ``(ex, ey), (ex+1, ey), (ex+1, ey+1), (ex, ey+1)``.

Many coefficient samples are solved together.  After assembly each sample is
a 9-point stencil on the interior nodes, and a Jacobi-preconditioned conjugate
gradient runs on the whole batch with per-sample step sizes.  Every reduction
is taken along a single sample's row, so a sample's result does not depend on
which other samples share its batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import sparse

from .errors import SolverError
from .gauss import inv_norm, norm_cdf
from .randomfield import FieldSample, coefficient_field

# corner offsets (dy, dx) in local node order
CORNERS = ((0, 0), (0, 1), (1, 1), (1, 0))
GAUSS_1D = (0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0))
# quadrature points in reference coordinates (xi, eta), weight 1/4 each
QUAD_REF = tuple((xi, eta) for eta in GAUSS_1D for xi in GAUSS_1D)
OFFSETS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))

QOI_BOX = ((0.25, 0.5), (-0.5, -0.25))
QOI_SMOOTHING = 0.25
DEFAULT_TOL = 1e-10
BATCH = 256


def _shape(xi: float, eta: float) -> np.ndarray:
    return np.array([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta])


def _shape_grad(xi: float, eta: float) -> np.ndarray:
    # rows: local nodes, columns: d/dxi, d/deta
    return np.array([[-(1 - eta), -(1 - xi)], [1 - eta, -xi], [eta, xi], [-eta, 1 - xi]])


# per-quadrature-point stiffness in reference coordinates; independent of h in 2-D
QUAD_STIFFNESS = np.stack([0.25 * _shape_grad(*q) @ _shape_grad(*q).T for q in QUAD_REF])
QUAD_SHAPE = np.stack([_shape(*q) for q in QUAD_REF])  # (4 quad, 4 nodes)


@dataclass(frozen=True)
class Mesh:
    N: int = 16

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("mesh needs at least 2 cells per axis")

    @property
    def h(self) -> float:
        return 2.0 / self.N

    @property
    def n_nodes(self) -> int:
        return (self.N + 1) ** 2

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(N+1, N+1, 2)``."""
        g = np.linspace(-1.0, 1.0, self.N + 1)
        X, Y = np.meshgrid(g, g, indexing="xy")
        return np.stack([X, Y], axis=-1)

    @cached_property
    def boundary(self) -> np.ndarray:
        m = np.zeros((self.N + 1, self.N + 1), dtype=bool)
        m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
        return m

    @cached_property
    def connectivity(self) -> np.ndarray:
        """Flat node indices per element, shape ``(N*N, 4)``, elements ordered ``[ey, ex]``."""
        N = self.N
        ey, ex = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
        cols = [(ey + dy) * (N + 1) + (ex + dx) for dy, dx in CORNERS]
        return np.stack([c.ravel() for c in cols], axis=1)

    @cached_property
    def quad_points(self) -> np.ndarray:
        """Physical quadrature points, shape ``(N, N, 4, 2)`` indexed ``[ey, ex, q]``."""
        N, h = self.N, self.h
        x0 = -1.0 + h * np.arange(N)
        out = np.empty((N, N, 4, 2))
        for q, (xi, eta) in enumerate(QUAD_REF):
            out[:, :, q, 0] = x0[None, :] + h * xi
            out[:, :, q, 1] = x0[:, None] + h * eta
        return out

    def load_vector(self, f: Callable | float = 1.0) -> np.ndarray:
        """Nodal load ``int f N_i`` by 2x2 Gauss quadrature, shape ``(N+1, N+1)``."""
        N, h = self.N, self.h
        qp = self.quad_points
        fq = np.full(qp.shape[:3], float(f)) if np.isscalar(f) else np.asarray(f(qp), dtype=float)
        F = np.zeros((N + 1, N + 1))
        for i, (dy, dx) in enumerate(CORNERS):
            contrib = np.zeros((N, N))
            for q in range(4):
                contrib += 0.25 * h * h * fq[:, :, q] * QUAD_SHAPE[q, i]
            F[dy : dy + N, dx : dx + N] += contrib
        return F

    def weighted_integral_vector(self, w: Callable) -> np.ndarray:
        """Vector ``q`` with ``q . u = int w u_h`` under 2x2 Gauss quadrature."""
        return self.load_vector(w)


# QoI weight ----------------------------------------------------------------


def qoi_weight_eval(x, box=QOI_BOX, width: float = QOI_SMOOTHING) -> np.ndarray:
    """Indicator of ``box`` convolved with an isotropic Gaussian of standard deviation ``width``."""
    x = np.asarray(x, dtype=float)
    out = np.ones(x.shape[:-1])
    for i, (a, b) in enumerate(box):
        lo, hi = (a - x[..., i]) / width, (b - x[..., i]) / width
        # take the difference in whichever tail avoids cancellation
        diff = np.where(lo > 0, norm_cdf(-lo) - norm_cdf(-hi), norm_cdf(hi) - norm_cdf(lo))
        out = out * diff
    return out


@dataclass(frozen=True)
class QoiWeight:
    box: tuple = QOI_BOX
    width: float = QOI_SMOOTHING

    def __call__(self, x):
        return qoi_weight_eval(x, self.box, self.width)

    @property
    def center(self) -> tuple[float, float]:
        return tuple(0.5 * (a + b) for a, b in self.box)


# assembly ------------------------------------------------------------------


def element_matrices(a_quad: np.ndarray) -> np.ndarray:
    """Element stiffness ``sum_q a_q S_q`` for coefficients of shape ``(..., 4)``."""
    out = np.zeros(a_quad.shape[:-1] + (4, 4))
    for q in range(4):
        out += a_quad[..., q, None, None] * QUAD_STIFFNESS[q]
    return out


def stencil(a_quad: np.ndarray) -> np.ndarray:
    """Nine-point stencil coefficients from quadrature-point coefficients.

    ``a_quad`` has shape ``(B, N, N, 4)``.  The result has shape
    ``(9, B, N+1, N+1)``; entry ``o`` couples a node with its neighbor at
    offset ``OFFSETS[o]``.
    """
    B, N = a_quad.shape[0], a_quad.shape[1]
    Ke = element_matrices(a_quad)
    coef = np.zeros((9, B, N + 1, N + 1))
    for i, (yi, xi) in enumerate(CORNERS):
        for j, (yj, xj) in enumerate(CORNERS):
            o = OFFSETS.index((yj - yi, xj - xi))
            coef[o, :, yi : yi + N, xi : xi + N] += Ke[:, :, :, i, j]
    return coef


def assemble_matrix(mesh: Mesh, a_quad: np.ndarray) -> sparse.csr_matrix:
    """Global stiffness of one sample with boundary rows and columns removed."""
    N = mesh.N
    Ke = element_matrices(np.asarray(a_quad).reshape(N * N, 4))
    conn = mesh.connectivity
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    K = sparse.coo_matrix((Ke.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
    interior = np.flatnonzero(~mesh.boundary.ravel())
    return K[interior][:, interior]


def _apply(coef: np.ndarray, u: np.ndarray) -> np.ndarray:
    # u: (B, N+1, N+1) with zero boundary; returns interior values (B, N-1, N-1)
    n = u.shape[-1] - 1
    out = np.zeros(u.shape[:1] + (n - 1, n - 1))
    for o, (dy, dx) in enumerate(OFFSETS):
        out += coef[o, :, 1:n, 1:n] * u[:, 1 + dy : n + dy, 1 + dx : n + dx]
    return out


def _rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).reshape(a.shape[0], -1).sum(axis=1)


@dataclass
class FemSolution:
    """Nodal solutions ``u`` of shape ``(B, N+1, N+1)`` with iteration counts and residuals."""

    u: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray

    def __getitem__(self, i) -> "FemSolution":
        return FemSolution(self.u[i], self.iterations[i], self.residual[i])


def pcg(
    coef: np.ndarray,
    rhs: np.ndarray,
    x0: np.ndarray | None = None,
    tol: float = DEFAULT_TOL,
    maxiter: int | None = None,
    context: str | None = None,
) -> FemSolution:
    """Batched Jacobi-preconditioned conjugate gradient on stencil operators.

    ``rhs`` holds interior loads of shape ``(B, N-1, N-1)``.  A sample stops
    updating once its relative residual reaches ``tol``.
    """
    B, m = rhs.shape[0], rhs.shape[1]
    n = m + 1
    maxiter = maxiter if maxiter is not None else 10 * (n + 1) ** 2
    inv_diag = 1.0 / coef[OFFSETS.index((0, 0)), :, 1:n, 1:n]
    full = np.zeros((B, n + 1, n + 1))
    x = np.zeros_like(rhs) if x0 is None else np.array(np.broadcast_to(x0, rhs.shape))
    full[:, 1:n, 1:n] = x
    r = rhs - _apply(coef, full)
    bnorm = np.sqrt(_rowdot(rhs, rhs))
    bnorm = np.where(bnorm > 0, bnorm, 1.0)
    rnorm = np.sqrt(_rowdot(r, r))
    active = rnorm / bnorm > tol
    z = inv_diag * r
    p = z.copy()
    rz = _rowdot(r, z)
    iters = np.zeros(B, dtype=int)
    it = 0
    while active.any() and it < maxiter:
        full[:, 1:n, 1:n] = p
        Ap = _apply(coef, full)
        pAp = _rowdot(p, Ap)
        alpha = np.where(active, rz / np.where(active, pAp, 1.0), 0.0)
        x += alpha[:, None, None] * p
        r -= alpha[:, None, None] * Ap
        it += 1
        iters[active] = it
        rnorm = np.sqrt(_rowdot(r, r))
        active &= rnorm / bnorm > tol
        z = inv_diag * r
        rz_new = _rowdot(r, z)
        beta = np.where(active, rz_new / np.where(rz != 0, rz, 1.0), 0.0)
        p = z + beta[:, None, None] * p
        rz = rz_new
    rel = rnorm / bnorm
    if active.any():
        worst = int(np.argmax(rel))
        raise SolverError(
            f"conjugate gradient stalled after {maxiter} iterations (sample {worst})",
            residual=float(rel[worst]),
            context=context,
        )
    u = np.zeros((B, n + 1, n + 1))
    u[:, 1:n, 1:n] = x
    return FemSolution(u, iters, rel)


def assemble_and_solve(
    mesh: Mesh,
    a: Callable | np.ndarray,
    f: Callable | float = 1.0,
    tol: float = DEFAULT_TOL,
    x0: np.ndarray | None = None,
    context: str | None = None,
) -> FemSolution:
    """Solve for one or more coefficient fields.

    ``a`` is either a callable on points of shape ``(..., 2)`` or an array of
    quadrature-point values with shape ``(N, N, 4)`` or ``(B, N, N, 4)``.
    """
    if callable(a):
        a_quad = np.asarray(a(mesh.quad_points), dtype=float)
    else:
        a_quad = np.asarray(a, dtype=float)
    if a_quad.ndim == 3:
        a_quad = a_quad[None]
    F = mesh.load_vector(f)[1:-1, 1:-1]
    rhs = np.broadcast_to(F, (a_quad.shape[0],) + F.shape).copy()
    return pcg(stencil(a_quad), rhs, x0=x0, tol=tol, context=context)


def qoi(solution: FemSolution | np.ndarray, weight_vector: np.ndarray) -> np.ndarray | float:
    """Weighted integral ``int w u_h``; ``weight_vector`` comes from :meth:`Mesh.weighted_integral_vector`."""
    u = solution.u if isinstance(solution, FemSolution) else np.asarray(solution)
    if u.ndim == 2:
        return float((u * weight_vector).sum())
    return (u * weight_vector).reshape(u.shape[0], -1).sum(axis=1)


# PDE quantity of interest as an integrand ----------------------------------


@dataclass(eq=False)
class PdeIntegrand:
    """``t -> QoI(u(a(y)))`` with ``y = inv_norm(t)`` and ``a = exp(sum_j y_j sigma_j psi_j)``.

    Solves are batched in chunks of ``batch`` samples and warm-started from the
    solution with ``a = 1``.
    """

    basis: object
    sigma: np.ndarray
    mesh: Mesh = field(default_factory=Mesh)
    rhs: Callable | float = 1.0
    weight: Callable = field(default_factory=QoiWeight)
    tol: float = DEFAULT_TOL
    batch: int = BATCH
    warm_start: bool = True

    def __post_init__(self):
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), (self.basis.s,)).copy()
        qp = self.mesh.quad_points
        self._psi = self.basis.evaluate(qp)  # (s, N, N, 4)
        self._load = self.mesh.load_vector(self.rhs)[1:-1, 1:-1]
        self._qvec = self.mesh.weighted_integral_vector(self.weight)
        ones = np.ones((1,) + qp.shape[:3])
        self._mean_field = pcg(stencil(ones), self._load[None], tol=self.tol).u[0, 1:-1, 1:-1]

    @property
    def s(self) -> int:
        return self.basis.s

    @property
    def b(self) -> np.ndarray:
        return np.asarray(self.basis.b)

    def coefficients(self, y: np.ndarray) -> np.ndarray:
        """Quadrature-point coefficients for a batch of Gaussian vectors, ``(B, N, N, 4)``."""
        w = np.asarray(y, dtype=float) * self.sigma
        log_a = np.zeros((w.shape[0],) + self._psi.shape[1:])
        for j in range(self.s):
            log_a += w[:, j, None, None, None] * self._psi[j]
        return np.exp(log_a)

    def solve(self, y: np.ndarray, context: str | None = None) -> FemSolution:
        a_quad = self.coefficients(y)
        rhs = np.broadcast_to(self._load, (len(y),) + self._load.shape).copy()
        x0 = self._mean_field if self.warm_start else None
        return pcg(stencil(a_quad), rhs, x0=x0, tol=self.tol, context=context)

    def gaussian(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        out = np.empty(len(y))
        for lo in range(0, len(y), self.batch):
            hi = min(lo + self.batch, len(y))
            sol = self.solve(y[lo:hi], context=f"points {lo}..{hi - 1}")
            out[lo:hi] = qoi(sol, self._qvec)
        return out

    def __call__(self, t) -> np.ndarray:
        return self.gaussian(inv_norm(np.atleast_2d(t)))

    def field(self, y) -> Callable:
        return coefficient_field(self.basis, FieldSample(np.asarray(y), self.sigma))


def pde_integrand(basis, sigma, mesh: Mesh | None = None, rhs=1.0, weight=None, **kw) -> PdeIntegrand:
    return PdeIntegrand(basis, sigma, mesh or Mesh(), rhs, weight or QoiWeight(), **kw)
