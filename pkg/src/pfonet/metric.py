"""Weighted L2 and H^-1 inner products and the Neumann Poisson solve.

The discrete Neumann Laplacian is singular (constants span its kernel), so
the Poisson solve works on the mean-zero subspace: the source must have zero
trapezoid mean, one node is pinned to remove the kernel, and the solution is
re-centred to zero mean afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import linalg

from .field import Field, Grid1D, check_same_grid, integrate_values

L2 = "l2"
HNEG1 = "hneg1"

MEAN_TOL = 1e-8
MEAN_FLOOR = 64 * np.finfo(np.float64).eps


class NonZeroMeanError(ValueError):
    """Source of a Neumann Poisson problem does not integrate to zero."""


class SingularSolveError(RuntimeError):
    """Factorisation of the pinned Neumann operator failed."""


@dataclass(frozen=True)
class MetricSpec:
    kind: str = L2
    weight_M: float = 1.0

    def __post_init__(self):
        if self.kind not in (L2, HNEG1):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if not self.weight_M > 0:
            raise ValueError("metric weight M must be positive")

    @classmethod
    def l2(cls, M: float = 1.0) -> "MetricSpec":
        return cls(L2, float(M))

    @classmethod
    def hneg1(cls, M: float = 1.0) -> "MetricSpec":
        return cls(HNEG1, float(M))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "weight_M": self.weight_M}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricSpec":
        return cls(d["kind"], float(d.get("weight_M", 1.0)))


@dataclass(frozen=True, eq=False)
class PoissonOperator:
    """Factorised Neumann second-difference operator on a 1D grid.

    ``matrix`` is the tridiagonal ``(1/dx) * [[-1, 1], [1, -2, 1], ..., [1, -1]]``
    stencil; it equals ``weights * laplacian``, is symmetric, and every row
    sums to zero.
    """

    grid: Grid1D
    matrix: np.ndarray
    weights: np.ndarray
    _chol: np.ndarray = field(repr=False)

    def solve_values(self, f: np.ndarray, check: bool = True) -> np.ndarray:
        """Mean-zero solution of ``laplacian(phi) = f`` along the last axis."""
        f = np.asarray(f, dtype=np.float64)
        if check:
            _check_mean_zero(f, self.grid)
        rhs = -(f * self.weights)
        lead = rhs.shape[:-1]
        rhs2 = rhs.reshape(-1, self.grid.n).T[1:]
        sol = linalg.cho_solve_banded((self._chol, False), rhs2)
        phi = np.zeros((self.grid.n, sol.shape[1]))
        phi[1:] = sol
        phi = phi.T.reshape(lead + (self.grid.n,))
        return phi - (integrate_values(phi, self.grid) / self.grid.measure)[..., None]

    def adjoint_solve_values(self, g: np.ndarray) -> np.ndarray:
        """Transpose (Euclidean) of the linear map ``f -> solve_values(f)``."""
        g = np.asarray(g, dtype=np.float64)
        g = g - self.weights * (g.sum(axis=-1, keepdims=True) / self.grid.measure)
        lead = g.shape[:-1]
        rhs2 = g.reshape(-1, self.grid.n).T[1:]
        sol = linalg.cho_solve_banded((self._chol, False), rhs2)
        y = np.zeros((self.grid.n, sol.shape[1]))
        y[1:] = sol
        return -(y.T.reshape(lead + (self.grid.n,)) * self.weights)


def _check_mean_zero(f: np.ndarray, grid: Grid1D) -> None:
    m = np.abs(integrate_values(f, grid) / grid.measure)
    scale = np.max(np.abs(f), axis=-1)
    # relative test, with a rounding-level floor for sources that are themselves ~0
    if np.any(m > MEAN_TOL * scale + MEAN_FLOOR):
        raise NonZeroMeanError(
            f"Neumann Poisson source has mean {np.max(m):.3e}; it must integrate to zero")


def build_fd_matrix(grid: Grid1D) -> PoissonOperator:
    if not isinstance(grid, Grid1D):
        raise TypeError("the H^-1 Poisson operator is only defined on 1D grids")
    n, dx = grid.n, grid.dx
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    off = np.ones(n - 1)
    matrix = (np.diag(main) + np.diag(off, 1) + np.diag(off, -1)) / dx
    # pinned system: drop node 0 of the positive semidefinite -matrix
    diag = -main[1:] / dx
    upper = np.zeros(n - 1)
    upper[1:] = -off[1:] / dx
    try:
        chol = linalg.cholesky_banded(np.vstack([upper, diag]), lower=False)
    except linalg.LinAlgError as exc:
        raise SingularSolveError(str(exc)) from exc
    matrix.setflags(write=False)
    return PoissonOperator(grid, matrix, grid.weights(), chol)


@lru_cache(maxsize=32)
def poisson_operator(grid: Grid1D) -> PoissonOperator:
    """Shared, cached operator for ``grid`` (operators are immutable)."""
    return build_fd_matrix(grid)


def poisson_neumann_solve(op: PoissonOperator, f: Field) -> Field:
    check_same_grid(op.grid, f.grid)
    return Field(f.grid, op.solve_values(f.values))


# -- inner products ------------------------------------------------------

def _require(spec: MetricSpec, kind: str) -> None:
    if spec.kind != kind:
        raise ValueError(f"metric of kind {spec.kind!r} used where {kind!r} is required")


def l2_inner(spec: MetricSpec, f: Field, g: Field) -> float:
    _require(spec, L2)
    check_same_grid(f.grid, g.grid)
    return float(integrate_values(f.values * g.values, f.grid)) / spec.weight_M


def l2_norm(spec: MetricSpec, f: Field) -> float:
    return float(np.sqrt(max(l2_inner(spec, f, f), 0.0)))


def potential_gradient_product(phi_f: np.ndarray, phi_g: np.ndarray, dx: float):
    """Edge-midpoint quadrature of integral grad(phi_f) . grad(phi_g)."""
    return np.sum(np.diff(phi_f, axis=-1) * np.diff(phi_g, axis=-1), axis=-1) / dx


def hneg1_inner(spec: MetricSpec, op: PoissonOperator, f: Field, g: Field) -> float:
    _require(spec, HNEG1)
    check_same_grid(f.grid, g.grid)
    check_same_grid(op.grid, f.grid)
    phi_f = op.solve_values(f.values)
    phi_g = op.solve_values(g.values)
    return spec.weight_M * float(potential_gradient_product(phi_f, phi_g, op.grid.dx))


def hneg1_norm(spec: MetricSpec, op: PoissonOperator, f: Field) -> float:
    return float(np.sqrt(max(hneg1_inner(spec, op, f, f), 0.0)))


def distance_sq_values(spec: MetricSpec, delta: np.ndarray, grid,
                       op: PoissonOperator | None = None):
    """Squared minimizing-movement distance of a displacement ``delta``.

    L2 is weighted by 1/M. For H^-1 the weight is also 1/M, so that the
    induced gradient flow is ``du/dt = div(M grad mu)``; at M = 1 this agrees
    with `hneg1_inner`.
    """
    if spec.kind == L2:
        return integrate_values(delta * delta, grid) / spec.weight_M
    phi = op.solve_values(delta)
    return potential_gradient_product(phi, phi, grid.dx) / spec.weight_M
