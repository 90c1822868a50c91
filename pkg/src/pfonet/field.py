"""Uniform-grid scalar fields with Neumann-aware finite differences.

All operators treat the boundary by ghost-node reflection (``u[-1] = u[1]``),
which is what a zero normal derivative looks like on a node-centred grid.
Array-level helpers (leading underscore-free ``*_values`` functions) act on
the trailing one or two axes so the solvers can process whole batches.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Union

import numpy as np


class GridMismatchError(ValueError):
    """Two fields that must share a grid do not."""


@dataclass(frozen=True)
class Grid1D:
    n: int
    a: float = -1.0
    b: float = 1.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 3:
            raise ValueError(f"Grid1D needs n >= 3 nodes, got {self.n}")
        if not self.b > self.a:
            raise ValueError(f"Grid1D needs b > a, got [{self.a}, {self.b}]")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))

    ndim = 1

    @property
    def dx(self) -> float:
        return (self.b - self.a) / (self.n - 1)

    @property
    def shape(self) -> tuple[int]:
        return (self.n,)

    @property
    def measure(self) -> float:
        return self.b - self.a

    @property
    def spacings(self) -> tuple[float]:
        return (self.dx,)

    def nodes(self) -> np.ndarray:
        return np.linspace(self.a, self.b, self.n)

    def points(self) -> np.ndarray:
        """Node coordinates as an (n, 1) array."""
        return self.nodes()[:, None]

    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.n, self.dx)

    def to_dict(self) -> dict:
        return {"type": "grid1d", "n": self.n, "a": self.a, "b": self.b}


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    ax: float = -1.0
    bx: float = 1.0
    ay: float = -1.0
    by: float = 1.0

    def __post_init__(self):
        # validates each axis the same way a Grid1D does
        Grid1D(self.nx, self.ax, self.bx)
        Grid1D(self.ny, self.ay, self.by)
        for name in ("nx", "ny"):
            object.__setattr__(self, name, int(getattr(self, name)))
        for name in ("ax", "bx", "ay", "by"):
            object.__setattr__(self, name, float(getattr(self, name)))

    ndim = 2

    @property
    def x_axis(self) -> Grid1D:
        return Grid1D(self.nx, self.ax, self.bx)

    @property
    def y_axis(self) -> Grid1D:
        return Grid1D(self.ny, self.ay, self.by)

    @property
    def dx(self) -> float:
        return self.x_axis.dx

    @property
    def dy(self) -> float:
        return self.y_axis.dx

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def n(self) -> int:
        return self.nx * self.ny

    @property
    def measure(self) -> float:
        return (self.bx - self.ax) * (self.by - self.ay)

    @property
    def spacings(self) -> tuple[float, float]:
        return (self.dx, self.dy)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x_axis.nodes(), self.y_axis.nodes(), indexing="ij")

    def points(self) -> np.ndarray:
        """Node coordinates as an (nx*ny, 2) array in row-major (x-major) order."""
        X, Y = self.mesh()
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def weights(self) -> np.ndarray:
        return np.outer(self.x_axis.weights(), self.y_axis.weights())

    def to_dict(self) -> dict:
        return {"type": "grid2d", "nx": self.nx, "ny": self.ny,
                "ax": self.ax, "bx": self.bx, "ay": self.ay, "by": self.by}


Grid = Union[Grid1D, Grid2D]


def grid_from_dict(d: dict) -> Grid:
    kind = d.get("type", "grid1d" if "n" in d else "grid2d")
    if kind == "grid1d":
        return Grid1D(d["n"], d.get("a", -1.0), d.get("b", 1.0))
    if kind == "grid2d":
        return Grid2D(d["nx"], d["ny"], d.get("ax", -1.0), d.get("bx", 1.0),
                      d.get("ay", -1.0), d.get("by", 1.0))
    raise ValueError(f"unknown grid type {kind!r}")


def trapezoid_weights(n: int, dx: float) -> np.ndarray:
    w = np.full(n, dx)
    w[0] = w[-1] = 0.5 * dx
    return w


@dataclass(frozen=True, eq=False)
class Field:
    """Node values of a scalar field on a uniform grid (read-only)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            if values.size == self.grid.n:
                values = values.reshape(self.grid.shape)
            else:
                raise ValueError(f"expected {self.grid.shape} values, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "Field":
        if grid.ndim == 1:
            return cls(grid, fn(grid.nodes()))
        X, Y = grid.mesh()
        return cls(grid, fn(X, Y))

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "Field":
        return cls(grid, np.full(grid.shape, float(c)))

    def with_values(self, values) -> "Field":
        return Field(self.grid, values)

    def __add__(self, other):
        return self.with_values(self.values + _vals(other, self.grid))

    def __sub__(self, other):
        return self.with_values(self.values - _vals(other, self.grid))

    def __mul__(self, other):
        return self.with_values(self.values * _vals(other, self.grid))

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)

    def to_json(self) -> str:
        return json.dumps({"grid": self.grid.to_dict(),
                           "values": self.values.ravel().tolist()})

    @classmethod
    def from_json(cls, text: str) -> "Field":
        d = json.loads(text)
        grid = grid_from_dict(d["grid"])
        return cls(grid, np.asarray(d["values"], dtype=np.float64).reshape(grid.shape))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if self.grid.ndim == 1:
            writer.writerow(["x", "value"])
            for x, v in zip(self.grid.nodes(), self.values):
                writer.writerow([repr(float(x)), repr(float(v))])
        else:
            writer.writerow(["x", "y", "value"])
            for (x, y), v in zip(self.grid.points(), self.values.ravel()):
                writer.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
        return buf.getvalue()


def _vals(other, grid) -> np.ndarray | float:
    if isinstance(other, Field):
        check_same_grid(other.grid, grid)
        return other.values
    return other


def check_same_grid(g1: Grid, g2: Grid) -> None:
    if g1 != g2:
        raise GridMismatchError(f"grid mismatch: {g1} vs {g2}")


# -- array-level operators (act on trailing axes) -------------------------

def _second_diff(u: np.ndarray, dx: float, axis: int) -> np.ndarray:
    u = np.moveaxis(u, axis, -1)
    out = np.empty_like(u)
    out[..., 1:-1] = u[..., 2:] - 2.0 * u[..., 1:-1] + u[..., :-2]
    out[..., 0] = 2.0 * (u[..., 1] - u[..., 0])
    out[..., -1] = 2.0 * (u[..., -2] - u[..., -1])
    return np.moveaxis(out / dx**2, -1, axis)


def _central_diff(u: np.ndarray, dx: float, axis: int) -> np.ndarray:
    u = np.moveaxis(u, axis, -1)
    out = np.zeros_like(u)
    out[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2.0 * dx)
    return np.moveaxis(out, -1, axis)


def laplacian_values(u: np.ndarray, grid: Grid) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if grid.ndim == 1:
        return _second_diff(u, grid.dx, -1)
    return _second_diff(u, grid.dx, -2) + _second_diff(u, grid.dy, -1)


def gradient_values(u: np.ndarray, grid: Grid) -> list[np.ndarray]:
    u = np.asarray(u, dtype=np.float64)
    if grid.ndim == 1:
        return [_central_diff(u, grid.dx, -1)]
    return [_central_diff(u, grid.dx, -2), _central_diff(u, grid.dy, -1)]


def integrate_values(u: np.ndarray, grid: Grid) -> np.ndarray | float:
    w = grid.weights()
    axes = tuple(range(-grid.ndim, 0))
    return np.sum(np.asarray(u) * w, axis=axes)


def mean_values(u: np.ndarray, grid: Grid) -> np.ndarray | float:
    return integrate_values(u, grid) / grid.measure


def dirichlet_energy_values(u: np.ndarray, grid: Grid) -> np.ndarray | float:
    """Edge-midpoint quadrature of 1/2 * integral |grad u|^2.

    Its gradient with respect to node values is exactly
    ``-weights * laplacian_values(u)``, so discrete energies built on it
    have the Neumann Laplacian as their exact variational derivative.
    """
    u = np.asarray(u, dtype=np.float64)
    if grid.ndim == 1:
        d = np.diff(u, axis=-1) / grid.dx
        return 0.5 * grid.dx * np.sum(d * d, axis=-1)
    wx = grid.x_axis.weights()
    wy = grid.y_axis.weights()
    ddx = np.diff(u, axis=-2) / grid.dx
    ddy = np.diff(u, axis=-1) / grid.dy
    ex = 0.5 * grid.dx * np.sum(ddx * ddx * wy, axis=(-2, -1))
    ey = 0.5 * grid.dy * np.sum(ddy * ddy * wx[:, None], axis=(-2, -1))
    return ex + ey


# -- Field-level API -------------------------------------------------------

def gradient_neumann(f: Field) -> tuple[Field, ...]:
    """Central differences inside, zero normal component on the boundary."""
    return tuple(Field(f.grid, g) for g in gradient_values(f.values, f.grid))


def laplacian_neumann(f: Field) -> Field:
    return Field(f.grid, laplacian_values(f.values, f.grid))


def integrate(f: Field) -> float:
    return float(integrate_values(f.values, f.grid))


def mean(f: Field) -> float:
    return integrate(f) / f.grid.measure
