"""Network-free time steppers: minimizing movements and finite differences.

`minmove_step` minimizes ``F(u) + d^2(u, u_k) / (2 tau)`` directly over node
values. Because the discrete energy's gradient is exactly the discrete
chemical potential, the minimizer is also the implicit-Euler update, and the
inner iteration stops on the implicit-Euler residual.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .energy import (QUADRATIC, EnergySpec, bulk_density_second_deriv, bulk_scale,
                     chemical_potential_values, energy_values, total_energy)
from .field import (Field, Grid, Grid1D, Grid2D, check_same_grid, dirichlet_energy_values,
                    integrate_values, laplacian_values, mean_values)
from .metric import (HNEG1, L2, MetricSpec, distance_sq_values, poisson_operator,
                     potential_gradient_product)

NEWTON = "newton"
GRADIENT = "gradient"

INSTABILITY_BOUND = 10.0
SUBSTEP_SAFETY = 0.2


class MinMoveConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class InstabilityError(RuntimeError):
    """Explicit reference integration left the admissible value range."""


@dataclass(frozen=True)
class MinMoveConfig:
    tau: float
    metric: MetricSpec = field(default_factory=MetricSpec)
    optimizer: str = NEWTON
    max_iter: int = 500
    tol: float = 1e-8

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.optimizer not in (NEWTON, GRADIENT):
            raise ValueError(f"unknown inner optimizer {self.optimizer!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    def to_dict(self) -> dict:
        return {"tau": self.tau, "metric": self.metric.to_dict(), "optimizer": self.optimizer,
                "max_iter": self.max_iter, "tol": self.tol}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMoveConfig":
        return cls(float(d["tau"]), MetricSpec.from_dict(d.get("metric", {"kind": L2})),
                   d.get("optimizer", NEWTON), int(d.get("max_iter", 500)),
                   float(d.get("tol", 1e-8)))


# -- sparse operators --------------------------------------------------------

def _laplacian_1d(n: int, dx: float) -> sparse.csr_matrix:
    main = np.full(n, -2.0)
    upper = np.ones(n - 1)
    lower = np.ones(n - 1)
    upper[0] = 2.0  # ghost reflection doubles the inward neighbour
    lower[-1] = 2.0
    return sparse.diags([lower, main, upper], [-1, 0, 1], format="csr") / dx**2


def laplacian_matrix(grid: Grid) -> sparse.csr_matrix:
    """Sparse Neumann Laplacian acting on row-major flattened node values."""
    if grid.ndim == 1:
        return _laplacian_1d(grid.n, grid.dx)
    Lx = _laplacian_1d(grid.nx, grid.dx)
    Ly = _laplacian_1d(grid.ny, grid.dy)
    return (sparse.kron(Lx, sparse.identity(grid.ny))
            + sparse.kron(sparse.identity(grid.nx), Ly)).tocsr()


# -- residual ------------------------------------------------------------------

def _metric_gradient(metric: MetricSpec, mu: np.ndarray, grid: Grid) -> np.ndarray:
    if metric.kind == L2:
        return metric.weight_M * mu
    return -metric.weight_M * laplacian_values(mu, grid)


def residual_values(cfg: MinMoveConfig, spec: EnergySpec, u_k: np.ndarray,
                    u: np.ndarray, grid: Grid) -> np.ndarray:
    mu = chemical_potential_values(spec, u, grid)
    return (u - u_k) / cfg.tau + _metric_gradient(cfg.metric, mu, grid)


def implicit_euler_residual(cfg: MinMoveConfig, spec: EnergySpec, u_k: Field,
                            u_candidate: Field) -> float:
    """Size of ``r = (u - u_k)/tau + grad F(u)`` in the step's metric.

    For L2 this is ``max|r|``. For H^-1, ``r`` is a divergence, and its
    natural size is that of its Poisson potential: ``max|lap^-1 r|`` plus
    ``|mean r|`` (non-zero only if the candidate changed the mass). Measuring
    ``max|r|`` directly would add a rounding floor of order
    ``eps * |lap|^2 * |u|``, larger than typical tolerances on fine grids.
    """
    check_same_grid(u_k.grid, u_candidate.grid)
    grid = u_k.grid
    r = residual_values(cfg, spec, u_k.values, u_candidate.values, grid)
    if cfg.metric.kind == L2:
        return float(np.max(np.abs(r)))
    m = float(mean_values(r, grid))
    phi = poisson_operator(grid).solve_values(r - m, check=False)
    return float(np.max(np.abs(phi))) + abs(m)


# -- minimizing movement --------------------------------------------------------

class _Problem:
    """Objective, gradient and Newton model of one minimizing-movement step.

    Iterates are displacements ``delta = u - u_k``. For H^-1 they stay
    mean-zero. Objective differences are evaluated from exact difference
    formulas so that line searches still see progress when the change in
    the objective is far below the rounding level of the objective itself.
    """

    def __init__(self, cfg: MinMoveConfig, spec: EnergySpec, u_k: np.ndarray, grid: Grid):
        self.cfg, self.spec, self.grid = cfg, spec, grid
        self.u_k = u_k
        self.w = grid.weights().ravel()
        self.hneg1 = cfg.metric.kind == HNEG1
        self.op = poisson_operator(grid) if self.hneg1 else None
        self.lap = laplacian_matrix(grid)
        self.M, self.tau = cfg.metric.weight_M, cfg.tau

    def _potential(self, delta):
        return self.op.solve_values(delta, check=False)

    def objective(self, delta: np.ndarray) -> float:
        d2 = distance_sq_values(self.cfg.metric, delta, self.grid, self.op)
        return float(energy_values(self.spec, self.u_k + delta, self.grid) + d2 / (2 * self.tau))

    def change(self, delta: np.ndarray, step: np.ndarray) -> float:
        """``objective(delta + step) - objective(delta)`` without cancellation."""
        spec, grid = self.spec, self.grid
        u = self.u_k + delta
        a = u + step
        if spec.kind == QUADRATIC:
            dbulk = 0.5 * spec.k * step * (u + a)
        else:
            dbulk = 0.25 * step * (u + a) * (a * a + u * u - 2.0)
        dF = bulk_scale(spec) * integrate_values(dbulk, grid)
        if spec.has_gradient_term:
            dF += -integrate_values(step * laplacian_values(u, grid), grid)
            dF += dirichlet_energy_values(step, grid)
        if self.hneg1:
            pd, ps = self._potential(delta), self._potential(step)
            dD = potential_gradient_product(ps, 2.0 * pd + ps, grid.dx)
        else:
            dD = integrate_values(step * (2.0 * delta + step), grid)
        return float(dF + dD / (2.0 * self.M * self.tau))

    def l2_gradient(self, delta: np.ndarray) -> np.ndarray:
        """Node-wise gradient of the objective, scaled by 1/weights."""
        mu = chemical_potential_values(self.spec, self.u_k + delta, self.grid)
        if not self.hneg1:
            return mu + delta / (self.M * self.tau)
        g = mu - self._potential(delta) / (self.M * self.tau)
        return g - mean_values(g, self.grid)

    def residual_norm(self, g: np.ndarray) -> float:
        # M * l2_gradient is r for L2 and minus the Poisson potential of r for H^-1
        return float(self.M * np.max(np.abs(g)))

    def residual(self, delta: np.ndarray) -> np.ndarray:
        mu = chemical_potential_values(self.spec, self.u_k + delta, self.grid)
        return delta / self.tau + _metric_gradient(self.cfg.metric, mu, self.grid)

    def newton(self, delta: np.ndarray, r: np.ndarray, shift: float) -> np.ndarray | None:
        """Solve the linearised implicit-Euler equation, bulk Hessian shifted by ``shift``."""
        u = (self.u_k + delta).ravel()
        h = bulk_scale(self.spec) * bulk_density_second_deriv(self.spec, u) + shift
        hess_mu = sparse.diags(h)
        if self.spec.has_gradient_term:
            hess_mu = hess_mu - self.lap
        eye = sparse.identity(u.size) / self.tau
        if self.hneg1:
            J = eye - self.M * (self.lap @ hess_mu)
        else:
            J = eye + self.M * hess_mu
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", splinalg.MatrixRankWarning)
            d = splinalg.spsolve(J.tocsc(), -r.ravel())
        if not np.all(np.isfinite(d)):
            return None
        return self.project(d.reshape(r.shape))

    def hessian_scale(self) -> float:
        """Rough magnitude of the chemical-potential Hessian, used to scale shifts."""
        h = bulk_scale(self.spec) * np.max(np.abs(
            bulk_density_second_deriv(self.spec, self.u_k)))
        if self.spec.has_gradient_term:
            h += sum(4.0 / d**2 for d in self.grid.spacings)
        return float(h) + 1.0 / self.tau

    def project(self, d: np.ndarray) -> np.ndarray:
        if not self.hneg1:
            return d
        return d - mean_values(d, self.grid)


def _accept(prob: _Problem, delta, step, slope: float, rnorm: float):
    """Trial point if ``delta + step`` gives sufficient decrease, else None."""
    dJ = prob.change(delta, step)
    trial = delta + step
    g_t = prob.l2_gradient(trial)
    rn_t = prob.residual_norm(g_t)
    # near the optimum Armijo is lost in rounding; a residual decrease then suffices
    if dJ <= 1e-4 * slope or (dJ <= 0.0 and rn_t < rnorm):
        return trial, g_t, rn_t
    return None


def _line_search(prob: _Problem, delta, d, slope: float, rnorm: float):
    t = 1.0
    for _ in range(60):
        result = _accept(prob, delta, t * d, t * slope, rnorm)
        if result is not None:
            return result
        t *= 0.5
    return None


def minmove_values(cfg: MinMoveConfig, spec: EnergySpec, u_k: np.ndarray, grid: Grid):
    """Minimize the step objective over node values; return ``(u, residual, iters)``.

    ``newton``: Levenberg-Marquardt iterations on the implicit-Euler equation,
    where the bulk Hessian is shifted by an adaptive ``lam`` until the full
    step decreases the objective (the objective is non-convex for small
    epsilon and large tau). ``gradient``: backtracking along ``-tau * r``,
    which is also the fallback when no shifted step is accepted.
    """
    u_k = np.asarray(u_k, dtype=np.float64)
    prob = _Problem(cfg, spec, u_k, grid)
    w = grid.weights()
    delta = np.zeros_like(u_k)
    g = prob.l2_gradient(delta)
    rnorm = prob.residual_norm(g)
    lam, lam_min = 0.0, 1e-4 * prob.hessian_scale()
    it = 0
    while rnorm > cfg.tol and it < cfg.max_iter:
        it += 1
        r = prob.residual(delta)
        result = None
        if cfg.optimizer == NEWTON:
            for _ in range(40):
                d = prob.newton(delta, r, lam)
                if d is not None:
                    slope = float(np.sum(w * g * d))
                    if slope < 0.0:
                        result = _accept(prob, delta, d, slope, rnorm)
                        if result is not None:
                            break
                lam = max(4.0 * lam, lam_min)
            lam = lam / 4.0 if lam > lam_min else 0.0
        if result is None:
            d = prob.project(-cfg.tau * r)
            result = _line_search(prob, delta, d, float(np.sum(w * g * d)), rnorm)
        if result is None:
            break
        delta, g, rnorm = result
    if rnorm <= cfg.tol:
        u = u_k + delta
        # never return a point with higher energy than an (equilibrium) start
        if energy_values(spec, u, grid) > energy_values(spec, u_k, grid) and \
                prob.residual_norm(prob.l2_gradient(np.zeros_like(u_k))) <= cfg.tol:
            return u_k.copy(), rnorm, it
        return u, rnorm, it
    raise MinMoveConvergenceError(
        f"minimizing movement did not converge after {it} iterations: "
        f"residual {rnorm:.3e} > tol {cfg.tol:.1e}", rnorm, it)


def minmove_step(cfg: MinMoveConfig, spec: EnergySpec, u_k: Field) -> Field:
    """One minimizing-movement step.

    For the H^-1 metric the iterate moves only along mean-zero perturbations,
    so the mean of ``u_k`` is preserved.
    """
    u, _, _ = minmove_values(cfg, spec, u_k.values, u_k.grid)
    return Field(u_k.grid, u)


def minmove_objective(cfg: MinMoveConfig, spec: EnergySpec, u_k: Field, u: Field) -> float:
    check_same_grid(u_k.grid, u.grid)
    return _Problem(cfg, spec, u_k.values, u_k.grid).objective(u.values - u_k.values)


# -- analytic and finite-difference references --------------------------------

def relaxation_exact(k: float, u0: Field, t: float) -> Field:
    """Closed-form solution ``u0 * exp(-k t)`` of du/dt = -k u."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return u0 * math.exp(-k * t)


def _laplacian_bound(grid: Grid) -> float:
    return sum(4.0 / h**2 for h in grid.spacings)


def _bulk_slope_bound(u: np.ndarray, epsilon: float) -> float:
    # |f''| = |3u^2 - 1| over the current range, plus headroom for growth
    umax = max(1.0, float(np.max(np.abs(u))))
    return (3.0 * umax**2 + 1.0) / epsilon**2


def reference_substeps(kind: str, grid: Grid, epsilon: float, tau: float, u) -> int:
    """Number of explicit sub-steps used to advance ``u`` by ``tau``."""
    lap = _laplacian_bound(grid)
    bulk = _bulk_slope_bound(np.asarray(u), epsilon)
    rate = lap + bulk if kind == "ac" else lap * (lap + bulk)
    dt_max = SUBSTEP_SAFETY * 2.0 / rate
    return max(1, math.ceil(tau / dt_max))


def _check_stable(u: np.ndarray) -> None:
    if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > INSTABILITY_BOUND:
        raise InstabilityError(
            f"explicit reference step became unstable (|u| > {INSTABILITY_BOUND:g})")


def ac_reference_values(u: np.ndarray, grid: Grid, epsilon: float, tau: float,
                        substeps: int | None = None) -> np.ndarray:
    """Explicit Euler sub-stepping of du/dt = lap u - (u^3 - u)/eps^2, batched."""
    u = np.array(u, dtype=np.float64)
    n = substeps or reference_substeps("ac", grid, epsilon, tau, u)
    dt = tau / n
    inv = 1.0 / epsilon**2
    for _ in range(n):
        u = u + dt * (laplacian_values(u, grid) - inv * (u**3 - u))
        _check_stable(u)
    return u


def ch_reference_values(u: np.ndarray, grid: Grid, epsilon: float, tau: float,
                        substeps: int | None = None) -> np.ndarray:
    """Explicit Euler sub-stepping of du/dt = lap((u^3 - u)/eps^2 - lap u), batched."""
    u = np.array(u, dtype=np.float64)
    n = substeps or reference_substeps("ch", grid, epsilon, tau, u)
    dt = tau / n
    inv = 1.0 / epsilon**2
    for _ in range(n):
        mu = inv * (u**3 - u) - laplacian_values(u, grid)
        u = u + dt * laplacian_values(mu, grid)
        _check_stable(u)
    return u


def ac2d_reference_step(epsilon: float, tau: float, u_k: Field) -> Field:
    if not isinstance(u_k.grid, Grid2D):
        raise TypeError("the Allen-Cahn reference step runs on a 2D grid")
    return Field(u_k.grid, ac_reference_values(u_k.values, u_k.grid, epsilon, tau))


def ch1d_reference_step(epsilon: float, tau: float, u_k: Field) -> Field:
    if not isinstance(u_k.grid, Grid1D):
        raise TypeError("the Cahn-Hilliard reference step runs on a 1D grid")
    return Field(u_k.grid, ch_reference_values(u_k.values, u_k.grid, epsilon, tau))


# -- steppers and trajectories ---------------------------------------------------

class Stepper:
    """A time stepper: ``stepper(u_k) -> u_{k+1}`` with attributes ``tau`` and ``energy``."""

    tau: float
    energy: EnergySpec

    def __call__(self, u: Field) -> Field:  # pragma: no cover - interface
        raise NotImplementedError


class MinMoveStepper(Stepper):
    def __init__(self, cfg: MinMoveConfig, energy: EnergySpec):
        self.cfg, self.energy, self.tau = cfg, energy, cfg.tau

    def __call__(self, u: Field) -> Field:
        return minmove_step(self.cfg, self.energy, u)


class ReferenceStepper(Stepper):
    """Finite-difference Allen-Cahn (``"ac"``) or Cahn-Hilliard (``"ch"``) stepper."""

    def __init__(self, kind: str, epsilon: float, tau: float):
        if kind not in ("ac", "ch"):
            raise ValueError(f"unknown reference kind {kind!r}")
        self.kind, self.epsilon, self.tau = kind, float(epsilon), float(tau)
        self.energy = EnergySpec.ginzburg_landau(epsilon)

    def __call__(self, u: Field) -> Field:
        fn = ac_reference_values if self.kind == "ac" else ch_reference_values
        return Field(u.grid, fn(u.values, u.grid, self.epsilon, self.tau))


class ExactRelaxationStepper(Stepper):
    def __init__(self, k: float, tau: float):
        self.tau = float(tau)
        self.energy = EnergySpec.quadratic(k)

    def __call__(self, u: Field) -> Field:
        return relaxation_exact(self.energy.k, u, self.tau)


class DeepONetStepper(Stepper):
    """Trained operator used as an explicit stepper on a fixed grid.

    Sensors and query points are the grid nodes. With ``conserve_mass`` the
    prediction is shifted so its mean equals the input's mean.
    """

    def __init__(self, params, tau: float, energy: EnergySpec, conserve_mass: bool = False):
        self.params, self.tau, self.energy = params, float(tau), energy
        self.conserve_mass = conserve_mass

    def predict_values(self, u: np.ndarray, grid: Grid) -> np.ndarray:
        from .network import deeponet_forward
        u = np.asarray(u, dtype=np.float64)
        batch = u.reshape((-1, grid.n))
        out = deeponet_forward(self.params, grid.points(), batch).reshape(u.shape)
        if self.conserve_mass:
            shift = mean_values(u, grid) - mean_values(out, grid)
            out = out + np.expand_dims(shift, tuple(range(-grid.ndim, 0)))
        return out

    def __call__(self, u: Field) -> Field:
        return Field(u.grid, self.predict_values(u.values, u.grid))


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: tuple[float, ...]
    fields: tuple[Field, ...]
    energies: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.times) == len(self.fields) == len(self.energies)):
            raise ValueError("trajectory lists must have equal length")
        if not all(math.isfinite(e) for e in self.energies):
            raise ValueError("trajectory energies must be finite")

    def __len__(self) -> int:
        return len(self.fields)

    @property
    def final(self) -> Field:
        return self.fields[-1]

    def energy_increases(self) -> int:
        """Number of steps where the energy strictly increased."""
        return sum(b > a for a, b in zip(self.energies, self.energies[1:]))

    def to_csv(self) -> str:
        lines = ["t,energy"]
        lines += [f"{t!r},{e!r}" for t, e in zip(self.times, self.energies)]
        return "\n".join(lines) + "\n"

    def export(self, directory, prefix: str = "step") -> Path:
        """Write ``trajectory.csv`` plus one field CSV per recorded step."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "trajectory.csv").write_text(self.to_csv())
        for i, f in enumerate(self.fields):
            (directory / f"{prefix}_{i:04d}.csv").write_text(f.to_csv())
        return directory / "trajectory.csv"


def rollout(stepper: Callable[[Field], Field], u0: Field, n_steps: int,
            energy: EnergySpec | None = None, tau: float | None = None) -> Trajectory:
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    energy = energy or stepper.energy
    tau = float(tau if tau is not None else stepper.tau)
    fields = [u0]
    for _ in range(n_steps):
        fields.append(stepper(fields[-1]))
    times = tuple(i * tau for i in range(n_steps + 1))
    energies = tuple(total_energy(energy, f) for f in fields)
    return Trajectory(times, tuple(fields), energies)


def energy_trace(spec: EnergySpec, fields) -> list[float]:
    return [total_energy(spec, f) for f in fields]


def write_fields_csv(path, trajectory: Trajectory) -> None:
    """Long-format CSV (step, t, node, value) of every recorded field."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t", "node", "value"])
        for i, (t, f) in enumerate(zip(trajectory.times, trajectory.fields)):
            for j, v in enumerate(f.values.ravel()):
                w.writerow([i, repr(t), j, repr(float(v))])
