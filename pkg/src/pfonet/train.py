"""Energy-based losses and the two training procedures.

Every loss is the minimizing-movement objective ``F(u) + d^2(u, u_k)/(2 tau)``
evaluated on a grid with trapezoid weights (``N_F = N_d`` = grid nodes). The
gradient part of the energy uses the network's exact coordinate derivative
when a network is being trained, and edge differences of node values when
the loss is minimized over free node values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .energy import QUADRATIC, EnergySpec, total_energy
from .field import Field, Grid
from .metric import HNEG1, L2, MetricSpec, poisson_operator
from .network import (DeepONetParams, DeepONetSpec, init_params, predict, save_checkpoint)
from .solver import Trajectory


class TrainingDivergedError(RuntimeError):
    """The loss became NaN or infinite."""


@dataclass(frozen=True)
class LossConfig:
    energy: EnergySpec
    metric: MetricSpec
    tau: float
    grid: Grid
    conserve_mass: bool | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.conserve_mass is None:
            object.__setattr__(self, "conserve_mass", self.metric.kind == HNEG1)

    @property
    def n_F(self) -> int:
        return self.grid.n

    @property
    def n_d(self) -> int:
        return self.grid.n


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3000
    lr: float = 1e-3
    batch_size: int | None = 128
    seed: int = 0
    activation: str = "tanh"
    dataset: str | None = None
    checkpoint_every: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")


@dataclass
class Prediction:
    """Predicted node values (B, N) and optionally their coordinate derivatives."""

    values: Tensor
    grads: list[Tensor] | None = None


# -- differentiable energy and distance ------------------------------------------

def _weights(grid: Grid) -> np.ndarray:
    return grid.weights().ravel()


def _grid_dirichlet(u: Tensor, grid: Grid) -> Tensor:
    """Edge-midpoint 1/2 |grad u|^2 from node values, matching the solver energy."""
    B = u.shape[0]
    if grid.ndim == 1:
        d = (u[:, 1:] - u[:, :-1]) * (1.0 / grid.dx)
        return (d * d).sum(axis=1) * (0.5 * grid.dx)
    v = u.reshape((B, grid.nx, grid.ny))
    wx, wy = grid.x_axis.weights(), grid.y_axis.weights()
    ddx = (v[:, 1:, :] - v[:, :-1, :]) * (1.0 / grid.dx)
    ddy = (v[:, :, 1:] - v[:, :, :-1]) * (1.0 / grid.dy)
    ex = (ddx * ddx * wy).reshape((B, -1)).sum(axis=1) * (0.5 * grid.dx)
    ey = (ddy * ddy * wx[:, None]).reshape((B, -1)).sum(axis=1) * (0.5 * grid.dy)
    return ex + ey


def energy_tensor(spec: EnergySpec, pred: Prediction, grid: Grid) -> Tensor:
    """Free energy of each predicted field, shape (B,)."""
    u = pred.values
    w = _weights(grid)
    if spec.kind == QUADRATIC:
        return (u * u * w).sum(axis=1) * (0.5 * spec.k)
    s = u * u - 1.0
    bulk = (s * s * w).sum(axis=1) * (0.25 / spec.epsilon**2)
    if pred.grads is None:
        return bulk + _grid_dirichlet(u, grid)
    sq = None
    for g in pred.grads:
        sq = g * g if sq is None else sq + g * g
    return bulk + (sq * w).sum(axis=1) * 0.5


def distance_tensor(metric: MetricSpec, delta: Tensor, grid: Grid) -> Tensor:
    """Squared metric distance of each displacement row, shape (B,).

    For H^-1 the displacement must already have zero mean; the Poisson solve
    is a fixed linear map and raises NonZeroMeanError otherwise.
    """
    if metric.kind == L2:
        return (delta * delta * _weights(grid)).sum(axis=1) * (1.0 / metric.weight_M)
    op = poisson_operator(grid)
    phi = ad.linear_map(delta, op.solve_values, op.adjoint_solve_values, "poisson")
    d = phi[:, 1:] - phi[:, :-1]
    return (d * d).sum(axis=1) * (1.0 / (grid.dx * metric.weight_M))


def _as_rows(u, n: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return u.reshape((-1, n))


def project_mass(pred: Prediction, u_k: np.ndarray, grid: Grid) -> Prediction:
    """Shift each predicted field so its mean equals that of ``u_k``."""
    w = _weights(grid)
    target = (u_k @ w)[:, None] / grid.measure
    current = (pred.values * w).sum(axis=1, keepdims=True) * (1.0 / grid.measure)
    return Prediction(pred.values + (target - current), pred.grads)


def step_loss(cfg: LossConfig, pred: Prediction, u_k) -> Tensor:
    """Mean over the batch of ``F(u) + d^2(u, u_k) / (2 tau)``."""
    u_k = _as_rows(u_k, cfg.grid.n)
    if cfg.conserve_mass:
        pred = project_mass(pred, u_k, cfg.grid)
    delta = pred.values - u_k
    per_sample = (energy_tensor(cfg.energy, pred, cfg.grid)
                  + distance_tensor(cfg.metric, delta, cfg.grid) * (0.5 / cfg.tau))
    return per_sample.mean()


# -- networks ----------------------------------------------------------------------

@dataclass
class Net:
    """A DeepONet (or trunk-only PINN) with parameters as arrays or tensors."""

    spec: DeepONetSpec
    params: dict

    def __call__(self, grid: Grid, u_k=None, with_grad: bool = False) -> Prediction:
        u_in = None
        if self.spec.branch is not None:
            u_in = _as_rows(u_k, grid.n)
        G, dG = predict(self.spec, self.params, grid.points(), u_in, with_grad=with_grad)
        return Prediction(G, dG)

    def values(self, grid: Grid, u_k=None) -> np.ndarray:
        return self(grid, u_k).values.value


def network_loss(cfg: LossConfig, net: Net, u_k) -> Tensor:
    pred = net(cfg.grid, u_k, with_grad=cfg.energy.kind != QUADRATIC)
    if net.spec.branch is None:
        rows = _as_rows(u_k, cfg.grid.n)
        if rows.shape[0] != 1:
            raise ValueError("a trunk-only network predicts a single field")
    return step_loss(cfg, pred, u_k)


def loss_relax(cfg: LossConfig, u_next, u_k) -> Tensor:
    """Quadratic-energy L2 step loss; ``u_next`` may be a Tensor of node values."""
    if cfg.energy.kind != QUADRATIC or cfg.metric.kind != L2:
        raise ValueError("loss_relax needs a quadratic energy and the L2 metric")
    u_next = ad.as_tensor(u_next)
    rows = u_next.reshape((-1, cfg.grid.n))
    if _as_rows(u_k, cfg.grid.n).shape[0] != rows.shape[0]:
        raise ValueError("u_next and u_k must hold the same number of fields")
    return step_loss(cfg, Prediction(rows), u_k)


def loss_allen_cahn(cfg: LossConfig, net: Net, u_k_sensors) -> Tensor:
    if cfg.metric.kind != L2:
        raise ValueError("the Allen-Cahn loss uses the L2 metric")
    return network_loss(cfg, net, u_k_sensors)


def loss_cahn_hilliard(cfg: LossConfig, net: Net, u_k_sensors, poisson=None) -> Tensor:
    """H^-1 step loss; the prediction is shifted to conserve the mean of ``u_k``."""
    if cfg.metric.kind != HNEG1:
        raise ValueError("the Cahn-Hilliard loss uses the H^-1 metric")
    if poisson is not None and poisson.grid != cfg.grid:
        raise ValueError("Poisson operator is defined on a different grid")
    return network_loss(replace(cfg, conserve_mass=True), net, u_k_sensors)


def nodal_loss(cfg: LossConfig, u_next, u_k) -> Tensor:
    """Step loss over free node values (no network), with grid-difference gradients."""
    rows = ad.as_tensor(u_next).reshape((-1, cfg.grid.n))
    return step_loss(cfg, Prediction(rows), u_k)


# -- metrics -------------------------------------------------------------------------

def r2_score(pred, truth) -> float:
    """1 - SS_res / SS_tot pooled over every node of every sample."""
    p = np.asarray([f.values if isinstance(f, Field) else f for f in pred], dtype=np.float64)
    t = np.asarray([f.values if isinstance(f, Field) else f for f in truth], dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("r2 is undefined for constant truth")
    return 1.0 - float(np.sum((p - t) ** 2)) / ss_tot


def mse(pred, truth) -> float:
    p = np.asarray([f.values if isinstance(f, Field) else f for f in pred], dtype=np.float64)
    t = np.asarray([f.values if isinstance(f, Field) else f for f in truth], dtype=np.float64)
    return float(np.mean((p - t) ** 2))


# -- DeepONet training -----------------------------------------------------------------

@dataclass
class History:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    test_mse: list = field(default_factory=list)
    test_r2: list = field(default_factory=list)

    def append(self, epoch, loss, m, r2):
        self.epoch.append(epoch)
        self.train_loss.append(loss)
        self.test_mse.append(m)
        self.test_r2.append(r2)

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,test_mse,test_r2"]
        for e, l, m, r in zip(self.epoch, self.train_loss, self.test_mse, self.test_r2):
            rows.append(f"{e},{l!r},{m!r},{r!r}")
        return "\n".join(rows) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())


def predict_batch(params: DeepONetParams, grid: Grid, u, conserve_mass: bool = False,
                  chunk: int = 256) -> np.ndarray:
    """Plain-array predictions for a batch of input fields, shape (B, N)."""
    rows = _as_rows(u, grid.n)
    net = Net(params.spec, params.arrays)
    out = np.concatenate([net.values(grid, rows[i:i + chunk])
                          for i in range(0, len(rows), chunk)]) if len(rows) else rows.copy()
    if conserve_mass:
        w = _weights(grid)
        out = out + ((rows - out) @ w)[:, None] / grid.measure
    return out


def train_deeponet(spec: DeepONetSpec, train_inputs: np.ndarray, loss_cfg: LossConfig,
                   train_cfg: TrainConfig, test_inputs: np.ndarray | None = None,
                   test_truth: np.ndarray | None = None,
                   checkpoint_dir=None, log: Callable[[str], None] | None = None):
    """Mini-batch Adam on the mean step loss over the training fields.

    ``test_truth`` holds the reference next-step fields for ``test_inputs``;
    when given, MSE and r2 are recorded every ``eval_every`` epochs.
    Returns ``(params, history)``.
    """
    grid = loss_cfg.grid
    X = _as_rows(train_inputs, grid.n)
    if spec.n_sensors != grid.n:
        raise ValueError(f"network expects {spec.n_sensors} sensors, grid has {grid.n} nodes")
    params = init_params(spec, train_cfg.seed)
    arrays = dict(params.arrays)
    state = ad.AdamState.zeros_like(arrays)
    rng = np.random.default_rng([train_cfg.seed, 7])
    bs = train_cfg.batch_size or len(X)
    history = History()
    conserve = bool(loss_cfg.conserve_mass)

    def objective(tp, batch):
        return network_loss(loss_cfg, Net(spec, tp), batch)

    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(X))
        total, count = 0.0, 0
        for start in range(0, len(X), bs):
            batch = X[order[start:start + bs]]
            value, grads = ad.value_and_grad(objective, arrays, batch)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} at epoch {epoch}")
            arrays, state = ad.adam_step(arrays, grads, state, lr=train_cfg.lr)
            total += value * len(batch)
            count += len(batch)
        m = r2 = float("nan")
        if test_truth is not None and (epoch % train_cfg.eval_every == 0
                                       or epoch == train_cfg.epochs):
            pred = predict_batch(params.replace(arrays), grid, test_inputs, conserve)
            m, r2 = mse(pred, test_truth), r2_score(pred, test_truth)
        history.append(epoch, total / count, m, r2)
        if log is not None and (epoch % max(1, train_cfg.epochs // 10) == 0):
            log(f"epoch {epoch}: loss {total / count:.6g} test_mse {m:.3e} test_r2 {r2:.4f}")
        if checkpoint_dir is not None and train_cfg.checkpoint_every and \
                epoch % train_cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch:05d}.ckpt",
                            params.replace(arrays), seed=train_cfg.seed)
    return params.replace(arrays), history


# -- sequential PINN training ---------------------------------------------------------------

@dataclass(frozen=True)
class PinnProblem:
    loss: LossConfig
    u0: Field
    spec: DeepONetSpec

    def __post_init__(self):
        if self.spec.branch is not None:
            raise ValueError("a PINN sub-network has no branch")
        if self.u0.grid != self.loss.grid:
            raise ValueError("initial condition and loss grid differ")


@dataclass
class PinnResult:
    trajectory: Trajectory
    networks: list[DeepONetParams]
    losses: list[float]


def _fit(arrays: dict, objective, epochs: int, lr: float):
    """Adam on ``objective``, keeping the best parameters seen (including the start)."""
    state = ad.AdamState.zeros_like(arrays)
    best_val, best = None, arrays
    for _ in range(epochs + 1):
        value, grads = ad.value_and_grad(objective, arrays)
        if not math.isfinite(value):
            raise TrainingDivergedError("PINN loss became non-finite")
        if best_val is None or value < best_val:
            best_val, best = value, arrays
        arrays, state = ad.adam_step(arrays, grads, state, lr=lr)
    return best, best_val


def fit_initial_condition(spec: DeepONetSpec, u0: Field, cfg: TrainConfig,
                          epochs: int | None = None) -> DeepONetParams:
    """Supervised least-squares fit of a trunk-only network to ``u0``."""
    params = init_params(spec, cfg.seed)
    grid, target = u0.grid, u0.values.ravel()[None, :]
    w = _weights(grid)

    def objective(tp):
        G = Net(spec, tp)(grid).values
        r = G - target
        return (r * r * w).sum() * (1.0 / grid.measure)

    epochs = 4 * cfg.epochs if epochs is None else epochs
    arrays, _ = _fit(dict(params.arrays), objective, epochs, cfg.lr)
    return params.replace(arrays)


def train_pinn_sequence(problem: PinnProblem, n_steps: int, cfg: TrainConfig,
                        rounds: int = 1, init: DeepONetParams | None = None,
                        log: Callable[[str], None] | None = None) -> PinnResult:
    """Train one sub-network per time step, each on the step loss from its predecessor.

    Sub-network ``k`` is warm-started from sub-network ``k-1`` (the first from
    a least-squares fit of ``u0`` unless ``init`` is given). The recorded
    energies are those the loss sees (network derivatives for the gradient
    term); the first entry is the energy of ``u0`` itself. Because the
    predecessor's parameters reproduce ``u_{k-1}`` with zero distance, the
    kept-best loss never exceeds ``F(u_{k-1})``, so energies are
    non-increasing from step 2 on. Further rounds re-sweep every step starting
    from the retained weights.
    """
    if n_steps < 0 or rounds < 1:
        raise ValueError("n_steps must be >= 0 and rounds >= 1")
    cfg_l, grid = problem.loss, problem.loss.grid
    spec = problem.spec
    base = init or fit_initial_condition(spec, problem.u0, cfg)
    nets: list[DeepONetParams] = [base] * n_steps
    losses = [float("nan")] * n_steps
    conserve = bool(cfg_l.conserve_mass)
    u0 = problem.u0.values.ravel()

    def field_of(params: DeepONetParams, u_prev: np.ndarray) -> np.ndarray:
        return predict_batch(params, grid, u_prev[None, :], conserve)[0]

    for rnd in range(rounds):
        u_prev, prev_params = u0, base
        for k in range(n_steps):
            target = u_prev[None, :]

            def objective(tp, target=target):
                return network_loss(cfg_l, Net(spec, tp), target)

            starts = [prev_params.arrays] if rnd == 0 else [nets[k].arrays, prev_params.arrays]
            start, start_val = None, None
            for s in starts:
                v = float(objective({n: Tensor(a) for n, a in s.items()}).value)
                if start_val is None or v < start_val:
                    start, start_val = s, v
            arrays, val = _fit(dict(start), objective, cfg.epochs, cfg.lr)
            nets[k] = spec_params = base.replace(arrays)
            losses[k] = val
            u_prev, prev_params = field_of(spec_params, u_prev), spec_params
            if log is not None:
                log(f"round {rnd + 1} step {k + 1}: loss {val:.6g}")

    fields = [problem.u0]
    energies = [total_energy(cfg_l.energy, problem.u0)]
    u_prev = u0
    for k in range(n_steps):
        energies.append(network_energy(cfg_l, nets[k], u_prev))
        u_prev = field_of(nets[k], u_prev)
        fields.append(Field(grid, u_prev.reshape(grid.shape)))
    times = tuple(i * cfg_l.tau for i in range(n_steps + 1))
    return PinnResult(Trajectory(times, tuple(fields), tuple(energies)), nets, losses)


def network_energy(cfg: LossConfig, params: DeepONetParams, u_k: np.ndarray) -> float:
    """Energy of the network's (mass-projected) output, as seen by the loss."""
    rows = _as_rows(u_k, cfg.grid.n)
    pred = Net(params.spec, params.arrays)(cfg.grid, rows,
                                          with_grad=cfg.energy.kind != QUADRATIC)
    if cfg.conserve_mass:
        pred = project_mass(pred, rows, cfg.grid)
    return float(energy_tensor(cfg.energy, pred, cfg.grid).value[0])
