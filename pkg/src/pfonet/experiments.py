"""Experiment configuration and the runners behind ``pfonet run``.

A config is a YAML mapping. Unspecified keys take per-experiment defaults,
and the fully resolved mapping is written next to the results, so a run
can always be repeated from its own snapshot.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .energy import GINZBURG_LANDAU, QUADRATIC, EnergySpec, total_energy
from .field import Field, Grid, grid_from_dict, mean_values
from .metric import HNEG1, L2, MetricSpec
from .network import (DeepONetSpec, allen_cahn_spec, cahn_hilliard_spec, layout_for,
                      pinn_spec, relaxation_spec, save_checkpoint)
from .sampler import GRFConfig, grf_sample, make_dataset, second_difference_roughness
from .solver import (DeepONetStepper, MinMoveConfig, MinMoveStepper, ReferenceStepper,
                     ac_reference_values, ch_reference_values, implicit_euler_residual,
                     minmove_values, reference_substeps, relaxation_exact, rollout)
from .train import (LossConfig, PinnProblem, TrainConfig, mse, predict_batch, r2_score,
                    train_deeponet, train_pinn_sequence)

log = logging.getLogger("pfonet")

CONFIG_VERSION = 1
PRESET_DIR = Path(__file__).with_name("presets")

EXPERIMENTS = ("relax-pinn", "relax-onet", "ac2d-onet", "ch1d-pinn", "ch1d-onet",
               "tau-study", "smoothness-study", "oracle-run")
PROBLEMS = ("relax", "ac2d", "ch1d")

# threshold name -> True when the value must be at least the limit
THRESHOLD_MIN = {"test_r2": True, "test_mse": False, "max_rel_error": False,
                 "amp_rel_error": False, "max_step_mse": False, "energy_increases": False,
                 "mass_drift": False, "max_residual": False, "oracle_mse": False,
                 "property_mse": False, "property_energy_increases": False,
                 "oracle_energy_increases": False, "oracle_mass_drift": False,
                 "monotone": True}


class ConfigError(ValueError):
    """Invalid or internally inconsistent experiment configuration."""


_PROBLEM_DEFAULTS = {
    "relax": {
        "grid": {"type": "grid1d", "n": 100, "a": -1.0, "b": 1.0},
        "energy": {"kind": QUADRATIC, "k": 10.0},
        "metric": {"kind": L2, "weight_M": 1.0},
        "tau": 0.01,
        "initial": {"kind": "sine", "wavenumber": 1.0},
        "network": {"preset": "relaxation", "activation": "tanh"},
        "truth": "exact",
    },
    "ac2d": {
        "grid": {"type": "grid2d", "nx": 28, "ny": 28, "ax": -1.0, "bx": 1.0,
                 "ay": -1.0, "by": 1.0},
        "energy": {"kind": GINZBURG_LANDAU, "epsilon": 0.25},
        "metric": {"kind": L2, "weight_M": 1.0},
        "tau": 0.005,
        "initial": {"kind": "grf", "length_scale": 0.2, "seed": 12345},
        "network": {"preset": "allen_cahn", "activation": "tanh", "padding": "same"},
        "truth": "reference",
    },
    "ch1d": {
        "grid": {"type": "grid1d", "n": 40, "a": 0.0, "b": 1.0},
        "energy": {"kind": GINZBURG_LANDAU, "epsilon": 0.25},
        "metric": {"kind": HNEG1, "weight_M": 1.0},
        "tau": 5e-4,
        "initial": {"kind": "cosine", "wavenumber": 4.0},
        "network": {"preset": "cahn_hilliard", "activation": "tanh"},
        "truth": "reference",
    },
}

_EXPERIMENT_DEFAULTS = {
    "relax-pinn": {"problem": "relax", "n_steps": 10, "rounds": 1,
                   "network": {"preset": "pinn", "activation": "tanh", "width": 20,
                               "depth": 2},
                   "train": {"epochs": 500, "lr": 1e-3, "batch_size": None}},
    "relax-onet": {"problem": "relax", "n_steps": 10},
    "ac2d-onet": {"problem": "ac2d", "n_steps": 5},
    "ch1d-pinn": {"problem": "ch1d", "n_steps": 10, "rounds": 1,
                  "network": {"preset": "pinn", "activation": "tanh", "width": 20,
                              "depth": 2},
                  "train": {"epochs": 500, "lr": 1e-3, "batch_size": None}},
    "ch1d-onet": {"problem": "ch1d", "n_steps": 10},
    "tau-study": {"problem": "relax", "taus": [0.01, 0.02, 0.04], "horizon": 0.2,
                  "eval_samples": 100},
    "smoothness-study": {"problem": "relax", "length_scales": [0.1, 0.2, 0.5],
                         "samples": 100},
    "oracle-run": {"problem": "relax", "n_steps": 100, "tau": 1e-3, "mode": "rollout",
                   "minmove": {"optimizer": "newton", "max_iter": 500, "tol": 1e-8}},
}

_COMMON_DEFAULTS = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "sampler": {"length_scale": 0.2, "variance": 1.0, "jitter": 1e-10, "total": 2000,
                "train_fraction": 0.5},
    "train": {"epochs": 3000, "lr": 1e-3, "batch_size": 128, "eval_every": 10,
              "checkpoint_every": 0},
    "minmove": {"optimizer": "newton", "max_iter": 500, "tol": 1e-8},
    "thresholds": {},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw: dict) -> dict:
    """Fill defaults and validate; returns the resolved mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    exp = raw.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {exp!r}; expected one of {', '.join(EXPERIMENTS)}")
    version = raw.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    problem = raw.get("problem", _EXPERIMENT_DEFAULTS[exp]["problem"])
    if problem not in PROBLEMS:
        raise ConfigError(f"unknown problem {problem!r}")
    exp_defaults = dict(_EXPERIMENT_DEFAULTS[exp])
    cfg = _merge(_COMMON_DEFAULTS, _PROBLEM_DEFAULTS[problem])
    # an experiment's network block replaces the problem's rather than merging into it
    if "network" in exp_defaults:
        cfg["network"] = exp_defaults.pop("network")
    cfg = _merge(cfg, exp_defaults)
    if "network" in raw:
        cfg["network"] = {}
    cfg = _merge(cfg, raw)
    cfg["problem"] = problem
    cfg.setdefault("output_dir", exp)
    validate_config(cfg)
    return cfg


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate_config(cfg: dict) -> None:
    exp, problem = cfg["experiment"], cfg["problem"]
    try:
        grid = grid_from_dict(cfg["grid"])
        energy = EnergySpec.from_dict(cfg["energy"])
        metric = MetricSpec.from_dict(cfg["metric"])
        MinMoveConfig(float(cfg["tau"]), metric, **cfg["minmove"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid grid/energy/metric/tau block: {exc}") from exc
    _require(isinstance(cfg["seed"], int), "seed must be an integer")
    if problem == "relax":
        _require(energy.kind == QUADRATIC and metric.kind == L2 and grid.ndim == 1,
                 "relax needs a quadratic energy, the L2 metric and a 1D grid")
    elif problem == "ac2d":
        _require(energy.kind == GINZBURG_LANDAU and metric.kind == L2 and grid.ndim == 2,
                 "ac2d needs a Ginzburg-Landau energy, the L2 metric and a 2D grid")
    else:
        _require(energy.kind == GINZBURG_LANDAU and metric.kind == HNEG1 and grid.ndim == 1,
                 "ch1d needs a Ginzburg-Landau energy, the H^-1 metric and a 1D grid")
    _require(cfg.get("truth") in ("exact", "minmove", "reference"),
             "truth must be exact, minmove or reference")
    if cfg["truth"] == "exact":
        _require(problem == "relax", "an exact solution exists only for relax")
    if cfg["truth"] == "reference":
        _require(problem != "relax", "relax has no finite-difference reference; use exact")
    s = cfg["sampler"]
    try:
        GRFConfig(float(s["length_scale"]), float(s["variance"]), float(s["jitter"]))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid sampler block: {exc}") from exc
    _require(int(s["total"]) >= 2, "sampler.total must be at least 2")
    _require(0 < float(s["train_fraction"]) < 1, "sampler.train_fraction must be in (0, 1)")
    try:
        t = cfg["train"]
        TrainConfig(int(t["epochs"]), float(t["lr"]), t.get("batch_size"),
                    eval_every=int(t.get("eval_every", 1)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train block: {exc}") from exc
    if exp in ("relax-onet", "ac2d-onet", "ch1d-onet", "tau-study") or \
            exp in ("relax-pinn", "ch1d-pinn"):
        spec = build_network(cfg)
        if spec.branch is not None:
            _require(spec.n_sensors == grid.n,
                     f"network expects {spec.n_sensors} sensors but the grid has {grid.n} nodes")
        _require(spec.coord_dim == grid.ndim,
                 f"trunk takes {spec.coord_dim}-d coordinates on a {grid.ndim}-d grid")
    if exp in ("relax-pinn", "ch1d-pinn"):
        _require(build_network(cfg).branch is None, "PINN experiments need network.preset pinn")
    if exp == "tau-study":
        taus = cfg["taus"]
        _require(len(taus) >= 2 and all(float(x) > 0 for x in taus), "taus must be positive")
        for x in taus:
            n = float(cfg["horizon"]) / float(x)
            _require(abs(n - round(n)) < 1e-9, f"horizon is not a multiple of tau={x}")
    if exp == "smoothness-study":
        _require(all(float(x) > 0 for x in cfg["length_scales"]), "length scales must be positive")
    if exp == "oracle-run":
        _require(cfg["mode"] in ("rollout", "dataset"), "oracle-run mode is rollout or dataset")
    _require(int(cfg.get("n_steps", 0)) >= 0, "n_steps must be non-negative")
    for name in cfg["thresholds"]:
        _require(name in THRESHOLD_MIN, f"unknown threshold {name!r}")
    initial_field(cfg, grid)


def load_config(source: str) -> dict:
    """Read a config from a path, or a shipped preset by name."""
    path = Path(source)
    if not path.exists():
        candidate = PRESET_DIR / f"{source}.yaml"
        if not candidate.exists():
            raise ConfigError(f"no config file or preset named {source!r}")
        path = candidate
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return resolve_config(raw)


def list_presets() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.yaml"))


# -- builders ------------------------------------------------------------------------

def build_network(cfg: dict) -> DeepONetSpec:
    n = cfg["network"]
    preset, act = n.get("preset"), n.get("activation", "tanh")
    if preset == "relaxation":
        return relaxation_spec(act)
    if preset == "cahn_hilliard":
        return cahn_hilliard_spec(act)
    if preset == "allen_cahn":
        return allen_cahn_spec(act, n.get("padding", "same"))
    if preset == "pinn":
        dim = grid_from_dict(cfg["grid"]).ndim
        return pinn_spec(act, int(n.get("width", 20)), int(n.get("depth", 2)), dim)
    if preset == "custom":
        return DeepONetSpec.from_dict(n["spec"])
    raise ConfigError(f"unknown network preset {preset!r}")


def initial_field(cfg: dict, grid: Grid) -> Field:
    ic = cfg["initial"]
    kind = ic.get("kind")
    if kind in ("sine", "cosine"):
        w = float(ic.get("wavenumber", 1.0))
        fn = np.sin if kind == "sine" else np.cos
        if grid.ndim == 1:
            return Field.from_function(grid, lambda x: fn(w * np.pi * x))
        return Field.from_function(grid, lambda x, y: fn(w * np.pi * x) * fn(w * np.pi * y))
    if kind == "constant":
        return Field.constant(grid, float(ic["value"]))
    if kind == "grf":
        g = GRFConfig(float(ic.get("length_scale", 0.2)))
        v = grf_sample(g, layout_for(grid), 1, seed=int(ic.get("seed", 0)))[0]
        return Field(grid, v.reshape(grid.shape))
    raise ConfigError(f"unknown initial condition kind {kind!r}")


@dataclass
class Setup:
    cfg: dict
    grid: Grid
    energy: EnergySpec
    metric: MetricSpec
    tau: float

    @classmethod
    def of(cls, cfg: dict, tau: float | None = None) -> "Setup":
        return cls(cfg, grid_from_dict(cfg["grid"]), EnergySpec.from_dict(cfg["energy"]),
                   MetricSpec.from_dict(cfg["metric"]), float(tau or cfg["tau"]))

    @property
    def minmove(self) -> MinMoveConfig:
        return MinMoveConfig(self.tau, self.metric, **self.cfg["minmove"])

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.energy, self.metric, self.tau, self.grid)

    def train_config(self) -> TrainConfig:
        t = self.cfg["train"]
        return TrainConfig(int(t["epochs"]), float(t["lr"]), t.get("batch_size"),
                           int(self.cfg["seed"]), self.cfg["network"].get("activation", "tanh"),
                           checkpoint_every=int(t.get("checkpoint_every", 0)),
                           eval_every=int(t.get("eval_every", 1)))

    def reference_stepper(self) -> ReferenceStepper:
        return ReferenceStepper("ac" if self.grid.ndim == 2 else "ch",
                                self.energy.epsilon, self.tau)


# -- one-step ground truth ------------------------------------------------------------

def _reference_chunk(args):
    kind, grid_dict, eps, tau, n, u = args
    grid = grid_from_dict(grid_dict)
    fn = ac_reference_values if kind == "ac" else ch_reference_values
    return fn(u, grid, eps, tau, substeps=n)


def one_step_truth(setup: Setup, inputs: np.ndarray, jobs: int = 1) -> np.ndarray:
    """Next-step fields for a batch of inputs (rows of node values)."""
    grid, truth = setup.grid, setup.cfg["truth"]
    rows = np.asarray(inputs, dtype=np.float64).reshape((-1, grid.n))
    if truth == "exact":
        return rows * math.exp(-setup.energy.k * setup.tau)
    if truth == "minmove":
        return np.stack([minmove_values(setup.minmove, setup.energy, r.reshape(grid.shape),
                                        grid)[0].ravel() for r in rows])
    kind = "ac" if grid.ndim == 2 else "ch"
    u = rows.reshape((-1,) + grid.shape)
    # sub-step count from the whole batch keeps results independent of chunking
    n = reference_substeps(kind, grid, setup.energy.epsilon, setup.tau, u)
    if jobs <= 1 or len(u) < 2 * jobs:
        out = _reference_chunk((kind, grid.to_dict(), setup.energy.epsilon, setup.tau, n, u))
    else:
        chunks = np.array_split(u, jobs)
        args = [(kind, grid.to_dict(), setup.energy.epsilon, setup.tau, n, c) for c in chunks]
        with ProcessPoolExecutor(jobs) as pool:
            out = np.concatenate(list(pool.map(_reference_chunk, args)))
    return out.reshape(rows.shape)


# -- artifacts -------------------------------------------------------------------------

def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


def _write_fields(out: Path, problem: str, grid: Grid, values: np.ndarray, kind: str,
                  inputs: np.ndarray | None = None) -> None:
    """Field array plus metadata; ``inputs`` identifies what the fields were computed from."""
    np.save(out / "fields.npy", np.asarray(values, dtype="<f8"))
    meta = {"problem": problem, "grid": grid.to_dict(), "count": int(len(values)),
            "kind": kind, "inputs_sha256": None if inputs is None else _digest(inputs)}
    (out / "fields.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def _finite(x):
    """Summary-friendly value: floats round-trip, NaN becomes None."""
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def _thresholds(cfg: dict, summary: dict) -> dict:
    report = {}
    for name, limit in cfg["thresholds"].items():
        value = summary.get(name)
        if value is None:
            ok = False
        elif THRESHOLD_MIN[name]:
            ok = bool(value >= limit)
        else:
            ok = bool(value <= limit)
        report[name] = {"value": value, "limit": limit, "passed": ok}
    return report


# -- runners ---------------------------------------------------------------------------

def _run_onet(cfg: dict, out: Path, jobs: int) -> dict:
    setup = Setup.of(cfg)
    grid, loss = setup.grid, setup.loss
    s = cfg["sampler"]
    gcfg = GRFConfig(float(s["length_scale"]), float(s["variance"]), float(s["jitter"]),
                     int(cfg["seed"]))
    train, test = make_dataset(gcfg, layout_for(grid), int(s["total"]),
                               float(s["train_fraction"]), int(cfg["seed"]))
    train.save(out / "data", meta={"grf": s})
    test.save(out / "data", meta={"grf": s})
    log.info("dataset: %d train / %d test fields", len(train), len(test))
    truth = one_step_truth(setup, test.values, jobs)
    spec = build_network(cfg)
    params, history = train_deeponet(spec, train.values, loss, setup.train_config(),
                                     test.values, truth, checkpoint_dir=out / "checkpoints",
                                     log=log.info)
    history.write(out / "history.csv")
    save_checkpoint(out / "checkpoints" / "final.ckpt", params, seed=int(cfg["seed"]),
                    sensors=layout_for(grid))
    conserve = bool(loss.conserve_mass)
    pred = predict_batch(params, grid, test.values, conserve)
    _write_fields(out, cfg["problem"], grid, pred, "onet-test-predictions", test.values)

    stepper = DeepONetStepper(params, setup.tau, setup.energy, conserve)
    u0 = initial_field(cfg, grid)
    n_steps = int(cfg["n_steps"])
    traj = rollout(stepper, u0, n_steps)
    traj.export(out / "rollout")
    summary = {
        "test_r2": r2_score(pred, truth),
        "test_mse": mse(pred, truth),
        "first_train_loss": history.train_loss[0] if history.train_loss else None,
        "final_train_loss": history.train_loss[-1] if history.train_loss else None,
        "rollout_energy": list(traj.energies),
    }
    if cfg["problem"] == "relax":
        exact = [relaxation_exact(setup.energy.k, u0, t).values for t in traj.times]
        summary["rollout_max_error"] = float(max(np.max(np.abs(f.values - e))
                                                 for f, e in zip(traj.fields, exact)))
    else:
        ref = rollout(setup.reference_stepper(), u0, n_steps)
        ref.export(out / "reference")
        summary["rollout_step_mse"] = [mse([a], [b]) for a, b in zip(traj.fields, ref.fields)]
    # dissipation property on held-out inputs
    k = min(100, len(test))
    e_in = [total_energy(setup.energy, Field(grid, r.reshape(grid.shape)))
            for r in test.values[:k]]
    e_out = [total_energy(setup.energy, Field(grid, r.reshape(grid.shape))) for r in pred[:k]]
    summary["property_energy_increases"] = int(sum(b > a for a, b in zip(e_in, e_out)))
    summary["property_mse"] = mse(pred[:k], truth[:k])
    if conserve:
        w = grid.weights().ravel()
        summary["mass_drift"] = float(np.max(np.abs((pred - test.values) @ w)) / grid.measure)
    return summary


def _run_pinn(cfg: dict, out: Path, jobs: int) -> dict:
    setup = Setup.of(cfg)
    grid = setup.grid
    u0 = initial_field(cfg, grid)
    spec = build_network(cfg)
    res = train_pinn_sequence(PinnProblem(setup.loss, u0, spec), int(cfg["n_steps"]),
                              setup.train_config(), rounds=int(cfg.get("rounds", 1)),
                              log=log.info)
    res.trajectory.export(out / "pinn")
    (out / "checkpoints").mkdir(exist_ok=True)
    for k, p in enumerate(res.networks, start=1):
        save_checkpoint(out / "checkpoints" / f"step_{k:03d}.ckpt", p, seed=int(cfg["seed"]))
    fields = np.stack([f.values.ravel() for f in res.trajectory.fields])
    _write_fields(out, cfg["problem"], grid, fields, "pinn-trajectory", u0.values)
    energies = list(res.trajectory.energies)
    summary = {"energy": energies, "step_loss": res.losses,
               "energy_increases": int(sum(b > a for a, b in zip(energies, energies[1:])))}
    sup = [float(np.max(np.abs(f.values))) for f in res.trajectory.fields]
    summary["sup_norm"] = sup
    if cfg["problem"] == "relax":
        k, tau = setup.energy.k, setup.tau
        amp0 = sup[0]
        rel = [abs(a / (amp0 * (1 + k * tau) ** -i) - 1.0) for i, a in enumerate(sup)]
        summary["amp_rel_error"] = float(max(rel))
        summary["max_rel_error"] = float(max(
            np.max(np.abs(f.values - relaxation_exact(k, u0, t).values)) / (amp0 * math.exp(-k * t))
            for f, t in zip(res.trajectory.fields, res.trajectory.times)))
    else:
        ref = rollout(setup.reference_stepper(), u0, int(cfg["n_steps"]))
        ref.export(out / "reference")
        step_mse = [mse([a], [b]) for a, b in zip(res.trajectory.fields, ref.fields)]
        summary["step_mse"] = step_mse
        summary["max_step_mse"] = float(max(step_mse))
        summary["monotone"] = bool(all(b < a for a, b in zip(sup, sup[1:])))
        means = [float(mean_values(f.values, grid)) for f in res.trajectory.fields]
        summary["mass_drift"] = float(max(abs(m - means[0]) for m in means))
        # network-free oracles for the same run: conservation and dissipation
        mm = rollout(MinMoveStepper(setup.minmove, setup.energy), u0, int(cfg["n_steps"]))
        mm.export(out / "minmove")
        summary["oracle_energy_increases"] = mm.energy_increases()
        summary["oracle_mass_drift"] = float(max(
            abs(float(mean_values(f.values, grid)) - float(mean_values(u0.values, grid)))
            for f in mm.fields))
        summary["reference_mass_drift"] = float(max(
            abs(float(mean_values(f.values, grid)) - float(mean_values(u0.values, grid)))
            for f in ref.fields))
    return summary


def _run_tau_study(cfg: dict, out: Path, jobs: int) -> dict:
    rows = []
    horizon = float(cfg["horizon"])
    for tau in cfg["taus"]:
        tau = float(tau)
        sub = _merge(cfg, {"tau": tau})
        setup = Setup.of(sub)
        grid = setup.grid
        s = cfg["sampler"]
        gcfg = GRFConfig(float(s["length_scale"]), float(s["variance"]), float(s["jitter"]),
                         int(cfg["seed"]))
        train, test = make_dataset(gcfg, layout_for(grid), int(s["total"]),
                                   float(s["train_fraction"]), int(cfg["seed"]))
        truth = one_step_truth(setup, test.values, jobs)
        params, history = train_deeponet(build_network(cfg), train.values, setup.loss,
                                         setup.train_config(), test.values, truth,
                                         log=log.info)
        history.write(out / f"history_tau_{tau:g}.csv")
        n_steps = int(round(horizon / tau))
        stepper = DeepONetStepper(params, tau, setup.energy)
        u = test.values[: int(cfg["eval_samples"])]
        for _ in range(n_steps):
            u = stepper.predict_values(u, grid)
        exact = test.values[: len(u)] * math.exp(-setup.energy.k * horizon)
        err = float(np.linalg.norm(u - exact) / np.linalg.norm(exact))
        rows.append({"tau": tau, "steps": n_steps, "rel_error": err,
                     "test_r2": r2_score(predict_batch(params, grid, test.values), truth)})
        log.info("tau %g: relative error at t=%g is %.4f", tau, horizon, err)
    lines = ["tau,steps,rel_error,test_r2"] + \
        [f"{r['tau']!r},{r['steps']},{r['rel_error']!r},{r['test_r2']!r}" for r in rows]
    (out / "tau_study.csv").write_text("\n".join(lines) + "\n")
    errs = [r["rel_error"] for r in rows]
    return {"rows": rows, "monotone": bool(all(b > a for a, b in zip(errs, errs[1:])))}


def _run_smoothness(cfg: dict, out: Path, jobs: int) -> dict:
    grid = grid_from_dict(cfg["grid"])
    rows = []
    for i, l in enumerate(cfg["length_scales"]):
        g = GRFConfig(float(l), float(cfg["sampler"]["variance"]),
                      float(cfg["sampler"]["jitter"]), int(cfg["seed"]) + i)
        samples = grf_sample(g, layout_for(grid), int(cfg["samples"]))
        rows.append({"length_scale": float(l),
                     "roughness": second_difference_roughness(samples)})
    lines = ["length_scale,roughness"] + [f"{r['length_scale']!r},{r['roughness']!r}" for r in rows]
    (out / "smoothness.csv").write_text("\n".join(lines) + "\n")
    rough = [r["roughness"] for r in rows]
    return {"rows": rows, "monotone": bool(all(b < a for a, b in zip(rough, rough[1:])))}


def _run_oracle(cfg: dict, out: Path, jobs: int) -> dict:
    setup = Setup.of(cfg)
    grid = setup.grid
    if cfg["mode"] == "dataset":
        s = cfg["sampler"]
        gcfg = GRFConfig(float(s["length_scale"]), float(s["variance"]), float(s["jitter"]),
                         int(cfg["seed"]))
        _, test = make_dataset(gcfg, layout_for(grid), int(s["total"]),
                               float(s["train_fraction"]), int(cfg["seed"]))
        truth = one_step_truth(setup, test.values, jobs)
        _write_fields(out, cfg["problem"], grid, truth, f"{cfg['truth']}-one-step", test.values)
        return {"count": len(truth), "truth": cfg["truth"]}
    u0 = initial_field(cfg, grid)
    mm = rollout(MinMoveStepper(setup.minmove, setup.energy), u0, int(cfg["n_steps"]))
    mm.export(out / "minmove")
    fields = np.stack([f.values.ravel() for f in mm.fields])
    _write_fields(out, cfg["problem"], grid, fields, "minmove-trajectory", u0.values)
    residuals = [implicit_euler_residual(setup.minmove, setup.energy, a, b)
                 for a, b in zip(mm.fields, mm.fields[1:])]
    means = [float(mean_values(f.values, grid)) for f in mm.fields]
    summary = {"energy": list(mm.energies), "energy_increases": mm.energy_increases(),
               "max_residual": float(max(residuals, default=0.0)),
               "mass_drift": float(max(abs(m - means[0]) for m in means))}
    if cfg["problem"] == "relax":
        t = mm.times[-1]
        exact = relaxation_exact(setup.energy.k, u0, t)
        scale = float(np.max(np.abs(exact.values)))
        summary["max_error"] = float(np.max(np.abs(mm.final.values - exact.values)))
        summary["max_rel_error"] = summary["max_error"] / scale
        summary["final_time"] = t
    else:
        ref = rollout(setup.reference_stepper(), u0, int(cfg["n_steps"]))
        ref.export(out / "reference")
        summary["step_mse_vs_reference"] = [mse([a], [b]) for a, b in zip(mm.fields, ref.fields)]
        summary["oracle_mse"] = float(max(summary["step_mse_vs_reference"]))
    return summary


RUNNERS = {
    "relax-pinn": _run_pinn, "ch1d-pinn": _run_pinn,
    "relax-onet": _run_onet, "ac2d-onet": _run_onet, "ch1d-onet": _run_onet,
    "tau-study": _run_tau_study, "smoothness-study": _run_smoothness,
    "oracle-run": _run_oracle,
}


def run_experiment(cfg: dict, out: Path, jobs: int = 1) -> dict:
    """Run a resolved config into ``out``; returns the summary (also written to disk)."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    summary = RUNNERS[cfg["experiment"]](cfg, out, jobs)
    summary = {k: _finite(v) if not isinstance(v, list) or not v or not isinstance(v[0], dict)
               else [{kk: _finite(vv) for kk, vv in row.items()} for row in v]
               for k, v in summary.items()}
    summary["experiment"] = cfg["experiment"]
    summary["problem"] = cfg["problem"]
    summary["seed"] = cfg["seed"]
    summary["thresholds"] = _thresholds(cfg, summary)
    summary["passed"] = all(t["passed"] for t in summary["thresholds"].values())
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


# -- comparison -------------------------------------------------------------------------

class IncompatibleRunsError(ValueError):
    pass


def load_fields(run_dir) -> tuple[dict, np.ndarray]:
    run_dir = Path(run_dir)
    meta_path = run_dir / "fields.json"
    if not meta_path.exists():
        raise IncompatibleRunsError(f"{run_dir} has no fields artifact")
    meta = json.loads(meta_path.read_text())
    return meta, np.load(run_dir / "fields.npy")


def compare_runs(run_a, run_b) -> dict:
    meta_a, fa = load_fields(run_a)
    meta_b, fb = load_fields(run_b)
    if meta_a["grid"] != meta_b["grid"]:
        raise IncompatibleRunsError(f"grids differ: {meta_a['grid']} vs {meta_b['grid']}")
    if meta_a["problem"] != meta_b["problem"]:
        raise IncompatibleRunsError(f"problems differ: {meta_a['problem']} vs {meta_b['problem']}")
    sa, sb = meta_a.get("inputs_sha256"), meta_b.get("inputs_sha256")
    if sa and sb and sa != sb:
        raise IncompatibleRunsError("runs were computed from different input fields")
    if fa.shape != fb.shape:
        raise IncompatibleRunsError(f"field arrays differ in shape: {fa.shape} vs {fb.shape}")
    per = np.mean((fa - fb) ** 2, axis=1)
    return {"problem": meta_a["problem"], "count": int(len(fa)),
            "mse": float(np.mean((fa - fb) ** 2)),
            "r2": r2_score(fa, fb) if np.any(fb != fb.mean()) else None,
            "max_error": float(np.max(np.abs(fa - fb))) if fa.size else 0.0,
            "per_field_mse": [float(x) for x in per]}
