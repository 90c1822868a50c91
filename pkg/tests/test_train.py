import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import optimize

from pfonet import autodiff as ad
from pfonet.autodiff import Tensor
from pfonet.energy import EnergySpec, total_energy
from pfonet.field import Field, Grid1D, Grid2D
from pfonet.metric import MetricSpec, hneg1_inner, poisson_operator
from pfonet.network import DeepONetSpec, MLPSpec, init_params, pinn_spec
from pfonet.solver import MinMoveConfig, minmove_step
from pfonet.train import (History, LossConfig, Net, PinnProblem, TrainConfig, distance_tensor,
                          loss_allen_cahn, loss_cahn_hilliard, loss_relax, mse, nodal_loss,
                          predict_batch, r2_score, train_deeponet, train_pinn_sequence)

Q10 = EnergySpec.quadratic(10.0)
GL25 = EnergySpec.ginzburg_landau(0.25)
L2 = MetricSpec.l2()
H1 = MetricSpec.hneg1()
G100 = Grid1D(100)
G40 = Grid1D(40, 0.0, 1.0)
RELAX = LossConfig(Q10, L2, 0.01, G100)


def constant_net(spec: DeepONetSpec, value: float) -> Net:
    """A network whose output is ``value`` everywhere (all weights zero)."""
    p = init_params(spec, 0)
    arrays = {k: np.zeros_like(v) for k, v in p.arrays.items()}
    arrays["b0"] = np.array(value)
    return Net(spec, arrays)


class FrozenNet:
    """Stand-in network returning fixed node values (zero coordinate derivative)."""

    def __init__(self, spec, values):
        self.spec, self.values_ = spec, values

    def __call__(self, grid, u_k=None, with_grad=False):
        from pfonet.train import Prediction
        v = Tensor(np.atleast_2d(self.values_))
        return Prediction(v, None)


def test_loss_config_defaults():
    assert RELAX.n_F == RELAX.n_d == 100
    assert LossConfig(GL25, H1, 5e-4, G40).conserve_mass
    assert not LossConfig(GL25, L2, 5e-3, G40).conserve_mass
    with pytest.raises(ValueError):
        LossConfig(Q10, L2, 0.0, G100)


def test_relax_loss_zero():
    z = np.zeros(100)
    assert float(loss_relax(RELAX, z, z).value) == 0.0


def test_relax_loss_pure_energy():
    one = np.ones(100)
    assert float(loss_relax(RELAX, one, one).value) == pytest.approx(10.0, abs=1e-12)


def test_relax_loss_minimizer_matches_oracle():
    one = np.ones(100)

    def f(v):
        val, g = ad.value_and_grad(lambda p: loss_relax(RELAX, p["u"], one), {"u": v})
        return val, g["u"]

    res = optimize.minimize(f, np.zeros(100), jac=True, method="L-BFGS-B",
                            options={"gtol": 1e-12, "ftol": 1e-15})
    np.testing.assert_allclose(res.x, 1 / 1.1, atol=1e-6)
    oracle = minmove_step(MinMoveConfig(0.01, L2), Q10, Field(G100, one))
    np.testing.assert_allclose(res.x, oracle.values, atol=1e-6)


def test_relax_loss_checks_kind():
    with pytest.raises(ValueError):
        loss_relax(LossConfig(GL25, L2, 0.01, G100), np.zeros(100), np.zeros(100))


def test_allen_cahn_loss_frozen_at_equilibrium():
    g = Grid2D(28, 28)
    cfg = LossConfig(GL25, L2, 0.005, g)
    u_k = np.ones(784)
    net = constant_net(pinn_spec(coord_dim=2), 1.0)
    assert float(loss_allen_cahn(cfg, net, u_k).value) == pytest.approx(0.0, abs=1e-12)


def test_allen_cahn_loss_zero_field():
    g = Grid2D(28, 28)
    cfg = LossConfig(GL25, L2, 0.005, g)
    net = constant_net(pinn_spec(coord_dim=2), 0.0)
    assert float(loss_allen_cahn(cfg, net, np.zeros(784)).value) == pytest.approx(16.0, abs=1e-9)


def test_cahn_hilliard_loss_frozen_is_energy():
    cfg = LossConfig(GL25, H1, 5e-4, G40)
    u_k = 0.3 + 0.5 * np.cos(np.pi * G40.nodes())
    loss = float(loss_cahn_hilliard(cfg, FrozenNet(pinn_spec(), u_k), u_k).value)
    assert loss == pytest.approx(total_energy(GL25, Field(G40, u_k)), rel=1e-12)


def test_cahn_hilliard_distance_analytic():
    g = Grid1D(201, 0.0, 1.0)
    tau = 1e-3
    delta = Tensor(np.cos(np.pi * g.nodes())[None, :])
    term = float(distance_tensor(H1, delta, g).value[0]) / (2 * tau)
    assert term == pytest.approx(1 / (2 * tau) / (2 * np.pi**2), abs=1e-3)


def test_cahn_hilliard_loss_conserves_mass_through_projection():
    cfg = LossConfig(GL25, H1, 5e-4, G40)
    u_k = np.cos(4 * np.pi * G40.nodes())
    # an output with a different mean is shifted back rather than rejected
    val = float(loss_cahn_hilliard(cfg, FrozenNet(pinn_spec(), u_k + 0.2), u_k).value)
    assert val == pytest.approx(total_energy(GL25, Field(G40, u_k)), rel=1e-12)


def test_cahn_hilliard_loss_checks_metric():
    with pytest.raises(ValueError):
        loss_cahn_hilliard(LossConfig(GL25, L2, 5e-4, G40), constant_net(pinn_spec(), 0.0),
                           np.zeros(40))


@settings(max_examples=20)
@given(arrays(np.float64, 40, elements=st.floats(-2, 2)))
def test_hneg1_distance_nonnegative(v):
    v = v - np.dot(G40.weights(), v) / G40.measure
    d = float(distance_tensor(H1, Tensor(v[None, :]), G40).value[0])
    assert d >= 0
    assert d == pytest.approx(hneg1_inner(H1, poisson_operator(G40), Field(G40, v), Field(G40, v)),
                              rel=1e-9, abs=1e-15)


def test_hneg1_distance_nonnegative_bulk():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((1000, 40))
    v -= (v @ G40.weights())[:, None] / G40.measure
    assert np.all(distance_tensor(H1, Tensor(v), G40).value >= 0)


@settings(max_examples=10)
@given(st.integers(0, 1000), st.sampled_from(["relax", "ac", "ch"]))
def test_losses_nonnegative(seed, kind):
    rng = np.random.default_rng(seed)
    if kind == "relax":
        cfg, g = RELAX, G100
    elif kind == "ac":
        cfg, g = LossConfig(GL25, L2, 0.01, G40), G40
    else:
        cfg, g = LossConfig(GL25, H1, 5e-4, G40), G40
    u = rng.standard_normal((3, g.n))
    v = rng.standard_normal((3, g.n))
    assert float(nodal_loss(cfg, v, u).value) >= 0


@pytest.mark.parametrize("energy,grid,tau", [(Q10, G100, 0.01), (GL25, G40, 1e-3)])
def test_nodal_loss_minimizer_matches_minmove(energy, grid, tau):
    cfg = LossConfig(energy, L2, tau, grid)
    u_k = 0.8 * np.sin(np.pi * grid.nodes()) + 0.1

    def f(v):
        val, g = ad.value_and_grad(lambda p: nodal_loss(cfg, p["u"], u_k), {"u": v})
        return val, g["u"]

    res = optimize.minimize(f, u_k.copy(), jac=True, method="L-BFGS-B",
                            options={"gtol": 1e-12, "ftol": 1e-16, "maxiter": 5000})
    oracle = minmove_step(MinMoveConfig(tau, L2), energy, Field(grid, u_k))
    np.testing.assert_allclose(res.x, oracle.values, atol=1e-6)


# metrics ----------------------------------------------------------------------------

def test_r2_examples():
    t = np.array([[1.0, 2.0, 4.0]])
    assert r2_score(t, t) == 1.0
    assert r2_score(np.full_like(t, t.mean()), t) == pytest.approx(0.0, abs=1e-15)
    # truth (0, 1), prediction (1, 0): SS_res = 2, SS_tot = 0.5
    assert r2_score([np.array([1.0, 0.0])], [np.array([0.0, 1.0])]) == pytest.approx(-3.0)


def test_r2_rejects_constant_truth_and_shape_mismatch():
    with pytest.raises(ValueError):
        r2_score(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        r2_score(np.ones((2, 3)), np.ones((3, 3)))


def test_r2_accepts_fields():
    f = [Field(G40, np.cos(G40.nodes())), Field(G40, np.sin(G40.nodes()))]
    assert r2_score(f, f) == 1.0
    assert mse(f, f) == 0.0


def test_history_csv(tmp_path):
    h = History()
    h.append(1, 2.5, 0.1, 0.9)
    h.append(2, 2.0, float("nan"), float("nan"))
    h.write(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,test_mse,test_r2" and len(lines) == 3


# training procedures ------------------------------------------------------------------

def small_relax_spec(sensors=100, p=16):
    return DeepONetSpec(trunk=MLPSpec((1, 24, 24, p)), branch=MLPSpec((sensors, 24, p)))


def test_train_deeponet_loss_decreases_and_is_deterministic():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((32, 100))
    cfg = TrainConfig(epochs=20, lr=1e-3, batch_size=8, seed=3)
    p1, h1 = train_deeponet(small_relax_spec(), X, RELAX, cfg, X[:4], X[:4] / 1.1)
    p2, h2 = train_deeponet(small_relax_spec(), X, RELAX, cfg, X[:4], X[:4] / 1.1)
    assert np.array_equal(p1.flat(), p2.flat())
    assert h1.train_loss[-1] < h1.train_loss[0]
    assert np.all(np.isfinite(h1.train_loss))
    assert np.isfinite(h1.test_r2[-1])


def test_train_deeponet_checks_sensor_count():
    with pytest.raises(ValueError):
        train_deeponet(small_relax_spec(sensors=50), np.zeros((4, 100)), RELAX, TrainConfig(epochs=1))


def test_train_deeponet_checkpoints(tmp_path):
    X = np.random.default_rng(0).standard_normal((8, 100))
    train_deeponet(small_relax_spec(), X, RELAX,
                   TrainConfig(epochs=4, batch_size=4, checkpoint_every=2), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_00002.ckpt", "epoch_00004.ckpt"]


def test_predict_batch_mass_shift():
    spec = DeepONetSpec(trunk=MLPSpec((1, 8, 4)), branch=MLPSpec((40, 8, 4)))
    params = init_params(spec, 0)
    U = np.random.default_rng(1).standard_normal((5, 40))
    out = predict_batch(params, G40, U, conserve_mass=True)
    np.testing.assert_allclose(out @ G40.weights(), U @ G40.weights(), atol=1e-12)


def relax_pinn(steps=10, epochs=500):
    u0 = Field.from_function(G100, lambda x: np.sin(np.pi * x))
    problem = PinnProblem(RELAX, u0, pinn_spec("tanh", 20, 2))
    return u0, train_pinn_sequence(problem, steps, TrainConfig(epochs=epochs, batch_size=None))


def test_pinn_relaxation_matches_minmove_iterates():
    u0, res = relax_pinn()
    amp0 = np.max(np.abs(u0.values))
    for i, f in enumerate(res.trajectory.fields):
        expected = amp0 * 1.1 ** -i
        assert np.max(np.abs(f.values)) == pytest.approx(expected, rel=0.03)
    e = res.trajectory.energies
    assert all(b <= a + 1e-3 for a, b in zip(e, e[1:]))
    assert len(res.networks) == 10 and all(n.spec.branch is None for n in res.networks)


def test_pinn_rejects_branch_network():
    u0 = Field.constant(G100, 0.0)
    with pytest.raises(ValueError):
        PinnProblem(RELAX, u0, small_relax_spec())


def test_pinn_cahn_hilliard_sup_norm_decays():
    u0 = Field.from_function(G40, lambda x: np.cos(4 * np.pi * x))
    cfg = LossConfig(GL25, H1, 5e-4, G40)
    res = train_pinn_sequence(PinnProblem(cfg, u0, pinn_spec()), 4,
                              TrainConfig(epochs=300, batch_size=None))
    sup = [np.max(np.abs(f.values)) for f in res.trajectory.fields]
    assert all(b < a for a, b in zip(sup, sup[1:]))


def test_pinn_is_degenerate_deeponet():
    # a DeepONet trained on the single input u0 lands on the same first step as the PINN
    u0, res = relax_pinn(steps=1, epochs=1500)
    spec = DeepONetSpec(trunk=MLPSpec((1, 20, 20, 20)), branch=MLPSpec((100, 20, 20)))
    params, _ = train_deeponet(spec, u0.values[None, :], RELAX,
                               TrainConfig(epochs=3000, batch_size=None))
    onet = predict_batch(params, G100, u0.values)[0]
    assert mse([onet], [res.trajectory.fields[1].values]) < 1e-4
