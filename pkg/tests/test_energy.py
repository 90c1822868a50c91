import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate as spi

from pfonet.energy import (EnergySpec, bulk_density, bulk_density_deriv, energy_values,
                           functional_derivative, total_energy)
from pfonet.field import Field, Grid1D, Grid2D, integrate

GL = EnergySpec.ginzburg_landau(0.25)
Q10 = EnergySpec.quadratic(10.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        EnergySpec("cubic")
    with pytest.raises(ValueError):
        EnergySpec.quadratic(0.0)
    with pytest.raises(ValueError):
        EnergySpec.ginzburg_landau(-1.0)


def test_spec_dict_round_trip():
    for s in (GL, Q10):
        assert EnergySpec.from_dict(s.to_dict()) == s


@pytest.mark.parametrize("u,expected", [(1.0, 0.0), (-1.0, 0.0), (0.0, 0.25)])
def test_bulk_density_double_well(u, expected):
    assert bulk_density(GL, u) == pytest.approx(expected, abs=1e-15)


def test_bulk_density_quadratic():
    assert bulk_density(Q10, 1.0) == pytest.approx(5.0)


@pytest.mark.parametrize("u", [-1.0, 0.0, 1.0])
def test_double_well_stationary_points(u):
    assert bulk_density_deriv(GL, u) == pytest.approx(0.0, abs=1e-15)


def test_bulk_derivative_values():
    assert bulk_density_deriv(GL, 2.0) == pytest.approx(6.0)
    assert bulk_density_deriv(Q10, 0.5) == pytest.approx(5.0)


def test_total_energy_at_well_minimum_is_zero():
    assert total_energy(GL, Field.constant(Grid2D(28, 28), 1.0)) == pytest.approx(0.0, abs=1e-14)


def test_total_energy_zero_field_closed_form():
    assert total_energy(GL, Field.constant(Grid2D(28, 28), 0.0)) == pytest.approx(16.0, abs=1e-9)


def test_total_energy_quadratic_sine():
    f = Field.from_function(Grid1D(201), lambda x: np.sin(np.pi * x))
    assert total_energy(Q10, f) == pytest.approx(5.0, abs=1e-3)


def test_total_energy_matches_quadrature_oracle():
    # continuous energy of u = 0.5 cos(pi x) with eps = 0.25 on [0, 1], via adaptive quadrature
    eps = 0.25
    dens = lambda x: ((0.25 * np.cos(np.pi * x) ** 2 - 1) ** 2 / 4) / eps**2 \
        + 0.5 * (0.5 * np.pi * np.sin(np.pi * x)) ** 2
    oracle, _ = spi.quad(dens, 0.0, 1.0, epsabs=1e-13)
    f = Field.from_function(Grid1D(801, 0.0, 1.0), lambda x: 0.5 * np.cos(np.pi * x))
    assert total_energy(GL, f) == pytest.approx(oracle, rel=1e-5)


def test_functional_derivative_equilibrium():
    mu = functional_derivative(GL, Field.constant(Grid1D(50), 1.0))
    assert np.all(mu.values == 0.0)


def test_functional_derivative_constant_two():
    mu = functional_derivative(GL, Field.constant(Grid2D(10, 10), 2.0))
    np.testing.assert_allclose(mu.values, 96.0, rtol=1e-14)


def test_functional_derivative_quadratic():
    f = Field.from_function(Grid1D(101), lambda x: np.sin(np.pi * x))
    np.testing.assert_allclose(functional_derivative(Q10, f).values, 10 * f.values, rtol=1e-14)


@given(arrays(np.float64, 12, elements=st.floats(-2, 2)),
       arrays(np.float64, 12, elements=st.floats(-1, 1)),
       st.sampled_from([GL, EnergySpec.ginzburg_landau(0.7), Q10]))
def test_functional_derivative_is_discrete_gradient(u, h, spec):
    # dF(u)[h] = integral mu h, with the same trapezoid weights as the energy
    g = Grid1D(12, 0.0, 1.0)
    e = 1e-6
    fd = (energy_values(spec, u + e * h, g) - energy_values(spec, u - e * h, g)) / (2 * e)
    mu = functional_derivative(spec, Field(g, u))
    exact = integrate(mu * Field(g, h))
    assert fd == pytest.approx(exact, rel=1e-5, abs=1e-5)


@given(arrays(np.float64, (4, 5), elements=st.floats(-3, 3)))
def test_energy_nonnegative(v):
    g = Grid2D(4, 5)
    assert total_energy(GL, Field(g, v)) >= 0.0
    assert total_energy(Q10, Field(g, v)) >= 0.0
