import numpy as np
import pytest

from valleysim.errors import ConfigurationError, ParameterError
from valleysim.lattice import (
    Field,
    Grid,
    InitialCondition,
    field_from_binary,
    field_to_binary,
    field_to_csv,
    l1_norm,
    sample_initial,
    sup_norm,
)


def test_grid_sites_and_dx():
    g = Grid(4.0, 16)
    assert g.dx == 0.5
    assert g.sites[0] == -4.0
    assert g.sites[-1] == 3.5
    assert g.sites[g.origin_index] == 0.0


@pytest.mark.parametrize("kwargs", [
    dict(half_width=0.0, n_points=16),
    dict(half_width=4.0, n_points=6),
    dict(half_width=4.0, n_points=15),
    dict(half_width=4.0, n_points=16, boundary="absorbing"),
])
def test_grid_rejects_bad_parameters(kwargs):
    with pytest.raises(ParameterError):
        Grid(**kwargs)


def test_constant_one_is_all_ones():
    g = Grid(4.0, 16)
    f = sample_initial(InitialCondition.constant_one(), g)
    assert np.array_equal(f.values, np.ones(16))


def test_gaussian_value_at_origin():
    g = Grid(4.0, 16)
    f = sample_initial(InitialCondition.gaussian(1.0), g)
    assert f.values[g.origin_index] == pytest.approx(0.3989423, abs=1e-7)


def test_bump_is_a_hat():
    g = Grid(4.0, 16)  # dx = 0.5
    f = sample_initial(InitialCondition.bump(0.0, 1.0), g)
    x = g.sites
    assert f.values[x == 0.0] == 1.0
    assert np.all(f.values[np.abs(x) == 0.5] == 0.5)
    assert np.all(f.values[np.abs(x) >= 1.0] == 0.0)


def test_tabulated_length_mismatch():
    g = Grid(4.0, 16)
    with pytest.raises(ConfigurationError):
        sample_initial(InitialCondition.tabulated(np.ones(10)), g)


def test_sample_initial_deterministic():
    g = Grid(4.0, 64)
    a = sample_initial(InitialCondition.gaussian(2.0), g)
    b = sample_initial(InitialCondition.gaussian(2.0), g)
    assert np.array_equal(a.values, b.values)


def test_l1_norm_of_constant():
    g = Grid(4.0, 16)
    f = sample_initial(InitialCondition.constant_one(), g)
    assert l1_norm(f) == 8.0
    assert l1_norm(Field(g, np.zeros(16))) == 0.0


def test_l1_norm_of_hat_matches_brute_force():
    g = Grid(8.0, 1024)
    f = sample_initial(InitialCondition.bump(0.0, 1.0), g)
    brute = sum(abs(1.0 - abs(x)) * g.dx for x in g.sites if abs(x) < 1.0)
    assert l1_norm(f) == pytest.approx(brute, rel=1e-12)
    assert abs(l1_norm(f) - 1.0) <= g.dx


def test_sup_norm():
    g = Grid(4.0, 16)
    assert sup_norm(sample_initial(InitialCondition.constant_one(), g)) == 1.0
    assert sup_norm(Field(g, np.zeros(16))) == 0.0
    v = np.zeros(16)
    v[3] = 3.7
    assert sup_norm(Field(g, v)) == 3.7


def test_discrete_hoelder_inequality():
    rng = np.random.default_rng(7)
    g = Grid(4.0, 64)
    for _ in range(20):
        f = Field(g, rng.standard_normal(64) * rng.uniform(0.1, 10))
        assert l1_norm(f) <= 2 * g.half_width * sup_norm(f)


def test_field_requires_finite_values():
    g = Grid(4.0, 16)
    v = np.ones(16)
    v[0] = np.nan
    with pytest.raises(ParameterError):
        Field(g, v)


def test_field_values_read_only():
    g = Grid(4.0, 16)
    f = sample_initial(InitialCondition.constant_one(), g)
    with pytest.raises(ValueError):
        f.values[0] = 2.0


def test_csv_roundtrip(tmp_path):
    g = Grid(4.0, 64)
    f = sample_initial(InitialCondition.gaussian(1.3), g)
    path = tmp_path / "field.csv"
    field_to_csv(f, path)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert np.array_equal(data[:, 0], g.sites)
    assert np.array_equal(data[:, 1], f.values)


def test_binary_roundtrip(tmp_path):
    g = Grid(4.0, 64, boundary="dirichlet_zero")
    f = sample_initial(InitialCondition.gaussian(0.7), g)
    path = tmp_path / "field.bin"
    field_to_binary(f, path)
    g2 = field_from_binary(path)
    assert g2.grid == g
    assert np.array_equal(g2.values, f.values)
