import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moofuse.errors import ConfigError
from moofuse.moo import (FlatGradient, MooConfig, SimplexWeights, average_gradient, conflict_averse_direction,
                         objective, solve_simplex, update_direction)

from .oracles import direct_objective, grid_minimum


def fg(*xs):
    return [FlatGradient(np.array(x, dtype=np.float64)) for x in xs]


def test_average_examples():
    g = np.array([0.3, -2.0, 5.0])
    assert np.array_equal(average_gradient(fg(g, g)).coords, g)
    assert np.array_equal(average_gradient(fg([1, 0], [0, 1])).coords, [0.5, 0.5])
    assert np.array_equal(average_gradient(fg(g, -g)).coords, np.zeros(3))


def test_objective_beta_zero():
    G = fg([1.0, 2.0], [-3.0, 0.5])
    g0 = average_gradient(G)
    w = SimplexWeights(np.array([0.3, 0.7]))
    gw = 0.3 * G[0].coords + 0.7 * G[1].coords
    assert objective(w, G, g0, 0.0) == pytest.approx(float(gw @ g0.coords), abs=1e-15)


@pytest.mark.parametrize("w", [[1, 0, 0], [0.2, 0.3, 0.5], [1 / 3] * 3])
def test_objective_constant_for_identical(w):
    g = np.array([0.5, -1.0, 2.0])
    G = fg(g, g, g)
    expected = 1.8 * float(g @ g)
    assert objective(SimplexWeights(np.array(w, dtype=float)), G, average_gradient(G), 0.8) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_objective_matches_summation(seed):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(3, 7))
    w = rng.dirichlet(np.ones(3))
    grads = fg(*G)
    got = objective(SimplexWeights(w), grads, average_gradient(grads), 0.6)
    assert abs(got - direct_objective(w.tolist(), G.tolist(), 0.6)) < 1e-12


@pytest.mark.parametrize("beta", [0.0, 0.1, 0.5, 0.9, 0.99])
def test_symmetric_conflict(beta):
    G = fg([1, 0], [0, 1])
    w = solve_simplex(G, average_gradient(G), MooConfig(beta=beta))
    assert np.array_equal(w.weights, [0.5, 0.5])


@pytest.mark.parametrize("m", [2, 3])
def test_identical_returns_uniform(m):
    G = fg(*[[0.4, -1.2, 3.0]] * m)
    w = solve_simplex(G, average_gradient(G), MooConfig())
    assert np.array_equal(w.weights, np.full(m, 1 / m))
    assert not w.degenerate


def test_hand_instance_vs_grid():
    raw = [[1.0, 0.0], [-0.5, 1.0]]
    G = fg(*raw)
    w = solve_simplex(G, average_gradient(G), MooConfig(beta=0.5))
    w_ref, v_ref = grid_minimum(raw, 0.5, 1e-4)
    assert np.abs(w.weights - w_ref).max() < 1e-3
    assert direct_objective(w.weights.tolist(), raw, 0.5) <= v_ref + 1e-6


def test_zero_gradients_flagged():
    G = fg([0, 0, 0], [0, 0, 0])
    w = solve_simplex(G, average_gradient(G), MooConfig())
    assert w.degenerate and np.array_equal(w.weights, [0.5, 0.5])
    assert np.array_equal(update_direction(G, MooConfig()).coords, np.zeros(3))


def test_direction_examples():
    g = np.array([1.0, -2.0, 0.5])
    rng = np.random.default_rng(0)
    G = fg(*rng.normal(size=(3, 4)))
    assert np.array_equal(update_direction(G, MooConfig(beta=0.0)).coords, average_gradient(G).coords)
    np.testing.assert_allclose(update_direction(fg(g, g), MooConfig(beta=0.8)).coords, 1.8 * g, rtol=1e-14)
    np.testing.assert_allclose(update_direction(fg([1, 0], [0, 1]), MooConfig(beta=0.5)).coords, [0.75, 0.75], rtol=1e-15)


def test_m_above_three_rejected():
    G = fg(*np.eye(4))
    with pytest.raises(ValueError):
        solve_simplex(G, average_gradient(G), MooConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        MooConfig(beta=-0.1)
    with pytest.raises(ConfigError):
        MooConfig(solver="frank-wolfe")


instances = st.tuples(st.integers(2, 3), st.integers(1, 50), st.integers(0, 2**31), st.sampled_from([0.1, 0.3, 0.5, 0.8, 0.9]))


@settings(max_examples=150, deadline=None)
@given(instances)
def test_direction_invariants(case):
    m, n, seed, beta = case
    G = fg(*np.random.default_rng(seed).normal(size=(m, n)))
    dr = conflict_averse_direction(G, MooConfig(beta=beta))
    g0 = dr.g0.coords
    n0 = np.linalg.norm(g0)
    if dr.gw.norm > 0:
        assert abs(np.linalg.norm(dr.direction.coords - g0) - beta * n0) < 1e-9
    assert dr.direction.coords @ g0 >= (1 - beta) * n0**2 * (1 - 1e-12)


@settings(max_examples=60, deadline=None)
@given(instances, st.floats(1e-3, 1e3))
def test_scale_covariance(case, c):
    m, n, seed, beta = case
    raw = np.random.default_rng(seed).normal(size=(m, n))
    d1 = update_direction(fg(*raw), MooConfig(beta=beta)).coords
    d2 = update_direction(fg(*(c * raw)), MooConfig(beta=beta)).coords
    np.testing.assert_allclose(d2, c * d1, rtol=1e-9, atol=1e-9 * c * np.abs(d1).max())


@settings(max_examples=60, deadline=None)
@given(instances)
def test_beta_zero_equivalence(case):
    m, n, seed, _ = case
    G = fg(*np.random.default_rng(seed).normal(size=(m, n)))
    assert np.abs(update_direction(G, MooConfig(beta=0.0)).coords - average_gradient(G).coords).max() < 1e-12


@settings(max_examples=100, deadline=None)
@given(instances)
def test_solver_beats_grid(case):
    m, n, seed, beta = case
    raw = np.random.default_rng(seed).normal(size=(m, n))
    G = fg(*raw)
    w = solve_simplex(G, average_gradient(G), MooConfig(beta=beta))
    _, v_ref = grid_minimum(raw, beta, 1e-3 if m == 2 else 1 / 200)
    assert objective(w, G, average_gradient(G), beta) <= v_ref + 1e-6
