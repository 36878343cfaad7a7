import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moofuse.errors import ConfigError, DomainError
from moofuse.numerics import Rng, Tape, backward
from moofuse.rebalance import RebalanceConfig, compute_class_stats, logit_offsets, rebalanced_loss

from .conftest import central_difference, rel_error

PLAIN = RebalanceConfig(eta=0.0, margin_m=0.0)


def reference_weighted_ce(z, y, w):
    """Loop implementation of mean_i w[y_i] * -log softmax(z_i)[y_i]."""
    total = 0.0
    for row, label in zip(z.tolist(), y.tolist()):
        top = max(row)
        lse = top + math.log(sum(math.exp(v - top) for v in row))
        total += w[label] * (lse - row[label])
    return total / len(y)


def loss_value(z, y, stats, cfg, rng=None, offsets=None):
    t = Tape()
    return float(rebalanced_loss(t, t.param("z", z), y, stats, cfg, rng, offsets).value)


def test_balanced_counts():
    s = compute_class_stats([10, 10, 10])
    assert np.array_equal(s.margins, [0, 0, 0])
    np.testing.assert_allclose(s.weights, [1, 1, 1], rtol=0, atol=1e-15)


def test_margins_long_tail():
    s = compute_class_stats([100, 10, 1])
    np.testing.assert_allclose(s.margins, [0.0, math.log(10), math.log(100)], rtol=0, atol=1e-12)
    assert abs(s.margins[1] - 2.302585) < 1e-6 and abs(s.margins[2] - 4.605170) < 1e-6


@pytest.mark.parametrize("div", [0.5, 1.0, 7.0])
def test_weights_normalised_and_increasing(div):
    cfg = RebalanceConfig(epsilon=1e-6, div=div)
    s = compute_class_stats([100, 10, 1], cfg)
    raw = np.array([math.log(100 / n + 1e-6) for n in (100, 10, 1)])
    np.testing.assert_allclose(s.weights, 3 * raw / raw.sum(), rtol=1e-12)
    assert abs(s.weights.sum() - 3.0) < 1e-9
    assert s.weights[0] < s.weights[1] < s.weights[2]


def test_zero_count_rejected():
    with pytest.raises(DomainError):
        compute_class_stats([5, 0, 2])


@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=12), st.floats(1e-9, 10), st.floats(0.01, 100))
def test_weight_normalisation_property(counts, eps, div):
    s = compute_class_stats(counts, RebalanceConfig(epsilon=eps, div=div))
    assert abs(s.weights.sum() - len(counts)) < 1e-9
    assert s.margins.min() >= 0 and s.margins[int(np.argmax(counts))] == 0


def test_uniform_softmax_loss():
    s = compute_class_stats([5, 5])
    assert abs(loss_value(np.zeros((4, 2)), np.array([0, 1, 1, 0]), s, PLAIN) - math.log(2)) < 1e-15


@pytest.mark.parametrize("seed", range(5))
def test_plain_case_equals_reference_ce(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(7, 4)) * 5
    y = rng.integers(0, 4, size=7)
    s = compute_class_stats([40, 13, 7, 2], RebalanceConfig(epsilon=1e-6))
    assert abs(loss_value(z, y, s, PLAIN) - reference_weighted_ce(z, y, s.weights)) < 1e-12


def test_reduction_identity_balanced():
    rng = np.random.default_rng(3)
    z, y = rng.normal(size=(9, 3)), rng.integers(0, 3, size=9)
    s = compute_class_stats([4, 4, 4])
    assert abs(loss_value(z, y, s, PLAIN) - reference_weighted_ce(z, y, [1, 1, 1])) < 1e-12


def test_hand_margin_example():
    s = compute_class_stats([3, 3, 3])
    cfg = RebalanceConfig(eta=0.0, margin_m=0.5)
    expected = -math.log(math.exp(1.5) / (math.exp(1.5) + 2))
    assert abs(loss_value(np.array([[2.0, 0.0, 0.0]]), np.array([0]), s, cfg) - expected) < 1e-12


@given(st.floats(0, 2), st.floats(0.01, 1), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_margin_monotonicity(m, dm, raw):
    z = np.array([raw])
    z[0, 0] = max(raw) + 1.0  # target logit maximal
    s = compute_class_stats([3, 3, 3])
    lo = loss_value(z, np.array([0]), s, RebalanceConfig(eta=0.0, margin_m=m))
    hi = loss_value(z, np.array([0]), s, RebalanceConfig(eta=0.0, margin_m=m + dm))
    assert hi > lo


def test_label_out_of_range():
    with pytest.raises(DomainError):
        loss_value(np.zeros((1, 3)), np.array([3]), compute_class_stats([1, 1, 1]), PLAIN)


def test_noise_ordering_monte_carlo():
    s = compute_class_stats([500, 50, 5])
    cfg = RebalanceConfig(eta=0.3, margin_m=0.0)
    labels = np.zeros(20_000, dtype=int)
    offsets = logit_offsets(labels, s, cfg, Rng(0))
    mean_shift = np.abs(offsets).mean(axis=0)
    assert mean_shift[0] == 0.0
    assert mean_shift[2] > mean_shift[1] > 0
    # rarest class: E|delta| * eta with sigma=1, E|clip(Z)| ~= 0.6313
    assert abs(mean_shift[2] - 0.3 * 0.6313) < 0.01


def test_balanced_counts_skip_noise():
    s = compute_class_stats([4, 4])
    rng = Rng(2)
    before = Rng(2).uniform()
    logit_offsets(np.array([0, 1]), s, RebalanceConfig(eta=1.0), rng)
    assert rng.uniform() == before  # no draws consumed


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient_with_frozen_noise(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(6, 4)) * 3
    y = rng.integers(0, 4, size=6)
    s = compute_class_stats([30, 12, 4, 1])
    cfg = RebalanceConfig()
    offsets = logit_offsets(y, s, cfg, Rng(seed))
    t = Tape()
    node = rebalanced_loss(t, t.param("z", z), y, s, cfg, offsets=offsets)
    grad = backward(t, node)["z"]
    numeric = central_difference(lambda: loss_value(z, y, s, cfg, offsets=offsets), z)
    assert rel_error(grad, numeric).max() < 1e-5


def test_config_validation():
    with pytest.raises(ConfigError):
        RebalanceConfig(eta=-1)
    with pytest.raises(ConfigError):
        RebalanceConfig(epsilon=0)
