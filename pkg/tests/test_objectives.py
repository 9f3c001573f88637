import math

import numpy as np
import pytest

from fedsim.core import rng_stream
from fedsim.data import make_blobs, partition_by_similarity
from fedsim.objectives import Logistic, Quadratic, SyntheticHard

X2_STAR = math.sqrt(2.0) / 4.0


def test_synthetic_values_at_origin():
    obj = SyntheticHard()
    x0 = np.zeros(4)
    assert obj.eval_local(0, x0) == 2.0
    assert obj.eval_local(1, x0) == 2.0
    assert obj.eval_global(x0) == 2.0


def test_synthetic_minimum_value():
    obj = SyntheticHard()
    x_star = np.array([1.0, X2_STAR, 0.0, 0.0])
    assert obj.eval_global(x_star) == 0.0
    assert obj.eval_local(0, x_star) == 0.0


def test_synthetic_global_gradient_at_origin():
    obj = SyntheticHard()
    g = obj.grad_global(np.zeros(4))
    np.testing.assert_allclose(g, [-2.0, -4.0 * math.sqrt(2.0), 0.0, 0.0], atol=1e-15)


def test_synthetic_one_sided_curvature():
    """The third coordinate is twice as curved on the positive side."""
    obj = SyntheticHard()
    down = obj.grad_local(0, np.array([0.0, 0.0, -1.0, 0.0]))[2]
    up = obj.grad_local(0, np.array([0.0, 0.0, 1.0, 0.0]))[2]
    assert down == -4.0
    assert up == 8.0
    at_kink = obj.grad_local(0, np.zeros(4))[2]
    assert at_kink == 0.0


def test_synthetic_opposite_linear_slopes():
    obj = SyntheticHard()
    x = np.zeros(4)
    assert obj.grad_local(0, x)[3] == 16.0
    assert obj.grad_local(1, x)[3] == -16.0
    assert obj.grad_global(x)[3] == 0.0


def test_synthetic_noise_only_on_third_coordinate():
    obj = SyntheticHard(sigma=1.0)
    x = np.array([0.3, -0.2, 0.7, 0.1])
    g = obj.stoch_grad_local(0, x, rng_stream(1, "gradient-noise"))
    exact = obj.grad_local(0, x)
    assert np.array_equal(g[[0, 1, 3]], exact[[0, 1, 3]])
    assert g[2] != exact[2]
    quiet = SyntheticHard(sigma=0.0)
    g0 = quiet.stoch_grad_local(0, x, rng_stream(1, "gradient-noise"))
    assert np.array_equal(g0, quiet.grad_local(0, x))


def test_synthetic_gd_reaches_the_minimum():
    obj = SyntheticHard(sigma=0.0)
    x = np.zeros(4)
    for _ in range(4000):
        x = x - 0.05 * obj.grad_global(x)
    assert obj.eval_global(x) <= 1e-10


def test_synthetic_stoch_grad_is_unbiased():
    obj = SyntheticHard(sigma=1.0)
    x = np.array([0.5, 0.5, -0.5, 0.0])
    rng = rng_stream(9, "gradient-noise")
    draws = np.stack([obj.stoch_grad_local(1, x, rng) for _ in range(4000)])
    np.testing.assert_allclose(draws.mean(axis=0), obj.grad_local(1, x), atol=4.0 / math.sqrt(4000))


def test_quadratic_closed_form():
    obj = Quadratic(np.array([[1.0], [-1.0]]))
    x0 = np.zeros(1)
    assert obj.eval_global(x0) == 0.5
    assert obj.grad_global(x0)[0] == 0.0
    np.testing.assert_array_equal(obj.grad_local(0, x0), [-1.0])
    np.testing.assert_array_equal(obj.grad_local(1, x0), [1.0])


def test_quadratic_validation():
    with pytest.raises(ValueError):
        Quadratic(np.zeros((2, 2)), sigma=-1.0)
    obj = Quadratic(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="shape"):
        obj.eval_local(0, np.zeros(4))
    with pytest.raises(ValueError, match="client index"):
        obj.grad_local(2, np.zeros(3))


def _tiny_logistic(l2=0.0, minibatch=1):
    feats = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
    labels = np.array([0, 1, 1, 0])
    shards = [(feats[:2], labels[:2]), (feats[2:], labels[2:])]
    return Logistic(shards, num_classes=2, l2=l2, minibatch=minibatch)


def test_logistic_loss_at_zero_is_log_classes():
    obj = _tiny_logistic()
    assert abs(obj.eval_global(np.zeros(obj.dim)) - math.log(2.0)) < 1e-15


def test_logistic_single_sample_stoch_grad_equals_full_grad():
    feats = np.array([[0.5, -1.0]])
    labels = np.array([1])
    obj = Logistic([(feats, labels)], num_classes=3)
    x = rng_stream(2, "init").random(obj.dim)
    g = obj.stoch_grad_local(0, x, rng_stream(3, "gradient-noise"))
    np.testing.assert_allclose(g, obj.grad_local(0, x), atol=1e-15)


def test_logistic_penalty_skips_bias():
    obj = _tiny_logistic(l2=10.0)
    # weight matrix with only the bias column set
    w = np.zeros((2, 3))
    w[:, -1] = 5.0
    base = _tiny_logistic(l2=0.0)
    assert obj.eval_local(0, w.ravel()) == base.eval_local(0, w.ravel())
    np.testing.assert_array_equal(obj.grad_local(0, w.ravel()), base.grad_local(0, w.ravel()))


def test_logistic_validation_errors():
    feats = np.zeros((2, 3))
    labels = np.zeros(2, dtype=int)
    with pytest.raises(ValueError, match="empty"):
        Logistic([(np.zeros((0, 3)), np.zeros(0, dtype=int))], num_classes=2)
    with pytest.raises(ValueError, match="features"):
        Logistic([(feats, labels), (np.zeros((2, 4)), labels)], num_classes=2)
    with pytest.raises(ValueError):
        Logistic([(feats, labels)], num_classes=2, minibatch=0)


def test_logistic_test_metric():
    feats = np.array([[1.0], [0.0]])
    labels = np.array([1, 0])
    obj = Logistic([(feats, labels)], num_classes=2, test_set=(feats, labels))
    # weights that route feature 1 to class 1 strongly
    w = np.array([[0.0, 0.1], [5.0, -0.1]])
    assert obj.test_metric(w.ravel()) == 1.0
    assert math.isnan(Logistic([(feats, labels)], num_classes=2).test_metric(w.ravel()))


def test_logistic_gd_separates_blobs():
    features, labels = make_blobs(400, 4, 6, seed=2)
    shards = partition_by_similarity(features, labels, 2, 100.0, seed=2)
    obj = Logistic(shards, num_classes=4)
    x = np.zeros(obj.dim)
    for _ in range(300):
        x = x - 1.0 * obj.grad_global(x)
    accuracy = np.mean([
        np.mean(np.argmax(np.hstack([f, np.ones((len(y), 1))]) @ x.reshape(4, -1).T, axis=1) == y)
        for f, y in shards
    ])
    assert accuracy >= 0.95


def test_logistic_minibatch_indices_stay_in_range():
    obj = _tiny_logistic(minibatch=64)
    x = np.zeros(obj.dim)
    for trial in range(50):
        g = obj.stoch_grad_local(0, x, rng_stream(trial, "gradient-noise"))
        assert np.all(np.isfinite(g))
