import math

import numpy as np
import pytest

from lasg.data import Dataset
from lasg.errors import ConfigError, NumericalError
from lasg.models import (ModelSpec, exact_grad, finite_diff_grad, full_loss, logistic_smoothness,
                         stochastic_grad)

# mpmath at 40 digits: log(1 + e^-1), -sigmoid(-1)
LOSS_THETA_10 = 0.3132616875182228340
GRAD_THETA_10 = -0.2689414213699951207
# mpmath: two-sample instance in test_full_loss_two_sample_hand_value
FULL_LOSS_TWO_SAMPLE = 1.069837482750487622


def random_instance(rng, kind):
    d = int(rng.integers(1, 5))
    n = int(rng.integers(1, 8))
    if kind == "logistic_binary":
        model = ModelSpec("logistic", d, l2=float(rng.uniform(0, 0.1)))
        y = rng.choice([-1, 1], size=n)
    elif kind == "logistic_multi":
        C = int(rng.integers(3, 5))
        model = ModelSpec("logistic", d, num_classes=C, l2=float(rng.uniform(0, 0.1)))
        y = rng.integers(0, C, size=n)
    else:
        C = int(rng.integers(2, 4))
        model = ModelSpec("mlp", d, num_classes=C, hidden_dim=int(rng.integers(1, 4)),
                          l2=float(rng.uniform(0, 0.1)))
        y = rng.integers(0, C, size=n)
    X = rng.standard_normal((n, d))
    theta = 0.7 * rng.standard_normal(model.num_params)
    weight = float(rng.uniform(0.1, 1.0))
    return model, X, y, theta, weight


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_param_counts():
    assert ModelSpec("logistic", 7).num_params == 7
    assert ModelSpec("logistic", 7, num_classes=3).num_params == 21
    assert ModelSpec("mlp", 4, num_classes=3, hidden_dim=5).num_params == 5 * 5 + 6 * 3


@pytest.mark.parametrize("kwargs", [
    dict(kind="conv", input_dim=2),
    dict(kind="logistic", input_dim=0),
    dict(kind="mlp", input_dim=2),
    dict(kind="logistic", input_dim=2, l2=-1.0),
])
def test_model_spec_rejects_bad_config(kwargs):
    with pytest.raises(ConfigError):
        ModelSpec(**kwargs)


def test_logistic_at_zero_is_ln2_with_symmetric_gradient():
    X = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [-2.0, 1.0]])
    y = np.array([1, -1, 1, -1])
    loss, grad = stochastic_grad(ModelSpec("logistic", 2), np.zeros(2), X, y)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_allclose(grad, -(y[:, None] * X).mean(axis=0) / 2, atol=1e-15)


def test_logistic_single_sample_hand_values():
    loss, grad = stochastic_grad(ModelSpec("logistic", 2), np.array([1.0, 0.0]),
                                 np.array([[1.0, 1.0]]), np.array([1]))
    assert loss == pytest.approx(LOSS_THETA_10, abs=1e-15)
    np.testing.assert_allclose(grad, [GRAD_THETA_10, GRAD_THETA_10], atol=1e-15)


def test_weight_and_regularizer_scale_loss_and_gradient():
    model = ModelSpec("logistic", 2, l2=0.2)
    theta = np.array([0.3, -0.4])
    X, y = np.array([[1.0, 2.0]]), np.array([-1])
    loss1, grad1 = stochastic_grad(model, theta, X, y, 1.0)
    loss3, grad3 = stochastic_grad(model, theta, X, y, 0.3)
    assert loss3 == pytest.approx(0.3 * loss1, rel=1e-14)
    np.testing.assert_allclose(grad3, 0.3 * grad1, rtol=1e-14)
    bare = stochastic_grad(ModelSpec("logistic", 2), theta, X, y)[1]
    np.testing.assert_allclose(grad1, bare + 0.2 * theta, rtol=1e-14)


def test_mlp_smallest_instance_matches_finite_differences():
    model = ModelSpec("mlp", 1, num_classes=2, hidden_dim=1)
    rng = np.random.default_rng(3)
    theta = rng.standard_normal(model.num_params)
    X, y = np.array([[0.7], [-1.2]]), np.array([0, 1])
    grad = stochastic_grad(model, theta, X, y)[1]
    fd = finite_diff_grad(lambda t: stochastic_grad(model, t, X, y)[0], theta, 1e-5)
    assert rel_err(grad, fd) < 1e-5


@pytest.mark.parametrize("kind", ["logistic_binary", "logistic_multi", "mlp"])
def test_gradients_match_finite_differences_on_random_instances(kind):
    rng = np.random.default_rng({"logistic_binary": 1, "logistic_multi": 2, "mlp": 3}[kind])
    worst = 0.0
    for _ in range(100):
        model, X, y, theta, w = random_instance(rng, kind)
        grad = stochastic_grad(model, theta, X, y, w)[1]
        fd = finite_diff_grad(lambda t: stochastic_grad(model, t, X, y, w)[0], theta, 1e-5)
        worst = max(worst, rel_err(grad, fd))
    assert worst < 1e-5


def test_finite_diff_oracle_self_checks():
    np.testing.assert_allclose(
        finite_diff_grad(lambda t: 0.5 * float(t @ t), np.array([1.0, 2.0]), 1e-5),
        [1.0, 2.0], atol=1e-8)
    np.testing.assert_array_equal(finite_diff_grad(lambda t: 3.0, np.ones(4), 1e-5), np.zeros(4))
    with pytest.raises(ValueError):
        finite_diff_grad(lambda t: 0.0, np.ones(2), 0.0)


@pytest.mark.parametrize("kind", ["logistic_binary", "logistic_multi", "mlp"])
def test_size_one_batches_average_to_exact_shard_gradient(kind):
    rng = np.random.default_rng(11)
    for _ in range(10):
        model, _, _, theta, w = random_instance(rng, kind)
        n = int(rng.integers(2, 21))
        X = rng.standard_normal((n, model.input_dim))
        if model.binary_logistic:
            y = rng.choice([-1, 1], size=n)
        else:
            y = rng.integers(0, model.num_classes, size=n)
        singles = [stochastic_grad(model, theta, X[i:i + 1], y[i:i + 1], w)[1] for i in range(n)]
        np.testing.assert_allclose(np.mean(singles, axis=0), exact_grad(model, theta, X, y, w),
                                   rtol=0, atol=1e-10)


def test_full_loss_two_sample_hand_value():
    model = ModelSpec("logistic", 2, l2=0.1)
    shard = Dataset(np.array([[1.0, 2.0], [-1.0, 0.5]]), np.array([1, -1]))
    assert full_loss(model, np.array([0.5, -1.0]), [shard]) == pytest.approx(
        FULL_LOSS_TWO_SAMPLE, abs=1e-12)


def test_full_loss_ln2_at_zero_and_order_independent():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((40, 3))
    y = np.tile([1, -1], 20)
    model = ModelSpec("logistic", 3)
    shards = [Dataset(X[:15], y[:15]), Dataset(X[15:], y[15:])]
    assert full_loss(model, np.zeros(3), shards) == pytest.approx(math.log(2), abs=1e-15)
    theta = rng.standard_normal(3)
    assert full_loss(model, theta, shards) == full_loss(model, theta, shards[::-1])


def test_full_loss_equals_weighted_sum_of_full_batch_losses():
    rng = np.random.default_rng(6)
    model = ModelSpec("logistic", 3, l2=0.01)
    X = rng.standard_normal((30, 3))
    y = rng.choice([-1, 1], size=30)
    shards = [Dataset(X[:5], y[:5]), Dataset(X[5:17], y[5:17]), Dataset(X[17:], y[17:])]
    theta = rng.standard_normal(3)
    weighted = sum(stochastic_grad(model, theta, s.X, s.y, len(s) / 30)[0] for s in shards)
    assert full_loss(model, theta, shards) == pytest.approx(weighted, rel=1e-13)


def test_full_loss_empty_dataset_is_config_error():
    with pytest.raises(ConfigError):
        full_loss(ModelSpec("logistic", 2), np.zeros(2), [Dataset(np.zeros((0, 2)), np.zeros(0, int))])


def test_dimension_mismatch_is_config_error():
    model = ModelSpec("logistic", 2)
    with pytest.raises(ConfigError):
        stochastic_grad(model, np.zeros(3), np.ones((1, 2)), np.array([1]))
    with pytest.raises(ConfigError):
        stochastic_grad(model, np.zeros(2), np.ones((1, 3)), np.array([1]))


def test_non_finite_gradient_names_iteration():
    model = ModelSpec("logistic", 1)
    with pytest.raises(NumericalError, match="iteration 17"):
        stochastic_grad(model, np.array([np.inf]), np.array([[0.0]]), np.array([1]), iteration=17)


def test_logistic_smoothness_examples():
    assert logistic_smoothness(np.array([[3.0, 4.0]])) == pytest.approx(6.25)
    assert logistic_smoothness(np.zeros((5, 3)), weight=0.4, l2=0.5) == pytest.approx(0.2)
    X = np.random.default_rng(0).standard_normal((10, 4))
    assert logistic_smoothness(2 * X) == pytest.approx(4 * logistic_smoothness(X), rel=1e-14)


@pytest.mark.parametrize("num_classes", [2, 3])
def test_smoothness_bound_holds_on_random_pairs(num_classes):
    rng = np.random.default_rng(num_classes)
    X = rng.standard_normal((25, 4))
    if num_classes == 2:
        y = rng.choice([-1, 1], size=25)
    else:
        y = rng.integers(0, num_classes, size=25)
    model = ModelSpec("logistic", 4, num_classes=num_classes, l2=0.05)
    w = 0.3
    L = logistic_smoothness(X, w, model.l2, num_classes)
    for _ in range(1000):
        t1 = 2 * rng.standard_normal(model.num_params)
        t2 = t1 + rng.standard_normal(model.num_params) * rng.uniform(0.01, 3)
        gdiff = np.linalg.norm(exact_grad(model, t1, X, y, w) - exact_grad(model, t2, X, y, w))
        assert gdiff <= L * np.linalg.norm(t1 - t2) * (1 + 1e-12)


def test_gradients_are_deterministic():
    rng = np.random.default_rng(9)
    model, X, y, theta, w = random_instance(rng, "mlp")
    a = stochastic_grad(model, theta, X, y, w)
    b = stochastic_grad(model, theta.copy(), X.copy(), y.copy(), w)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])
