"""Losses, hand-derived gradients and smoothness bounds.

Every worker objective is the weighted mean form

    w_m * (mean_{n in batch} loss_n(theta) + lam/2 * ||theta||^2)

with ``w_m = |N_m| / N``, so summing the workers' exact gradients gives the
gradient of the global mean loss plus the regulariser.

Label conventions: binary logistic models take labels in {-1, +1};
multiclass logistic and MLP models take class indices 0..C-1 (binary
{-1, +1} labels are mapped to {0, 1}).
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from lasg.errors import ConfigError, NumericalError

MODEL_KINDS = ("logistic", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int = 2
    hidden_dim: int = 0
    l2: float = 0.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise ConfigError("mlp models need hidden_dim >= 1")
        if not (self.l2 >= 0.0 and math.isfinite(self.l2)):
            raise ConfigError("l2 must be a finite nonnegative number")

    @property
    def binary_logistic(self):
        return self.kind == "logistic" and self.num_classes == 2

    @property
    def num_params(self):
        if self.kind == "logistic":
            return self.input_dim if self.num_classes == 2 else self.input_dim * self.num_classes
        return (self.input_dim + 1) * self.hidden_dim + (self.hidden_dim + 1) * self.num_classes


def init_params(model, rng=None, scale=0.01):
    """Zeros for logistic models, seeded N(0, scale^2) for the MLP."""
    if model.kind == "logistic":
        return np.zeros(model.num_params)
    if rng is None:
        raise ConfigError("mlp initialisation needs a random generator")
    return scale * rng.standard_normal(model.num_params)


def _check_dims(model, params, X):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (model.num_params,):
        raise ConfigError(
            f"parameter vector has shape {params.shape}, model expects ({model.num_params},)")
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ConfigError(
            f"features have shape {X.shape}, model expects (*, {model.input_dim})")
    return params


def _class_index(y, num_classes):
    y = np.asarray(y)
    if num_classes == 2 and y.size and np.all(np.isin(y, (-1, 1))):
        return (y > 0).astype(np.intp)
    idx = y.astype(np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
        raise ConfigError(f"labels must be class indices in [0, {num_classes})")
    return idx


def _elu(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def _elu_grad(a):
    return np.where(a > 0, 1.0, np.exp(np.minimum(a, 0.0)))


def per_sample_losses(model, params, X, y):
    """Unregularised loss of every sample (used for exact full-loss sums)."""
    X = np.asarray(X, dtype=np.float64)
    params = _check_dims(model, params, X)
    if model.binary_logistic:
        margins = np.asarray(y, dtype=np.float64) * (X @ params)
        return np.logaddexp(0.0, -margins)
    logits = _logits(model, params, X)[0]
    idx = _class_index(y, model.num_classes)
    return logsumexp(logits, axis=1) - logits[np.arange(len(idx)), idx]


def _logits(model, params, X):
    d, C = model.input_dim, model.num_classes
    if model.kind == "logistic":
        return X @ params.reshape(d, C), None
    h = model.hidden_dim
    W1 = params[: (d + 1) * h].reshape(d + 1, h)
    W2 = params[(d + 1) * h:].reshape(h + 1, C)
    pre = X @ W1[:d] + W1[d]
    hidden = _elu(pre)
    return hidden @ W2[:h] + W2[h], (W1, W2, pre, hidden)


def _mean_loss_and_grad(model, params, X, y):
    n = X.shape[0]
    if model.binary_logistic:
        y = np.asarray(y, dtype=np.float64)
        margins = y * (X @ params)
        loss = np.logaddexp(0.0, -margins).mean()
        grad = -(X.T @ (y * expit(-margins))) / n
        return loss, grad

    d, C = model.input_dim, model.num_classes
    idx = _class_index(y, C)
    logits, cache = _logits(model, params, X)
    lse = logsumexp(logits, axis=1)
    loss = (lse - logits[np.arange(n), idx]).mean()
    dlogits = np.exp(logits - lse[:, None])
    dlogits[np.arange(n), idx] -= 1.0
    dlogits /= n
    if model.kind == "logistic":
        return loss, (X.T @ dlogits).ravel()

    W1, W2, pre, hidden = cache
    h = model.hidden_dim
    gW2 = np.empty_like(W2)
    gW2[:h] = hidden.T @ dlogits
    gW2[h] = dlogits.sum(axis=0)
    dpre = (dlogits @ W2[:h].T) * _elu_grad(pre)
    gW1 = np.empty_like(W1)
    gW1[:d] = X.T @ dpre
    gW1[d] = dpre.sum(axis=0)
    return loss, np.concatenate([gW1.ravel(), gW2.ravel()])


def stochastic_grad(model, params, X, y, weight=1.0, iteration=None):
    """Weighted minibatch loss and gradient of one worker.

    Returns ``weight * (mean batch loss + l2/2 ||params||^2)`` and its
    gradient. Drawing the batch uniformly makes the gradient an unbiased
    estimate of the worker's weighted contribution to the global gradient.
    """
    X = np.asarray(X, dtype=np.float64)
    params = _check_dims(model, params, X)
    if X.shape[0] == 0:
        raise ConfigError("batch must be nonempty")
    with np.errstate(invalid="ignore", over="ignore"):
        loss, grad = _mean_loss_and_grad(model, params, X, y)
    if model.l2:
        loss = loss + 0.5 * model.l2 * float(params @ params)
        grad = grad + model.l2 * params
    loss = weight * loss
    grad = weight * grad
    if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NumericalError("non-finite loss or gradient", iteration=iteration)
    return float(loss), grad


def full_loss(model, params, shards, iteration=None):
    """Global objective sum_m w_m L_m(theta) + l2/2 ||theta||^2.

    ``shards`` is any iterable of datasets (objects with ``X`` and ``y``).
    The per-sample losses are summed with ``math.fsum`` so the value does
    not depend on shard order.
    """
    losses = [per_sample_losses(model, params, s.X, s.y) for s in shards]
    n = sum(len(l) for l in losses)
    if n == 0:
        raise ConfigError("full_loss needs a nonempty dataset")
    params = np.asarray(params, dtype=np.float64)
    try:
        total = math.fsum(np.concatenate(losses)) / n
    except (OverflowError, ValueError):
        total = math.inf
    with np.errstate(over="ignore"):
        value = total + 0.5 * model.l2 * float(params @ params)
    if not math.isfinite(value):
        raise NumericalError("non-finite objective value", iteration=iteration)
    return value


def exact_grad(model, params, X, y, weight=1.0):
    """Gradient of the worker objective over its whole shard."""
    return stochastic_grad(model, params, X, y, weight)[1]


def logistic_smoothness(X, weight=1.0, l2=0.0, num_classes=2):
    """Lipschitz constant bound of a worker's weighted mean logistic gradient.

    Binary: ``w * (0.25 * mean ||x||^2 + l2)``. The softmax Hessian is bounded
    by half the feature outer product, so multiclass uses 0.5 in place of 0.25.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ConfigError("smoothness bound needs a nonempty shard")
    curvature = 0.25 if num_classes == 2 else 0.5
    sq = math.fsum(np.einsum("ij,ij->i", X, X)) / X.shape[0]
    return weight * (curvature * sq + l2)


def finite_diff_grad(loss_fn, params, step=1e-5):
    """Central-difference gradient of a scalar function (test oracle)."""
    if step <= 0:
        raise ValueError("step must be positive")
    params = np.array(params, dtype=np.float64)
    grad = np.empty_like(params)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + step
        up = loss_fn(params)
        params[i] = orig - step
        down = loss_fn(params)
        params[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad
