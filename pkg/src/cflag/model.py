"""Loss models with exact per-sample gradients.

Three model kinds are supported, all operating on a flat float64 parameter
vector:

``linear-mse``
    ``w`` of shape ``(p,)``; per-sample loss ``0.5 * (x @ w - y)**2`` where
    ``y`` is the dataset's real target (or the integer label cast to float).
    ``d = p``.
``multinomial-logistic``
    ``W`` of shape ``(K, p)`` stored row-major; softmax cross-entropy.
    ``d = K * p``. No bias term: append a constant feature column if one is
    needed.
``mlp-1hidden``
    ``W1 (h, p), b1 (h), W2 (K, h), b2 (K)`` concatenated in that order, tanh
    hidden layer, softmax cross-entropy. ``d = h*p + h + K*h + K``.

Every kind adds ``l2_coeff * ||params||**2 / 2`` to the mean per-sample loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ConvergenceError

KINDS = ("linear-mse", "multinomial-logistic", "mlp-1hidden")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus integer labels, optionally with real regression targets.

    Arrays are copied to float64/int64 and made read-only so a dataset can be
    shared between clients and buffers without defensive copies.
    """

    features: np.ndarray
    labels: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64, ndmin=2)
        y = np.asarray(self.labels)
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ConfigurationError("labels must be integers")
        y = np.array(y, dtype=np.int64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ConfigurationError(
                f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if y.size and y.min() < 0:
            raise ConfigurationError("labels must be nonnegative")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if self.targets is not None:
            t = np.array(self.targets, dtype=np.float64).reshape(-1)
            if t.shape[0] != y.shape[0]:
                raise ConfigurationError("targets and labels are misaligned")
            t.setflags(write=False)
            object.__setattr__(self, "targets", t)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        t = None if self.targets is None else self.targets[idx]
        return Dataset(self.features[idx], self.labels[idx], t)

    def regression_targets(self) -> np.ndarray:
        if self.targets is not None:
            return self.targets
        return self.labels.astype(np.float64)

    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        parts = [d for d in parts if d is not None]
        if not parts:
            raise ConfigurationError("nothing to concatenate")
        with_t = [d.targets is not None for d in parts]
        if any(with_t) and not all(with_t):
            raise ConfigurationError("cannot mix datasets with and without targets")
        X = np.concatenate([d.features for d in parts], axis=0)
        y = np.concatenate([d.labels for d in parts])
        t = np.concatenate([d.targets for d in parts]) if all(with_t) else None
        return Dataset(X, y, t)

    def equals(self, other: "Dataset") -> bool:
        if (self.targets is None) != (other.targets is None):
            return False
        same = (np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))
        if self.targets is not None:
            same = same and np.array_equal(self.targets, other.targets)
        return same


@dataclass(frozen=True)
class LossModel:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int | None = None
    l2_coeff: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise ConfigurationError("input_dim and num_classes must be >= 1")
        if self.kind == "mlp-1hidden":
            if not self.hidden_dim or self.hidden_dim < 1:
                raise ConfigurationError("mlp-1hidden needs hidden_dim >= 1")
        if self.l2_coeff < 0:
            raise ConfigurationError("l2_coeff must be nonnegative")

    @property
    def dim(self) -> int:
        p, K = self.input_dim, self.num_classes
        if self.kind == "linear-mse":
            return p
        if self.kind == "multinomial-logistic":
            return K * p
        h = self.hidden_dim
        return h * p + h + K * h + K

    @property
    def is_classifier(self) -> bool:
        return self.kind != "linear-mse"


def init_params(model: LossModel, seed=None, scale: float = 0.1) -> np.ndarray:
    """Zero vector for the convex kinds, small Gaussian weights for the MLP."""
    if model.kind != "mlp-1hidden":
        return np.zeros(model.dim)
    rng = np.random.default_rng(seed)
    return scale * rng.standard_normal(model.dim)


def _check(model: LossModel, params: np.ndarray, data: Dataset) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (model.dim,):
        raise ConfigurationError(
            f"parameter vector has shape {params.shape}, model expects ({model.dim},)")
    if data.p != model.input_dim:
        raise ConfigurationError(
            f"data has {data.p} features, model expects {model.input_dim}")
    if model.is_classifier and data.n and data.labels.max() >= model.num_classes:
        raise ConfigurationError(
            f"label {data.labels.max()} outside [0, {model.num_classes})")
    return params


def _unpack_mlp(model: LossModel, params: np.ndarray):
    p, K, h = model.input_dim, model.num_classes, model.hidden_dim
    i = 0
    W1 = params[i:i + h * p].reshape(h, p); i += h * p
    b1 = params[i:i + h]; i += h
    W2 = params[i:i + K * h].reshape(K, h); i += K * h
    b2 = params[i:i + K]
    return W1, b1, W2, b2


def _log_softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def scores(model: LossModel, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Raw outputs: ``(n,)`` predictions for linear-mse, ``(n, K)`` logits otherwise."""
    if model.kind == "linear-mse":
        return X @ params
    if model.kind == "multinomial-logistic":
        W = params.reshape(model.num_classes, model.input_dim)
        return X @ W.T
    W1, b1, W2, b2 = _unpack_mlp(model, params)
    return np.tanh(X @ W1.T + b1) @ W2.T + b2


def _per_sample_losses(model, params, data):
    X = data.features
    if model.kind == "linear-mse":
        r = X @ params - data.regression_targets()
        return 0.5 * r * r
    logp = _log_softmax(scores(model, params, X))
    return -logp[np.arange(data.n), data.labels]


def _per_sample_grads(model, params, data) -> np.ndarray:
    """Unregularized per-sample gradients, shape ``(n, d)``."""
    X = data.features
    n = data.n
    if model.kind == "linear-mse":
        r = X @ params - data.regression_targets()
        return r[:, None] * X
    if model.kind == "multinomial-logistic":
        P = np.exp(_log_softmax(scores(model, params, X)))
        P[np.arange(n), data.labels] -= 1.0
        return (P[:, :, None] * X[:, None, :]).reshape(n, -1)
    W1, b1, W2, b2 = _unpack_mlp(model, params)
    A = np.tanh(X @ W1.T + b1)
    D2 = np.exp(_log_softmax(A @ W2.T + b2))
    D2[np.arange(n), data.labels] -= 1.0
    D1 = (D2 @ W2) * (1.0 - A * A)
    return np.concatenate([
        (D1[:, :, None] * X[:, None, :]).reshape(n, -1),
        D1,
        (D2[:, :, None] * A[:, None, :]).reshape(n, -1),
        D2,
    ], axis=1)


def loss(model: LossModel, params, data: Dataset) -> float:
    params = _check(model, params, data)
    reg = 0.5 * model.l2_coeff * float(params @ params)
    return float(np.mean(_per_sample_losses(model, params, data))) + reg


def component_grads(model: LossModel, params, data: Dataset) -> np.ndarray:
    """All per-sample gradients (l2 term included in each row), shape ``(n, d)``."""
    params = _check(model, params, data)
    G = _per_sample_grads(model, params, data)
    if model.l2_coeff:
        G += model.l2_coeff * params
    return G


def grad(model: LossModel, params, data: Dataset) -> np.ndarray:
    """Full-batch mean gradient; identical to the mean of :func:`component_grads`."""
    if data.n == 0:
        raise ConfigurationError("gradient of an empty dataset")
    return component_grads(model, params, data).mean(axis=0)


def grad_component(model: LossModel, params, data: Dataset, j: int) -> np.ndarray:
    if not 0 <= j < data.n:
        raise IndexError(f"sample index {j} out of range for {data.n} rows")
    return component_grads(model, params, data.subset([j]))[0]


def predict(model: LossModel, params, X: np.ndarray, classes=None) -> np.ndarray:
    """Argmax class, ties to the smallest id; ``classes`` restricts the candidates."""
    S = scores(model, params, X)
    if classes is None:
        return np.argmax(S, axis=1)
    classes = np.sort(np.asarray(classes, dtype=np.int64))
    return classes[np.argmax(S[:, classes], axis=1)]


def accuracy(model: LossModel, params, data: Dataset, classes=None) -> float:
    if not model.is_classifier:
        raise ConfigurationError("accuracy is undefined for linear-mse")
    params = _check(model, params, data)
    if data.n == 0:
        raise ConfigurationError("accuracy of an empty dataset")
    return float(np.mean(predict(model, params, data.features, classes) == data.labels))


def _power_iteration(A: np.ndarray, rtol=1e-8, max_iter=10_000) -> float:
    if not np.any(A):
        return 0.0
    v = np.random.default_rng(0).standard_normal(A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = A @ v
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(new - lam) <= rtol * abs(new):
            return new
        lam = new
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations")


def estimate_L(model: LossModel, data: Dataset) -> float:
    """Smoothness constant of the full-batch loss from ``lambda_max(X^T X) / n``.

    Exact for linear-mse; for multinomial-logistic the softmax Hessian factor
    is bounded by 1/2.
    """
    if model.kind == "mlp-1hidden":
        raise ConfigurationError("no analytic L for mlp-1hidden; configure L explicitly")
    X = data.features
    lam = _power_iteration(X.T @ X / data.n)
    if model.kind == "multinomial-logistic":
        lam *= 0.5
    return lam + model.l2_coeff


def component_L(model: LossModel, data: Dataset) -> float:
    """Largest per-sample smoothness constant, ``max_j ||x_j||^2`` (halved for logistic).

    Bounds the smoothness of every component, of every subset mean and of any
    convex combination of them, so one value serves all smoothness
    requirements of a run.
    """
    if model.kind == "mlp-1hidden":
        raise ConfigurationError("no analytic L for mlp-1hidden; configure L explicitly")
    sq = float(np.max(np.einsum("ij,ij->i", data.features, data.features)))
    if model.kind == "multinomial-logistic":
        sq *= 0.5
    return sq + model.l2_coeff
