"""Native estimators behind one fit / predict / predict_proba contract.

Neural kinds (``LogisticRegressionNN`` and the one-hidden-layer ``MlpNN``) are
trained by plain minibatch gradient descent on softmax cross-entropy with an
L2 penalty on weights (biases are not penalised). LR starts from zero
weights; the MLP uses seeded Glorot-uniform weights, zero biases and a ReLU
hidden layer.

Shallow kinds: a Gini CART tree with midpoint thresholds, Euclidean k-nearest
neighbours and Gaussian naive Bayes.

Every fitted learner is immutable. A training set holding a single class
always yields a constant predictor.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections.abc import Mapping
from dataclasses import dataclass, fields
from enum import StrEnum
from typing import Any

import numpy as np
from numpy.typing import NDArray

from evopipe._timing import Deadline
from evopipe.errors import (
    DimensionMismatchError,
    EvaluationTimeout,
    HyperparameterError,
    LearnerError,
    LearnerFitError,
)

FloatMatrix = NDArray[np.float64]
FloatVector = NDArray[np.float64]
LabelVector = NDArray[np.int64]
Hyperparameters = Mapping[str, int | float | str]


class LearnerKind(StrEnum):
    LOGISTIC_REGRESSION_NN = "LogisticRegressionNN"
    MLP_NN = "MlpNN"
    DECISION_TREE = "DecisionTree"
    K_NEAREST = "KNearest"
    GAUSSIAN_NB = "GaussianNB"


NEURAL_KINDS = frozenset({LearnerKind.LOGISTIC_REGRESSION_NN, LearnerKind.MLP_NN})

# Upper bound on query-by-train cells per kNN distance chunk.
_KNN_CHUNK_CELLS = 4_000_000
_VAR_FLOOR = 1e-9
_SPLIT_TOLERANCE = 1e-12


# ---------------------------------------------------------------------------
# Fitted learners
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FittedLearner(ABC):
    """Common shape contract of every fitted estimator."""

    kind: str
    n_classes: int
    d_in: int

    def __post_init__(self) -> None:
        for f in fields(self):
            _freeze(getattr(self, f.name))

    @abstractmethod
    def _proba(self, X: FloatMatrix) -> FloatMatrix: ...

    def predict_proba(self, X: FloatMatrix) -> FloatMatrix:
        X = _as_matrix(X)
        if X.shape[1] != self.d_in:
            raise DimensionMismatchError(
                f"{self.kind} was fitted on {self.d_in} columns, got {X.shape[1]}"
            )
        return self._proba(X)

    def predict(self, X: FloatMatrix) -> LabelVector:
        # argmax keeps the first maximum, i.e. ties go to the lower class index
        return np.argmax(self.predict_proba(X), axis=1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class ConstantLearner(FittedLearner):
    label: int

    def _proba(self, X: FloatMatrix) -> FloatMatrix:
        out = np.zeros((X.shape[0], self.n_classes))
        out[:, self.label] = 1.0
        return out


@dataclass(frozen=True, eq=False)
class NetworkLearner(FittedLearner):
    """Softmax network; ``weights`` is ``(W, b)`` or ``(W1, b1, W2, b2)``."""

    weights: tuple[FloatMatrix, ...]

    @property
    def parameter_count(self) -> int:
        return sum(int(w.size) for w in self.weights)

    def flat_parameters(self) -> FloatVector:
        return np.concatenate([w.ravel() for w in self.weights])

    def _proba(self, X: FloatMatrix) -> FloatMatrix:
        return _softmax(_forward(self.weights, X)[-1])


@dataclass(frozen=True, eq=False)
class TreeLearner(FittedLearner):
    """CART tree stored as parallel node arrays; ``feature == -1`` marks a leaf."""

    feature: NDArray[np.int64]
    threshold: FloatVector
    left: NDArray[np.int64]
    right: NDArray[np.int64]
    leaf_proba: FloatMatrix

    @property
    def node_count(self) -> int:
        return int(self.feature.shape[0])

    def _proba(self, X: FloatMatrix) -> FloatMatrix:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            internal = self.feature[node] >= 0
            if not internal.any():
                break
            r = rows[internal]
            n = node[internal]
            go_left = X[r, self.feature[n]] <= self.threshold[n]
            node[r] = np.where(go_left, self.left[n], self.right[n])
        return self.leaf_proba[node].copy()


@dataclass(frozen=True, eq=False)
class KNearestLearner(FittedLearner):
    k: int
    X_train: FloatMatrix
    y_train: LabelVector

    def _proba(self, X: FloatMatrix) -> FloatMatrix:
        n_train = self.X_train.shape[0]
        out = np.empty((X.shape[0], self.n_classes))
        chunk = max(1, _KNN_CHUNK_CELLS // max(1, n_train * max(1, self.d_in)))
        onehot = np.eye(self.n_classes)[self.y_train]
        for start in range(0, X.shape[0], chunk):
            q = X[start : start + chunk]
            diff = q[:, None, :] - self.X_train[None, :, :]
            dist = np.einsum("ijk,ijk->ij", diff, diff)
            # stable sort: equal distances keep the lower training-row index first
            nearest = np.argsort(dist, axis=1, kind="stable")[:, : self.k]
            out[start : start + chunk] = onehot[nearest].sum(axis=1) / self.k
        return out


@dataclass(frozen=True, eq=False)
class GaussianNBLearner(FittedLearner):
    means: FloatMatrix
    variances: FloatMatrix
    log_priors: FloatVector

    def _proba(self, X: FloatMatrix) -> FloatMatrix:
        present = np.isfinite(self.log_priors)
        jll = np.full((X.shape[0], self.n_classes), -np.inf)
        for c in np.flatnonzero(present):
            var = self.variances[c]
            jll[:, c] = (
                self.log_priors[c]
                - 0.5 * np.sum(np.log(2.0 * np.pi * var))
                - 0.5 * np.sum((X - self.means[c]) ** 2 / var, axis=1)
            )
        jll -= jll.max(axis=1, keepdims=True)
        p = np.exp(jll)
        return p / p.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class WrappedLearner(FittedLearner):
    """A user-supplied fitted model exposing ``predict_proba``."""

    model: Any

    def _proba(self, X: FloatMatrix) -> FloatMatrix:
        try:
            proba = np.asarray(self.model.predict_proba(X), dtype=np.float64)
        except EvaluationTimeout:
            raise
        except Exception as exc:
            raise LearnerError(f"{self.kind} predict_proba failed: {exc}") from exc
        if proba.shape != (X.shape[0], self.n_classes):
            raise LearnerError(
                f"{self.kind} returned probabilities of shape {proba.shape}, "
                f"expected {(X.shape[0], self.n_classes)}"
            )
        if (
            not np.all(np.isfinite(proba))
            or np.any(proba < 0.0)
            or not np.allclose(proba.sum(axis=1), 1.0, rtol=0.0, atol=1e-9)
        ):
            raise LearnerError(f"{self.kind} returned rows that are not distributions")
        return proba


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _freeze(value: Any) -> None:
    if isinstance(value, np.ndarray):
        value.setflags(write=False)
    elif isinstance(value, tuple):
        for item in value:
            _freeze(item)


def _as_matrix(X: Any) -> FloatMatrix:
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-D feature matrix, got {arr.ndim}-D")
    return arr


def _softmax(logits: FloatMatrix) -> FloatMatrix:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits: FloatMatrix) -> FloatMatrix:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward(weights: tuple[FloatMatrix, ...], X: FloatMatrix) -> list[FloatMatrix]:
    """Return ``[logits]`` for LR or ``[pre_activation, hidden, logits]`` for the MLP."""
    if len(weights) == 2:
        W, b = weights
        return [X @ W + b]
    W1, b1, W2, b2 = weights
    z1 = X @ W1 + b1
    h = np.maximum(z1, 0.0)
    return [z1, h, h @ W2 + b2]


def parameter_count(kind: LearnerKind, d_in: int, n_classes: int, hidden: int = 0) -> int:
    """Number of trainable parameters of a neural learner."""
    if kind is LearnerKind.LOGISTIC_REGRESSION_NN:
        return d_in * n_classes + n_classes
    if kind is LearnerKind.MLP_NN:
        return d_in * hidden + hidden + hidden * n_classes + n_classes
    raise LearnerError(f"{kind} is not a neural learner")


def _unflatten(
    kind: LearnerKind, params: FloatVector, d: int, c: int
) -> tuple[FloatMatrix, ...]:
    size = int(params.shape[0])
    if kind is LearnerKind.LOGISTIC_REGRESSION_NN:
        expected = parameter_count(kind, d, c)
        if size != expected:
            raise DimensionMismatchError(
                f"LR with d={d}, c={c} has {expected} parameters, got {size}"
            )
        return params[: d * c].reshape(d, c), params[d * c :]
    hidden, rem = divmod(size - c, d + 1 + c)
    if rem or hidden < 1:
        raise DimensionMismatchError(
            f"{size} parameters do not describe an MLP with d={d}, c={c}"
        )
    h = hidden
    o = 0
    W1 = params[o : o + d * h].reshape(d, h)
    o += d * h
    b1 = params[o : o + h]
    o += h
    W2 = params[o : o + h * c].reshape(h, c)
    o += h * c
    return W1, b1, W2, params[o : o + c]


def _objective(
    weights: tuple[FloatMatrix, ...], X: FloatMatrix, y: LabelVector, l2: float
) -> tuple[float, tuple[FloatMatrix, ...]]:
    n = X.shape[0]
    acts = _forward(weights, X)
    logits = acts[-1]
    logp = _log_softmax(logits)
    rows = np.arange(n)
    penalty = sum(float(np.sum(w * w)) for w in weights[::2])
    loss = -float(np.mean(logp[rows, y])) + 0.5 * l2 * penalty

    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    dlogits /= n
    if len(weights) == 2:
        W, _ = weights
        return loss, (X.T @ dlogits + l2 * W, dlogits.sum(axis=0))
    W1, _, W2, _ = weights
    z1, h, _ = acts
    dz1 = (dlogits @ W2.T) * (z1 > 0.0)
    return loss, (
        X.T @ dz1 + l2 * W1,
        dz1.sum(axis=0),
        h.T @ dlogits + l2 * W2,
        dlogits.sum(axis=0),
    )


def loss_and_gradient(
    kind: LearnerKind,
    params: FloatVector,
    X: FloatMatrix,
    y: LabelVector,
    l2: float,
    *,
    n_classes: int | None = None,
) -> tuple[float, FloatVector]:
    """Mean softmax cross-entropy plus ``l2 * |weights|^2 / 2`` and its gradient.

    The MLP hidden width is inferred from the parameter count.
    """
    if kind not in NEURAL_KINDS:
        raise LearnerError(f"{kind} has no gradient objective")
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (X.shape[0],):
        raise DimensionMismatchError(f"{X.shape[0]} rows but {y.shape[0]} labels")
    c = n_classes if n_classes is not None else max(2, int(y.max()) + 1)
    weights = _unflatten(kind, np.asarray(params, dtype=np.float64), X.shape[1], c)
    loss, grads = _objective(weights, X, y, l2)
    return loss, np.concatenate([g.ravel() for g in grads])


# ---------------------------------------------------------------------------
# Hyperparameter checks
# ---------------------------------------------------------------------------


def _number(hp: Hyperparameters, key: str) -> float:
    value = hp[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise HyperparameterError(f"{key} must be numeric, got {value!r}")
    return float(value)


def _integer(hp: Hyperparameters, key: str, minimum: int) -> int:
    value = hp[key]
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise HyperparameterError(f"{key} must be an integer >= {minimum}, got {value!r}")
    return value


_REQUIRED_KEYS: dict[LearnerKind, frozenset[str]] = {
    LearnerKind.LOGISTIC_REGRESSION_NN: frozenset({"lr", "epochs", "batch", "l2"}),
    LearnerKind.MLP_NN: frozenset({"lr", "epochs", "batch", "l2", "hidden"}),
    LearnerKind.DECISION_TREE: frozenset({"max_depth"}),
    LearnerKind.K_NEAREST: frozenset({"k"}),
    LearnerKind.GAUSSIAN_NB: frozenset(),
}


def check_hyperparameters(kind: LearnerKind, hp: Hyperparameters) -> None:
    """Reject missing/extra keys and structurally invalid values."""
    expected = _REQUIRED_KEYS[kind]
    if set(hp) != expected:
        raise HyperparameterError(
            f"{kind} expects parameters {sorted(expected)}, got {sorted(hp)}"
        )
    if kind in NEURAL_KINDS:
        if _number(hp, "lr") <= 0.0:
            raise HyperparameterError("lr must be positive")
        if _number(hp, "l2") < 0.0:
            raise HyperparameterError("l2 must be non-negative")
        _integer(hp, "epochs", 0)
        if hp["batch"] != "full":
            _integer(hp, "batch", 1)
        if kind is LearnerKind.MLP_NN:
            _integer(hp, "hidden", 1)
    elif kind is LearnerKind.DECISION_TREE:
        _integer(hp, "max_depth", 0)
    elif kind is LearnerKind.K_NEAREST:
        _integer(hp, "k", 1)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _fit_network(
    kind: LearnerKind,
    hp: Hyperparameters,
    X: FloatMatrix,
    y: LabelVector,
    c: int,
    rng: np.random.Generator,
    deadline: Deadline | None,
) -> NetworkLearner:
    n, d = X.shape
    weights: list[FloatMatrix]
    if kind is LearnerKind.LOGISTIC_REGRESSION_NN:
        weights = [np.zeros((d, c)), np.zeros(c)]
    else:
        h = int(hp["hidden"])
        limit_in = math.sqrt(6.0 / (d + h))
        limit_out = math.sqrt(6.0 / (h + c))
        weights = [
            rng.uniform(-limit_in, limit_in, size=(d, h)),
            np.zeros(h),
            rng.uniform(-limit_out, limit_out, size=(h, c)),
            np.zeros(c),
        ]

    lr = _number(hp, "lr")
    l2 = _number(hp, "l2")
    epochs = int(hp["epochs"])
    batch = n if hp["batch"] == "full" else min(int(hp["batch"]), n)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for epoch in range(epochs):
            if deadline is not None:
                deadline.check()
            order = np.arange(n) if batch >= n else rng.permutation(n)
            for start in range(0, n, batch):
                idx = order[start : start + batch]
                loss, grads = _objective(tuple(weights), X[idx], y[idx], l2)
                if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                    raise LearnerFitError(f"{kind} diverged at epoch {epoch} (loss={loss})")
                for w, g in zip(weights, grads, strict=True):
                    w -= lr * g

    return NetworkLearner(kind=str(kind), n_classes=c, d_in=d, weights=tuple(weights))


def _gini_split(
    X: FloatMatrix, y: LabelVector, c: int
) -> tuple[int, float] | None:
    """Best (feature, threshold) by weighted Gini, lowest feature then threshold on ties."""
    n, d = X.shape
    onehot = np.eye(c)[y]
    total = onehot.sum(axis=0)
    best: tuple[int, float] | None = None
    best_score = math.inf
    for j in range(d):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        cuts = np.flatnonzero(xs[:-1] < xs[1:])
        if cuts.size == 0:
            continue
        left = np.cumsum(onehot[order], axis=0)[cuts]
        right = total - left
        n_left = (cuts + 1).astype(np.float64)
        n_right = n - n_left
        gini_left = 1.0 - np.sum((left / n_left[:, None]) ** 2, axis=1)
        gini_right = 1.0 - np.sum((right / n_right[:, None]) ** 2, axis=1)
        score = (n_left * gini_left + n_right * gini_right) / n
        i = int(np.argmin(score))
        if score[i] < best_score - _SPLIT_TOLERANCE:
            best_score = float(score[i])
            best = (j, float((xs[cuts[i]] + xs[cuts[i] + 1]) / 2.0))
    return best


def _fit_tree(
    hp: Hyperparameters,
    X: FloatMatrix,
    y: LabelVector,
    c: int,
    deadline: Deadline | None,
) -> TreeLearner:
    max_depth = int(hp["max_depth"])
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    proba: list[FloatVector] = []

    def new_node(rows: NDArray[np.intp]) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        proba.append(np.bincount(y[rows], minlength=c) / rows.size)
        return len(feature) - 1

    stack = [(new_node(np.arange(X.shape[0])), np.arange(X.shape[0]), 0)]
    while stack:
        if deadline is not None:
            deadline.check()
        node, rows, depth = stack.pop()
        labels = y[rows]
        if depth >= max_depth or rows.size < 2 or np.all(labels == labels[0]):
            continue
        split = _gini_split(X[rows], labels, c)
        if split is None:
            continue
        j, t = split
        mask = X[rows, j] <= t
        feature[node] = j
        threshold[node] = t
        left_rows, right_rows = rows[mask], rows[~mask]
        left[node] = new_node(left_rows)
        right[node] = new_node(right_rows)
        stack.append((right[node], right_rows, depth + 1))
        stack.append((left[node], left_rows, depth + 1))

    return TreeLearner(
        kind=str(LearnerKind.DECISION_TREE),
        n_classes=c,
        d_in=X.shape[1],
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        leaf_proba=np.vstack(proba),
    )


def _fit_gaussian_nb(X: FloatMatrix, y: LabelVector, c: int) -> GaussianNBLearner:
    n, d = X.shape
    floor = _VAR_FLOOR * float(np.max(X.var(axis=0))) if n > 1 else 0.0
    if floor <= 0.0:
        floor = _VAR_FLOOR
    means = np.zeros((c, d))
    variances = np.ones((c, d))
    counts = np.bincount(y, minlength=c)
    for k in np.flatnonzero(counts):
        rows = X[y == k]
        means[k] = rows.mean(axis=0)
        variances[k] = np.maximum(rows.var(axis=0), floor)
    with np.errstate(divide="ignore"):
        log_priors = np.log(counts / n)
    return GaussianNBLearner(
        kind=str(LearnerKind.GAUSSIAN_NB),
        n_classes=c,
        d_in=d,
        means=means,
        variances=variances,
        log_priors=log_priors,
    )


def fit(
    kind: LearnerKind,
    hp: Hyperparameters,
    X: FloatMatrix,
    y: LabelVector,
    seed: int,
    *,
    n_classes: int | None = None,
    deadline: Deadline | None = None,
) -> FittedLearner:
    """Fit one estimator; deterministic in ``(kind, hp, X, y, seed)``.

    *n_classes* fixes the probability width when *y* lacks some classes.
    """
    kind = LearnerKind(kind)
    check_hyperparameters(kind, hp)
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (X.shape[0],):
        raise DimensionMismatchError(f"{X.shape[0]} rows but {y.shape[0]} labels")
    if X.shape[0] == 0:
        raise LearnerFitError("cannot fit on an empty training set")
    c = n_classes if n_classes is not None else max(2, int(y.max()) + 1)
    if y.min() < 0 or y.max() >= c:
        raise DimensionMismatchError(f"labels must lie in [0, {c - 1}]")
    d = X.shape[1]

    distinct = np.unique(y)
    if distinct.size == 1:
        return ConstantLearner(kind=str(kind), n_classes=c, d_in=d, label=int(distinct[0]))

    if kind in NEURAL_KINDS:
        return _fit_network(kind, hp, X, y, c, np.random.default_rng(seed), deadline)
    if kind is LearnerKind.DECISION_TREE:
        return _fit_tree(hp, X, y, c, deadline)
    if kind is LearnerKind.K_NEAREST:
        k = min(int(hp["k"]), X.shape[0])
        return KNearestLearner(
            kind=str(kind), n_classes=c, d_in=d, k=k, X_train=X.copy(), y_train=y.copy()
        )
    return _fit_gaussian_nb(X, y, c)


def predict_proba(m: FittedLearner, X: FloatMatrix) -> FloatMatrix:
    """Class probabilities; every row is non-negative and sums to one."""
    return m.predict_proba(X)


def predict(m: FittedLearner, X: FloatMatrix) -> LabelVector:
    """Row-wise argmax of :func:`predict_proba`, ties to the lower class."""
    return m.predict(X)


def flatten_parameters(m: FittedLearner) -> FloatVector:
    """Parameters of a neural learner in ``loss_and_gradient`` order."""
    if not isinstance(m, NetworkLearner):
        raise LearnerError(f"{m.kind} has no trainable parameters")
    return m.flat_parameters()
