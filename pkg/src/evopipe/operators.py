"""Operator taxonomy, search spaces, registry and template strings.

An operator is one pipeline node. Selectors keep a subset of columns,
transformers rescale or project them, ``Stack`` appends a classifier's class
probabilities and predicted class to its input, ``Union`` concatenates
parallel branches, ``Identity`` passes data through and the root classifier
emits predictions.

The registry plays the role of a configuration dictionary: it lists the
operators the search may use together with their hyperparameter spaces.
"""

from __future__ import annotations

import dataclasses
import math
from abc import ABC, abstractmethod
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray

from evopipe import learners
from evopipe._log import logger
from evopipe._timing import Deadline
from evopipe.errors import (
    DimensionMismatchError,
    EvaluationTimeout,
    HyperparameterError,
    LearnerFitError,
    RegistryError,
    TemplateError,
)
from evopipe.learners import FittedLearner, LearnerKind, WrappedLearner

FloatMatrix = NDArray[np.float64]
LabelVector = NDArray[np.int64]
Value = int | float | str


class OperatorKindClass(StrEnum):
    SELECTOR = "Selector"
    TRANSFORMER = "Transformer"
    CLASSIFIER = "Classifier"
    COMBINER = "Combiner"
    STACKING_WRAPPER = "StackingWrapper"
    IDENTITY = "Identity"


class NodeKind(StrEnum):
    """Structural role of a pipeline-tree node."""

    SOURCE = "Source"
    SELECTOR = "Selector"
    TRANSFORMER = "Transformer"
    STACK = "Stack"
    UNION = "Union"
    CLASSIFIER = "Classifier"


# Which spec kind classes may sit at which node kind.
NODE_SPEC_CLASSES: dict[NodeKind, frozenset[OperatorKindClass]] = {
    NodeKind.SELECTOR: frozenset({OperatorKindClass.SELECTOR}),
    NodeKind.TRANSFORMER: frozenset({OperatorKindClass.TRANSFORMER, OperatorKindClass.IDENTITY}),
    NodeKind.STACK: frozenset({OperatorKindClass.CLASSIFIER}),
    NodeKind.CLASSIFIER: frozenset({OperatorKindClass.CLASSIFIER}),
}


class EstimatorFilter(StrEnum):
    ALL = "all"
    LR_ONLY = "lr"
    MLP_ONLY = "mlp"


_FILTER_TARGET = {
    EstimatorFilter.LR_ONLY: LearnerKind.LOGISTIC_REGRESSION_NN.value,
    EstimatorFilter.MLP_ONLY: LearnerKind.MLP_NN.value,
}


@dataclass(frozen=True)
class Range:
    """Continuous (or integer) interval ``[low, high]`` sampled uniformly."""

    low: float
    high: float
    integer: bool = False

    def contains(self, value: Value) -> bool:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return False
        if self.integer and not isinstance(value, int):
            return False
        return self.low <= value <= self.high

    def sample(self, rng: np.random.Generator) -> Value:
        if self.integer:
            return int(rng.integers(int(self.low), int(self.high), endpoint=True))
        return float(rng.uniform(self.low, self.high))


ParamSpace = tuple[Value, ...] | Range


class ProbabilisticModel(Protocol):
    def predict_proba(self, X: FloatMatrix) -> ArrayLike: ...


class LearnerImplementation(Protocol):
    """Fit hook of a user-registered classifier."""

    def __call__(
        self,
        hp: Mapping[str, Value],
        X: FloatMatrix,
        y: LabelVector,
        seed: int,
        n_classes: int,
    ) -> ProbabilisticModel: ...


@dataclass(frozen=True)
class OperatorSpec:
    name: str
    kind_class: OperatorKindClass
    space: Mapping[str, ParamSpace] = field(default_factory=dict)
    fit_hook: LearnerImplementation | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class OperatorInstance:
    spec_name: str
    hp: Mapping[str, Value] = field(default_factory=dict)


_NEURAL_SPACE: dict[str, ParamSpace] = {
    "lr": (0.001, 0.01, 0.1),
    "epochs": (50, 100, 200),
    "batch": (16, 64, "full"),
    "l2": (0.0, 1e-4, 1e-2),
}

BUILTIN_SPECS: tuple[OperatorSpec, ...] = (
    OperatorSpec(
        "VarianceThreshold", OperatorKindClass.SELECTOR, {"threshold": (0.0, 1e-4, 1e-2)}
    ),
    OperatorSpec("SelectKBest", OperatorKindClass.SELECTOR, {"k_fraction": (0.25, 0.5, 0.75, 1.0)}),
    OperatorSpec("MinMaxScaler", OperatorKindClass.TRANSFORMER),
    OperatorSpec("StandardScaler", OperatorKindClass.TRANSFORMER),
    OperatorSpec("PCA", OperatorKindClass.TRANSFORMER, {"frac": (0.25, 0.5, 0.75)}),
    OperatorSpec("Identity", OperatorKindClass.IDENTITY),
    OperatorSpec("Union", OperatorKindClass.COMBINER),
    OperatorSpec("Stack", OperatorKindClass.STACKING_WRAPPER),
    OperatorSpec("DecisionTree", OperatorKindClass.CLASSIFIER, {"max_depth": (2, 4, 6, 8, 12)}),
    OperatorSpec("KNearest", OperatorKindClass.CLASSIFIER, {"k": (1, 3, 5, 7, 11)}),
    OperatorSpec("GaussianNB", OperatorKindClass.CLASSIFIER),
)

NEURAL_SPECS: tuple[OperatorSpec, ...] = (
    OperatorSpec("LogisticRegressionNN", OperatorKindClass.CLASSIFIER, dict(_NEURAL_SPACE)),
    OperatorSpec(
        "MlpNN",
        OperatorKindClass.CLASSIFIER,
        {**_NEURAL_SPACE, "hidden": (8, 16, 32, 64, 128)},
    ),
)


@dataclass(frozen=True)
class Registry:
    """Ordered operator catalogue available to the search."""

    specs: tuple[OperatorSpec, ...]
    nn_enabled: bool = False
    estimator_filter: EstimatorFilter = EstimatorFilter.ALL

    def __post_init__(self) -> None:
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise RegistryError(f"duplicate operator names in {names}")
        if not self.classifiers:
            raise RegistryError("a registry needs at least one classifier")

    def __contains__(self, name: object) -> bool:
        return any(s.name == name for s in self.specs)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.specs)

    def get(self, name: str) -> OperatorSpec:
        for spec in self.specs:
            if spec.name == name:
                return spec
        raise RegistryError(f"unknown operator {name!r}")

    def by_kind(self, *kind_classes: OperatorKindClass) -> tuple[OperatorSpec, ...]:
        return tuple(s for s in self.specs if s.kind_class in kind_classes)

    @property
    def classifiers(self) -> tuple[OperatorSpec, ...]:
        return self.by_kind(OperatorKindClass.CLASSIFIER)

    def for_node(self, kind: NodeKind) -> tuple[OperatorSpec, ...]:
        """Specs that may fill a node of *kind* (Identity excluded from sampling)."""
        if kind is NodeKind.TRANSFORMER:
            return self.by_kind(OperatorKindClass.TRANSFORMER)
        allowed = NODE_SPEC_CLASSES.get(kind, frozenset())
        return tuple(s for s in self.specs if s.kind_class in allowed)


def default_registry(
    nn_enabled: bool = False, estimator_filter: EstimatorFilter | str = EstimatorFilter.ALL
) -> Registry:
    """Built-in catalogue, optionally with neural classifiers and a filter."""
    estimator_filter = EstimatorFilter(estimator_filter)
    specs = BUILTIN_SPECS + (NEURAL_SPECS if nn_enabled else ())
    if estimator_filter is not EstimatorFilter.ALL:
        if not nn_enabled:
            raise RegistryError(
                f"estimator filter {estimator_filter.value!r} needs neural estimators enabled"
            )
        keep = _FILTER_TARGET[estimator_filter]
        specs = tuple(
            s for s in specs if s.kind_class is not OperatorKindClass.CLASSIFIER or s.name == keep
        )
    return Registry(specs=specs, nn_enabled=nn_enabled, estimator_filter=estimator_filter)


def restrict_classifiers(registry: Registry, names: Iterable[str]) -> Registry:
    """Registry keeping only the named classifiers (other operators untouched)."""
    wanted = set(names)
    unknown = wanted - {s.name for s in registry.classifiers}
    if unknown:
        raise RegistryError(f"unknown classifiers {sorted(unknown)}")
    specs = tuple(
        s
        for s in registry.specs
        if s.kind_class is not OperatorKindClass.CLASSIFIER or s.name in wanted
    )
    return dataclasses.replace(registry, specs=specs)


def lookup_spec(name: str, registry: Registry | None = None) -> OperatorSpec:
    if registry is not None:
        return registry.get(name)
    for spec in BUILTIN_SPECS + NEURAL_SPECS:
        if spec.name == name:
            return spec
    raise RegistryError(f"unknown operator {name!r}")


# ---------------------------------------------------------------------------
# Hyperparameters
# ---------------------------------------------------------------------------


def _in_space(space: ParamSpace, value: Value) -> bool:
    if isinstance(space, Range):
        return space.contains(value)
    if isinstance(value, str):
        return value in [c for c in space if isinstance(c, str)]
    if isinstance(value, bool):
        return False
    return value in [c for c in space if not isinstance(c, str)]


def validate_hyperparameters(spec: OperatorSpec, hp: Mapping[str, Value]) -> None:
    if set(hp) != set(spec.space):
        raise HyperparameterError(
            f"{spec.name} expects parameters {sorted(spec.space)}, got {sorted(hp)}"
        )
    for key, space in spec.space.items():
        if not _in_space(space, hp[key]):
            raise HyperparameterError(f"{spec.name}.{key}={hp[key]!r} is outside its space")


def sample_value(space: ParamSpace, rng: np.random.Generator) -> Value:
    if isinstance(space, Range):
        return space.sample(rng)
    return space[int(rng.integers(len(space)))]


def sample_hyperparameters(spec: OperatorSpec, rng: np.random.Generator) -> dict[str, Value]:
    return {key: sample_value(spec.space[key], rng) for key in sorted(spec.space)}


def sample_instance(spec: OperatorSpec, rng_seed: int) -> OperatorInstance:
    """Draw every parameter uniformly from its space."""
    rng = np.random.default_rng(rng_seed)
    return OperatorInstance(spec.name, sample_hyperparameters(spec, rng))


def default_instance(spec: OperatorSpec) -> OperatorInstance:
    """First choice (or lower bound) of every parameter."""
    hp: dict[str, Value] = {}
    for key in sorted(spec.space):
        space = spec.space[key]
        if isinstance(space, Range):
            hp[key] = int(space.low) if space.integer else float(space.low)
        else:
            hp[key] = space[0]
    return OperatorInstance(spec.name, hp)


# ---------------------------------------------------------------------------
# Fitted operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FittedOperator(ABC):
    spec_name: str
    d_in: int

    @abstractmethod
    def _apply(self, X: FloatMatrix) -> FloatMatrix: ...

    def transform(self, X: FloatMatrix) -> FloatMatrix:
        if X.ndim != 2 or X.shape[1] != self.d_in:
            raise DimensionMismatchError(
                f"{self.spec_name} was fitted on {self.d_in} columns, got {X.shape[-1]}"
            )
        return self._apply(X)


@dataclass(frozen=True, eq=False)
class ColumnSelection(FittedOperator):
    columns: NDArray[np.intp]

    def _apply(self, X: FloatMatrix) -> FloatMatrix:
        return X[:, self.columns]


@dataclass(frozen=True, eq=False)
class ColumnScaling(FittedOperator):
    """``(X - offset) / spread``; columns with zero spread map to 0."""

    offset: NDArray[np.float64]
    spread: NDArray[np.float64]

    def _apply(self, X: FloatMatrix) -> FloatMatrix:
        out = np.zeros_like(X, dtype=np.float64)
        np.divide(X - self.offset, self.spread, out=out, where=self.spread > 0.0)
        return out


@dataclass(frozen=True, eq=False)
class Projection(FittedOperator):
    mean: NDArray[np.float64]
    components: FloatMatrix

    def _apply(self, X: FloatMatrix) -> FloatMatrix:
        return (X - self.mean) @ self.components


@dataclass(frozen=True, eq=False)
class Passthrough(FittedOperator):
    def _apply(self, X: FloatMatrix) -> FloatMatrix:
        return X.copy()


@dataclass(frozen=True, eq=False)
class StackedClassifier(FittedOperator):
    """Appends class probabilities and the predicted class: width ``d + c + 1``."""

    learner: FittedLearner

    def _apply(self, X: FloatMatrix) -> FloatMatrix:
        proba = self.learner.predict_proba(X)
        predicted = np.argmax(proba, axis=1).astype(np.float64)
        return np.hstack([X, proba, predicted[:, None]])


_SPREAD_EPS = 1e-12


def _anova_f(X: FloatMatrix, y: LabelVector) -> NDArray[np.float64]:
    groups = np.unique(y)
    n, d = X.shape
    if groups.size < 2 or n <= groups.size:
        return np.zeros(d)
    overall = X.mean(axis=0)
    between = np.zeros(d)
    within = np.zeros(d)
    for g in groups:
        rows = X[y == g]
        mean = rows.mean(axis=0)
        between += rows.shape[0] * (mean - overall) ** 2
        within += ((rows - mean) ** 2).sum(axis=0)
    between /= groups.size - 1
    within /= n - groups.size
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(within > 0.0, between / within, np.where(between > 0.0, np.inf, 0.0))
    return np.nan_to_num(f, nan=0.0, posinf=np.inf)


def _fit_pca(X: FloatMatrix, frac: float) -> tuple[NDArray[np.float64], FloatMatrix]:
    n, d = X.shape
    m = max(1, math.ceil(frac * d))
    mean = X.mean(axis=0)
    centred = X - mean
    cov = centred.T @ centred / max(n - 1, 1)
    values, vectors = np.linalg.eigh(cov)
    order = np.argsort(-values, kind="stable")[:m]
    components = vectors[:, order]
    # sign convention: the largest-magnitude loading of each component is positive
    pivots = np.argmax(np.abs(components), axis=0)
    signs = np.where(components[pivots, np.arange(m)] < 0.0, -1.0, 1.0)
    return mean, components * signs


def fit_classifier(
    inst: OperatorInstance,
    X: FloatMatrix,
    y: LabelVector,
    seed: int,
    *,
    registry: Registry | None = None,
    n_classes: int | None = None,
    deadline: Deadline | None = None,
) -> FittedLearner:
    """Fit a classifier instance, built-in or registered."""
    spec = lookup_spec(inst.spec_name, registry)
    if spec.kind_class is not OperatorKindClass.CLASSIFIER:
        raise RegistryError(f"{spec.name} is not a classifier")
    validate_hyperparameters(spec, inst.hp)
    c = n_classes if n_classes is not None else max(2, int(np.max(y)) + 1)
    if spec.fit_hook is None:
        return learners.fit(
            LearnerKind(spec.name), inst.hp, X, y, seed, n_classes=c, deadline=deadline
        )
    try:
        model = spec.fit_hook(dict(inst.hp), X, y, seed, c)
    except EvaluationTimeout:
        raise
    except Exception as exc:
        raise LearnerFitError(f"{spec.name} fit failed: {exc}") from exc
    return WrappedLearner(kind=spec.name, n_classes=c, d_in=X.shape[1], model=model)


def fit_operator(
    inst: OperatorInstance,
    X: FloatMatrix,
    y: LabelVector,
    seed: int,
    *,
    registry: Registry | None = None,
    n_classes: int | None = None,
    deadline: Deadline | None = None,
) -> FittedOperator:
    """Learn the state of one non-root operator from its input."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DimensionMismatchError("operators need a non-empty 2-D input")
    if np.asarray(y).shape != (X.shape[0],):
        raise DimensionMismatchError(f"{X.shape[0]} rows but {np.asarray(y).shape[0]} labels")
    spec = lookup_spec(inst.spec_name, registry)
    d = X.shape[1]

    if spec.kind_class is OperatorKindClass.CLASSIFIER:
        learner = fit_classifier(
            inst, X, y, seed, registry=registry, n_classes=n_classes, deadline=deadline
        )
        return StackedClassifier(spec.name, d, learner)

    validate_hyperparameters(spec, inst.hp)
    if spec.name == "Identity":
        return Passthrough(spec.name, d)
    if spec.name == "VarianceThreshold":
        var = X.var(axis=0)
        keep = np.flatnonzero(var > float(inst.hp["threshold"]))
        if keep.size == 0:
            keep = np.array([int(np.argmax(var))])
        return ColumnSelection(spec.name, d, keep.astype(np.intp))
    if spec.name == "SelectKBest":
        k = max(1, math.ceil(float(inst.hp["k_fraction"]) * d))
        scores = _anova_f(X, np.asarray(y, dtype=np.int64))
        ranked = np.lexsort((np.arange(d), -scores))
        return ColumnSelection(spec.name, d, np.sort(ranked[:k]).astype(np.intp))
    if spec.name == "MinMaxScaler":
        low = X.min(axis=0)
        return ColumnScaling(spec.name, d, low, X.max(axis=0) - low)
    if spec.name == "StandardScaler":
        mean = X.mean(axis=0)
        spread = X.std(axis=0)
        # rounding leaves constant columns with a tiny nonzero std
        spread[spread <= _SPREAD_EPS * np.maximum(np.abs(mean), 1.0)] = 0.0
        return ColumnScaling(spec.name, d, mean, spread)
    if spec.name == "PCA":
        mean, components = _fit_pca(X, float(inst.hp["frac"]))
        return Projection(spec.name, d, mean, components)
    raise RegistryError(f"{spec.name} is not a unary operator")


def transform(f: FittedOperator, X: FloatMatrix) -> FloatMatrix:
    """Apply a fitted operator; the input width must match fit time."""
    return f.transform(np.asarray(X, dtype=np.float64))


def union_outputs(blocks: Iterable[FloatMatrix]) -> FloatMatrix:
    """Horizontal concatenation of branch outputs, in branch order."""
    parts = list(blocks)
    if len(parts) < 2:
        raise DimensionMismatchError("a union needs at least two branches")
    return np.hstack(parts)


# ---------------------------------------------------------------------------
# Custom learners
# ---------------------------------------------------------------------------

_TRIAL_X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
_TRIAL_Y = np.array([0, 0, 1, 1], dtype=np.int64)


def register_custom_learner(
    registry: Registry, spec: OperatorSpec, fit_hook: LearnerImplementation
) -> Registry:
    """Return a registry that also offers *spec*, fitted by *fit_hook*.

    The hook is trial-fitted on a 4-row dataset; it must fit and return valid
    probabilities.
    """
    if spec.name in registry:
        raise RegistryError(f"operator {spec.name!r} is already registered")
    if spec.kind_class is not OperatorKindClass.CLASSIFIER:
        raise RegistryError(f"custom learner {spec.name!r} must be a Classifier")
    spec = dataclasses.replace(spec, fit_hook=fit_hook)
    extended = dataclasses.replace(registry, specs=registry.specs + (spec,))

    trial = sample_instance(spec, 0)
    try:
        learner = fit_classifier(trial, _TRIAL_X, _TRIAL_Y, 0, registry=extended, n_classes=2)
        proba = learner.predict_proba(_TRIAL_X)
    except EvaluationTimeout:
        raise
    except Exception as exc:
        raise RegistryError(f"trial fit of {spec.name!r} failed: {exc}") from exc
    if np.any(proba < 0.0) or not np.allclose(proba.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
        raise RegistryError(f"{spec.name!r} returned invalid probabilities on the trial set")
    logger.info("Registered custom learner %s", spec.name)
    return extended


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TemplateSlot:
    token: str
    role: NodeKind
    candidates: tuple[str, ...]


@dataclass(frozen=True)
class TemplateConstraint:
    """Slot ``i`` constrains node ``i`` of a linear pipeline; slot 0 reads the data."""

    slots: tuple[TemplateSlot, ...]

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(s.token for s in self.slots)


def _names(specs: tuple[OperatorSpec, ...]) -> tuple[str, ...]:
    return tuple(s.name for s in specs)


def _slot(token: str, last: bool, registry: Registry) -> TemplateSlot:
    classifier_role = NodeKind.CLASSIFIER if last else NodeKind.STACK
    if token == "Selector":
        return TemplateSlot(token, NodeKind.SELECTOR, _names(registry.for_node(NodeKind.SELECTOR)))
    if token == "Transformer":
        return TemplateSlot(
            token, NodeKind.TRANSFORMER, _names(registry.for_node(NodeKind.TRANSFORMER))
        )
    if token in ("Classifier", "Stack"):
        if token == "Stack" and last:
            raise TemplateError("a template cannot end with a Stack slot")
        return TemplateSlot(token, classifier_role, _names(registry.classifiers))
    if token not in registry:
        raise TemplateError(f"unknown template token {token!r}")
    spec = registry.get(token)
    if spec.kind_class is OperatorKindClass.SELECTOR:
        return TemplateSlot(token, NodeKind.SELECTOR, (token,))
    if spec.kind_class in (OperatorKindClass.TRANSFORMER, OperatorKindClass.IDENTITY):
        return TemplateSlot(token, NodeKind.TRANSFORMER, (token,))
    if spec.kind_class is OperatorKindClass.CLASSIFIER:
        return TemplateSlot(token, classifier_role, (token,))
    raise TemplateError(f"{token!r} cannot appear in a linear template")


def parse_template(template: str, registry: Registry) -> TemplateConstraint:
    """Parse ``token ("-" token)*``; the final token must denote a classifier."""
    if not template.strip():
        raise TemplateError("empty template")
    tokens = [t.strip() for t in template.split("-")]
    if any(not t for t in tokens):
        raise TemplateError(f"empty token in template {template!r}")
    slots = tuple(_slot(t, i == len(tokens) - 1, registry) for i, t in enumerate(tokens))
    if slots[-1].role is not NodeKind.CLASSIFIER:
        raise TemplateError(f"final template token {tokens[-1]!r} is not a classifier")
    for slot in slots:
        if not slot.candidates:
            raise TemplateError(f"no registered operator satisfies {slot.token!r}")
    return TemplateConstraint(slots)


def render_template(constraint: TemplateConstraint) -> str:
    return "-".join(constraint.tokens)


def spec_kind_matches(spec: OperatorSpec, kind: NodeKind) -> bool:
    return spec.kind_class in NODE_SPEC_CLASSES.get(kind, frozenset())

