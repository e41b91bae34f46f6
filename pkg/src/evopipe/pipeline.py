"""Pipeline trees: grammar, fitting, scoring and the export artifact.

Data enters at ``Source`` leaves and predictions leave the ``Classifier``
root. Nodes are addressed by paths: the root is ``/`` and the ``i``-th child
of a node at ``/p`` is ``/p/i``.

Export artifact (``evopipe-export v1``)::

    evopipe-export v1
    [metadata]
    cv_score = 0.94064772667817718
    dataset = "breast-cancer-bundled"
    seed = 42
    [nodes]
    / Classifier GaussianNB
    /0 Selector SelectKBest k_fraction=0.5
    /0/0 Source
    [script]
    # Average CV score on the training set was: 0.94064772667817718
    exported_pipeline = make_pipeline(
        SelectKBest(k_fraction=0.5),
        GaussianNB()
    )
    [end]

Metadata keys are sorted; missing values are written ``none``. Node lines
come in preorder, hyperparameters sorted by name, floats with 17
significant digits and strings JSON-quoted. The script block is
documentation rendered from the node block and is ignored on import.
"""

from __future__ import annotations

import dataclasses
import hashlib
import re
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import NDArray

from evopipe._canonical import parse_value, render_float, render_value
from evopipe._log import logger
from evopipe._timing import Deadline
from evopipe.data import Dataset, accuracy, kfold
from evopipe.errors import (
    ArtifactParseError,
    ArtifactValidationError,
    ArtifactVersionError,
    DimensionMismatchError,
    EvaluationTimeout,
    EvopipeError,
    PipelineFitError,
)
from evopipe.learners import FittedLearner
from evopipe.metadata import EXPORT_HEADER
from evopipe.operators import (
    FittedOperator,
    NodeKind,
    OperatorInstance,
    Registry,
    default_registry,
    fit_classifier,
    fit_operator,
    spec_kind_matches,
    union_outputs,
    validate_hyperparameters,
)

MAX_NODES = 10
MAX_DEPTH = 5

FloatMatrix = NDArray[np.float64]
Path = tuple[int, ...]

_UNARY = frozenset({NodeKind.SELECTOR, NodeKind.TRANSFORMER, NodeKind.STACK, NodeKind.CLASSIFIER})

# Every built-in operator, neural ones included.
FULL_REGISTRY = default_registry(nn_enabled=True)


# ---------------------------------------------------------------------------
# Tree model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    kind: NodeKind
    inst: OperatorInstance | None = None
    children: tuple[Node, ...] = ()

    @property
    def operator_count(self) -> int:
        own = 0 if self.kind is NodeKind.SOURCE else 1
        return own + sum(c.operator_count for c in self.children)

    @property
    def operator_depth(self) -> int:
        if self.kind is NodeKind.SOURCE:
            return 0
        return 1 + max((c.operator_depth for c in self.children), default=0)


SOURCE = Node(NodeKind.SOURCE)


def unary(kind: NodeKind, spec_name: str, hp: Mapping[str, Any], child: Node) -> Node:
    return Node(kind, OperatorInstance(spec_name, dict(hp)), (child,))


def union(*branches: Node) -> Node:
    return Node(NodeKind.UNION, None, tuple(branches))


@dataclass(frozen=True)
class PipelineTree:
    root: Node

    @property
    def node_count(self) -> int:
        return self.root.operator_count

    @property
    def max_depth(self) -> int:
        return self.root.operator_depth


def render_path(path: Path) -> str:
    return "/" + "/".join(str(i) for i in path)


def parse_path(text: str) -> Path:
    if text == "/":
        return ()
    if not re.fullmatch(r"(/\d+)+", text):
        raise ValueError(f"bad node path {text!r}")
    return tuple(int(p) for p in text[1:].split("/"))


def iter_paths(tree: PipelineTree) -> Iterator[tuple[Path, Node]]:
    """Every node with its path, in preorder."""
    stack: list[tuple[Path, Node]] = [((), tree.root)]
    while stack:
        path, node = stack.pop()
        yield path, node
        for i in reversed(range(len(node.children))):
            stack.append((path + (i,), node.children[i]))


def node_at(tree: PipelineTree, path: Path) -> Node:
    node = tree.root
    for i in path:
        node = node.children[i]
    return node


def _replace(node: Node, path: Path, new: Node) -> Node:
    if not path:
        return new
    head, rest = path[0], path[1:]
    children = list(node.children)
    children[head] = _replace(children[head], rest, new)
    return dataclasses.replace(node, children=tuple(children))


def replace_subtree(tree: PipelineTree, path: Path, new: Node) -> PipelineTree:
    return PipelineTree(_replace(tree.root, path, new))


def linear_pipeline(steps: Sequence[tuple[NodeKind, OperatorInstance]]) -> PipelineTree:
    """Chain ``steps`` from the source upwards; the last step is the classifier."""
    node = SOURCE
    for kind, inst in steps:
        node = Node(kind, inst, (node,))
    return PipelineTree(node)


def node_seed(seed: int, path: Path | str) -> int:
    """32-bit seed of the node at *path*, independent of sibling order."""
    text = path if isinstance(path, str) else render_path(path)
    digest = hashlib.blake2b(f"{seed}:{text}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "big")


def derive_seed(seed: int, *parts: int | str) -> int:
    key = ":".join(str(p) for p in (seed, *parts))
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=4).digest(), "big")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


def _check_node(node: Node, path: Path, registry: Registry) -> str | None:
    is_root = not path
    if is_root and node.kind is not NodeKind.CLASSIFIER:
        return f"root must be a Classifier, found {node.kind}"
    if not is_root and node.kind is NodeKind.CLASSIFIER:
        return "a Classifier may only appear at the root"
    if node.kind is NodeKind.SOURCE:
        if node.children or node.inst is not None:
            return "a Source is a bare leaf"
        return None
    if node.kind is NodeKind.UNION:
        if node.inst is not None:
            return "a Union carries no operator"
        if len(node.children) < 2:
            return f"a Union needs at least 2 branches, found {len(node.children)}"
        return None
    if len(node.children) != 1:
        return f"a {node.kind} node needs exactly 1 child, found {len(node.children)}"
    if node.inst is None:
        return f"a {node.kind} node needs an operator"
    if node.inst.spec_name not in registry:
        return f"unknown operator {node.inst.spec_name!r}"
    spec = registry.get(node.inst.spec_name)
    if not spec_kind_matches(spec, node.kind):
        return f"{spec.name} ({spec.kind_class}) cannot fill a {node.kind} node"
    try:
        validate_hyperparameters(spec, node.inst.hp)
    except EvopipeError as exc:
        return str(exc)
    return None


def validate(tree: PipelineTree, registry: Registry | None = None) -> Violation | None:
    """First violation in preorder, then the size and depth bounds; ``None`` if valid."""
    registry = registry or FULL_REGISTRY
    for path, node in iter_paths(tree):
        problem = _check_node(node, path, registry)
        if problem is not None:
            return Violation(render_path(path), problem)
    if tree.node_count > MAX_NODES:
        return Violation("/", f"{tree.node_count} operator nodes exceed the bound of {MAX_NODES}")
    if tree.max_depth > MAX_DEPTH:
        return Violation("/", f"depth {tree.max_depth} exceeds the bound of {MAX_DEPTH}")
    return None


def complexity(tree: PipelineTree) -> int:
    """Operator-node count (Source leaves excluded)."""
    return tree.node_count


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FittedNode:
    kind: NodeKind
    model: FittedOperator | FittedLearner | None
    children: tuple[FittedNode, ...] = ()

    def output(self, X: FloatMatrix) -> FloatMatrix:
        """Features this node hands to its parent (non-root nodes only)."""
        if self.kind is NodeKind.SOURCE:
            return X
        if self.kind is NodeKind.UNION:
            return union_outputs(c.output(X) for c in self.children)
        assert isinstance(self.model, FittedOperator)
        return self.model.transform(self.children[0].output(X))


@dataclass(frozen=True, eq=False)
class FittedPipeline:
    tree: PipelineTree
    root: FittedNode
    d_in: int
    n_classes: int

    @property
    def learner(self) -> FittedLearner:
        assert isinstance(self.root.model, FittedLearner)
        return self.root.model


def _fit_node(
    node: Node,
    path: Path,
    X: FloatMatrix,
    y: NDArray[np.int64],
    seed: int,
    registry: Registry | None,
    n_classes: int,
    deadline: Deadline | None,
) -> tuple[FittedNode, FloatMatrix]:
    if node.kind is NodeKind.SOURCE:
        return FittedNode(node.kind, None), X
    if deadline is not None:
        deadline.check()
    fitted_children = []
    outputs = []
    for i, child in enumerate(node.children):
        fc, out = _fit_node(child, path + (i,), X, y, seed, registry, n_classes, deadline)
        fitted_children.append(fc)
        outputs.append(out)
    if node.kind is NodeKind.UNION:
        merged = np.hstack(outputs)
        return FittedNode(node.kind, None, tuple(fitted_children)), merged

    assert node.inst is not None
    Xc = outputs[0]
    s = node_seed(seed, path)
    model: FittedOperator | FittedLearner
    try:
        if node.kind is NodeKind.CLASSIFIER:
            model = fit_classifier(
                node.inst, Xc, y, s, registry=registry, n_classes=n_classes, deadline=deadline
            )
            out = Xc
        else:
            operator = fit_operator(
                node.inst, Xc, y, s, registry=registry, n_classes=n_classes, deadline=deadline
            )
            out = operator.transform(Xc)
            model = operator
    except EvaluationTimeout:
        raise
    except Exception as exc:
        raise PipelineFitError(render_path(path), exc) from exc
    return FittedNode(node.kind, model, tuple(fitted_children)), out


def fit_pipeline(
    tree: PipelineTree,
    X: FloatMatrix,
    y: NDArray[np.int64],
    seed: int,
    *,
    registry: Registry | None = None,
    n_classes: int | None = None,
    deadline: Deadline | None = None,
) -> FittedPipeline:
    """Fit every node on its child's transformed training output, leaves first."""
    violation = validate(tree, registry)
    if violation is not None:
        raise PipelineFitError(violation.path, ValueError(violation.message))
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    c = n_classes if n_classes is not None else max(2, int(y.max()) + 1)
    root, _ = _fit_node(tree.root, (), X, y, seed, registry, c, deadline)
    return FittedPipeline(tree=tree, root=root, d_in=X.shape[1], n_classes=c)


def _root_input(fp: FittedPipeline, X: Any) -> FloatMatrix:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != fp.d_in:
        raise DimensionMismatchError(
            f"pipeline was fitted on {fp.d_in} columns, got shape {X.shape}"
        )
    return fp.root.children[0].output(X)


def predict_pipeline(fp: FittedPipeline, X: FloatMatrix) -> NDArray[np.int64]:
    return fp.learner.predict(_root_input(fp, X))


def predict_proba_pipeline(fp: FittedPipeline, X: FloatMatrix) -> FloatMatrix:
    return fp.learner.predict_proba(_root_input(fp, X))


@dataclass(frozen=True)
class CvOutcome:
    fold_scores: tuple[float, ...]
    failed_folds: int

    @property
    def score(self) -> float:
        return float(np.mean(self.fold_scores))

    @property
    def all_failed(self) -> bool:
        return self.failed_folds == len(self.fold_scores)


def cross_validate(
    tree: PipelineTree,
    ds: Dataset,
    k: int,
    seed: int,
    *,
    registry: Registry | None = None,
    deadline: Deadline | None = None,
) -> CvOutcome:
    """Per-fold held-out accuracies over ``kfold(ds, k, seed)``; a failed fold scores 0.

    Fold ``i`` is fitted with a seed derived from ``(seed, i)``.
    """
    folds = kfold(ds, k, seed)
    scores: list[float] = []
    failed = 0
    for fold in range(k):
        train = folds.train_indices(fold)
        test = folds.test_indices(fold)
        try:
            fp = fit_pipeline(
                tree,
                ds.features[train],
                ds.labels[train],
                derive_seed(seed, "fold", fold),
                registry=registry,
                n_classes=ds.n_classes,
                deadline=deadline,
            )
            scores.append(accuracy(predict_pipeline(fp, ds.features[test]), ds.labels[test]))
        except EvaluationTimeout:
            raise
        except Exception as exc:
            logger.warning("Fold %d of %d failed: %s", fold + 1, k, exc)
            scores.append(0.0)
            failed += 1
    return CvOutcome(tuple(scores), failed)


def cv_score(
    tree: PipelineTree,
    ds: Dataset,
    k: int,
    seed: int,
    *,
    registry: Registry | None = None,
    deadline: Deadline | None = None,
) -> float:
    """Mean held-out accuracy over ``kfold(ds, k, seed)``; a failed fold scores 0."""
    return cross_validate(tree, ds, k, seed, registry=registry, deadline=deadline).score


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------

_HEADER_RE = re.compile(r"^evopipe-export v(\d+)$")
_PARAM_RE = re.compile(r'([A-Za-z_][A-Za-z0-9_]*)=("(?:[^"\\]|\\.)*"|\S+)')
_METADATA_KEYS = ("cv_score", "dataset", "seed")


@dataclass(frozen=True)
class ArtifactMetadata:
    cv_score: float | None = None
    dataset: str | None = None
    seed: int | None = None


def _node_line(path: Path, node: Node) -> str:
    parts = [render_path(path), str(node.kind)]
    if node.inst is not None:
        parts.append(node.inst.spec_name)
        parts.extend(f"{k}={render_value(node.inst.hp[k])}" for k in sorted(node.inst.hp))
    return " ".join(parts)


def canonical_tree_text(tree: PipelineTree) -> str:
    """Node block of the export artifact; equal text means equal trees."""
    return "\n".join(_node_line(path, node) for path, node in iter_paths(tree))


@dataclass
class _Expr:
    text: str
    args: list[_Expr] = field(default_factory=list)
    comment: str | None = None
    call: bool = False

    def lines(self, indent: int, trailing: str) -> list[str]:
        pad = "    " * indent
        if not self.call:
            line = f"{pad}{self.text}{trailing}"
            return [line + f"  # {self.comment}" if self.comment else line]
        out = [f"{pad}{self.text}("]
        for i, arg in enumerate(self.args):
            out.extend(arg.lines(indent + 1, "," if i < len(self.args) - 1 else ""))
        out.append(f"{pad}){trailing}")
        return out


def _operator_call(inst: OperatorInstance) -> str:
    kwargs = ", ".join(f"{k}={render_value(inst.hp[k])}" for k in sorted(inst.hp))
    return f"{inst.spec_name}({kwargs})"


_PASSTHROUGH = _Expr("FunctionTransformer(copy)", comment="Identity (skip)")


def _steps(node: Node) -> list[_Expr]:
    if node.kind is NodeKind.SOURCE:
        return []
    if node.kind is NodeKind.UNION:
        branches = [_chain(_steps(c)) for c in node.children]
        return [_Expr("make_union", branches, call=True)]
    assert node.inst is not None
    steps = _steps(node.children[0])
    if node.inst.spec_name == "Identity":
        steps.append(_PASSTHROUGH)
    elif node.kind is NodeKind.STACK:
        steps.append(_Expr(f"StackingEstimator(estimator={_operator_call(node.inst)})"))
    else:
        steps.append(_Expr(_operator_call(node.inst)))
    return steps


def _chain(steps: list[_Expr]) -> _Expr:
    if not steps:
        return _PASSTHROUGH
    if len(steps) == 1:
        return steps[0]
    return _Expr("make_pipeline", steps, call=True)


def render_script(tree: PipelineTree, cv_score: float | None = None) -> str:
    """Human-readable pseudo-script of the pipeline (documentation only)."""
    lines = []
    if cv_score is not None:
        lines.append(f"# Average CV score on the training set was: {render_float(cv_score)}")
    body = _chain(_steps(tree.root)).lines(0, "")
    body[0] = "exported_pipeline = " + body[0]
    lines.extend(body)
    return "\n".join(lines)


def export_pipeline(
    pipeline: PipelineTree | FittedPipeline,
    cv_score: float | None = None,
    *,
    dataset: str | None = None,
    seed: int | None = None,
) -> str:
    """Canonical text artifact for a tree (or the tree of a fitted pipeline)."""
    tree = pipeline.tree if isinstance(pipeline, FittedPipeline) else pipeline
    meta: dict[str, float | str | int | None] = {
        "cv_score": None if cv_score is None else float(cv_score),
        "dataset": dataset,
        "seed": seed,
    }
    lines = [EXPORT_HEADER, "[metadata]"]
    lines.extend(f"{key} = {render_value(meta[key])}" for key in sorted(meta))
    lines.append("[nodes]")
    lines.append(canonical_tree_text(tree))
    lines.append("[script]")
    lines.append(render_script(tree, cv_score))
    lines.append("[end]")
    return "\n".join(lines) + "\n"


@dataclass
class _NodeLine:
    lineno: int
    path: Path
    kind: NodeKind
    inst: OperatorInstance | None


def _parse_node_line(text: str, lineno: int) -> _NodeLine:
    head = text.split(maxsplit=3)
    if len(head) < 2:
        raise ArtifactParseError("node line needs a path and a kind", line=lineno)
    try:
        path = parse_path(head[0])
    except ValueError as exc:
        raise ArtifactParseError(str(exc), line=lineno) from exc
    try:
        kind = NodeKind(head[1])
    except ValueError as exc:
        column = len(head[0]) + 2
        raise ArtifactParseError(
            f"unknown node kind {head[1]!r}", line=lineno, column=column
        ) from exc
    if len(head) == 2:
        return _NodeLine(lineno, path, kind, None)
    spec_name = head[2]
    rest = head[3] if len(head) == 4 else ""
    hp: dict[str, Any] = {}
    offset = text.index(spec_name, len(head[0]) + len(head[1])) + len(spec_name)
    pos = 0
    while pos < len(rest):
        if rest[pos] == " ":
            pos += 1
            continue
        match = _PARAM_RE.match(rest, pos)
        column = offset + 2 + pos
        if match is None:
            raise ArtifactParseError("expected key=value", line=lineno, column=column)
        key, raw = match.group(1), match.group(2)
        try:
            value = parse_value(raw)
        except ValueError as exc:
            raise ArtifactParseError(f"bad value {raw!r}", line=lineno, column=column) from exc
        if value is None or key in hp:
            raise ArtifactParseError(f"bad parameter {key!r}", line=lineno, column=column)
        hp[key] = value
        pos = match.end()
    return _NodeLine(lineno, path, kind, OperatorInstance(spec_name, hp))


def _build(lines: list[_NodeLine], cursor: int, path: Path, end_line: int) -> tuple[Node, int]:
    if cursor >= len(lines):
        raise ArtifactParseError(f"missing node {render_path(path)}", line=end_line)
    entry = lines[cursor]
    if entry.path != path:
        raise ArtifactParseError(
            f"expected node {render_path(path)}, found {render_path(entry.path)}",
            line=entry.lineno,
        )
    cursor += 1
    children: list[Node] = []
    if entry.kind in _UNARY:
        child, cursor = _build(lines, cursor, path + (0,), end_line)
        children.append(child)
    elif entry.kind is NodeKind.UNION:
        while cursor < len(lines) and lines[cursor].path == path + (len(children),):
            child, cursor = _build(lines, cursor, path + (len(children),), end_line)
            children.append(child)
    return Node(entry.kind, entry.inst, tuple(children)), cursor


def _parse_metadata(entries: list[tuple[int, str]]) -> ArtifactMetadata:
    values: dict[str, Any] = {}
    for lineno, text in entries:
        key, sep, raw = text.partition(" = ")
        if not sep or key not in _METADATA_KEYS or key in values:
            raise ArtifactParseError(f"bad metadata entry {text!r}", line=lineno)
        try:
            values[key] = parse_value(raw)
        except ValueError as exc:
            raise ArtifactParseError(
                f"bad value {raw!r}", line=lineno, column=len(key) + 4
            ) from exc
    cv, dataset, seed = values.get("cv_score"), values.get("dataset"), values.get("seed")
    if cv is not None and isinstance(cv, str):
        raise ArtifactParseError("cv_score must be numeric", line=entries[0][0])
    if dataset is not None and not isinstance(dataset, str):
        raise ArtifactParseError("dataset must be a string", line=entries[0][0])
    if seed is not None and not isinstance(seed, int):
        raise ArtifactParseError("seed must be an integer", line=entries[0][0])
    return ArtifactMetadata(
        cv_score=None if cv is None else float(cv), dataset=dataset, seed=seed
    )


def import_pipeline(
    text: str, registry: Registry | None = None
) -> tuple[PipelineTree, ArtifactMetadata]:
    """Parse an export artifact back into a validated tree and its metadata."""
    raw_lines = text.split("\n")
    if raw_lines and raw_lines[-1] == "":
        raw_lines.pop()
    if not raw_lines:
        raise ArtifactParseError("empty artifact", line=1)
    header = _HEADER_RE.match(raw_lines[0])
    if header is None:
        raise ArtifactParseError(f"expected {EXPORT_HEADER!r}", line=1)
    if header.group(1) != "1":
        raise ArtifactVersionError(f"unsupported export format version {header.group(1)}")

    sections: dict[str, list[tuple[int, str]]] = {}
    order: list[str] = []
    current: str | None = None
    for lineno, line in enumerate(raw_lines[1:], start=2):
        if line in ("[metadata]", "[nodes]", "[script]", "[end]"):
            current = line[1:-1]
            if current in sections:
                raise ArtifactParseError(f"duplicate section {line}", line=lineno)
            sections[current] = []
            order.append(current)
            continue
        if current is None or current == "end":
            raise ArtifactParseError("content outside a section", line=lineno)
        sections[current].append((lineno, line))
    end_line = len(raw_lines) + 1
    if order != ["metadata", "nodes", "script", "end"]:
        raise ArtifactParseError(
            "sections must be [metadata], [nodes], [script], [end]", line=end_line
        )

    metadata = _parse_metadata(sections["metadata"])
    node_lines = [_parse_node_line(t, n) for n, t in sections["nodes"]]
    root, cursor = _build(node_lines, 0, (), end_line)
    if cursor != len(node_lines):
        extra = node_lines[cursor]
        raise ArtifactParseError(
            f"unexpected node {render_path(extra.path)}", line=extra.lineno
        )
    tree = PipelineTree(root)
    violation = validate(tree, registry)
    if violation is not None:
        raise ArtifactValidationError(str(violation))
    return tree, metadata


# ---------------------------------------------------------------------------
# Named topologies
# ---------------------------------------------------------------------------


def make_residual_block_tree(
    lr1: Mapping[str, Any],
    lr2: Mapping[str, Any],
    lr3: Mapping[str, Any],
    lr4: Mapping[str, Any],
) -> PipelineTree:
    """Three stacked logistic layers merged with an identity branch, then a final LR."""
    lr = "LogisticRegressionNN"
    chain = unary(
        NodeKind.STACK,
        lr,
        lr3,
        unary(NodeKind.STACK, lr, lr2, unary(NodeKind.STACK, lr, lr1, SOURCE)),
    )
    skip = unary(NodeKind.TRANSFORMER, "Identity", {}, SOURCE)
    return PipelineTree(unary(NodeKind.CLASSIFIER, lr, lr4, union(chain, skip)))

