"""Tests for pipeline trees: validation, fitting, scoring and the export artifact."""

from __future__ import annotations

import numpy as np
import pytest

from evopipe.data import Dataset, make_hill_valley
from evopipe.errors import (
    ArtifactParseError,
    ArtifactValidationError,
    ArtifactVersionError,
    DimensionMismatchError,
    PipelineFitError,
)
from evopipe.evolve import GpConfig, random_tree
from evopipe.operators import (
    NodeKind,
    OperatorInstance,
    OperatorKindClass,
    OperatorSpec,
    default_registry,
    register_custom_learner,
)
from evopipe.pipeline import (
    SOURCE,
    Node,
    PipelineTree,
    canonical_tree_text,
    complexity,
    cross_validate,
    cv_score,
    export_pipeline,
    fit_pipeline,
    import_pipeline,
    iter_paths,
    linear_pipeline,
    make_residual_block_tree,
    node_seed,
    parse_path,
    predict_pipeline,
    predict_proba_pipeline,
    render_path,
    render_script,
    replace_subtree,
    unary,
    union,
    validate,
)

LR = {"batch": "full", "epochs": 50, "l2": 0.0, "lr": 0.1}

GOLDEN = """\
evopipe-export v1
[metadata]
cv_score = 0.75
dataset = "toy"
seed = 3
[nodes]
/ Classifier GaussianNB
/0 Selector SelectKBest k_fraction=0.5
/0/0 Source
[script]
# Average CV score on the training set was: 0.75
exported_pipeline = make_pipeline(
    SelectKBest(k_fraction=0.5),
    GaussianNB()
)
[end]
"""


def _nb(child: Node = SOURCE) -> PipelineTree:
    return PipelineTree(unary(NodeKind.CLASSIFIER, "GaussianNB", {}, child))


def _chain_of(n_transformers: int) -> PipelineTree:
    node = SOURCE
    for _ in range(n_transformers):
        node = unary(NodeKind.TRANSFORMER, "StandardScaler", {}, node)
    return _nb(node)


def _picky_hook(hp, X, y, seed, n_classes):  # type: ignore[no-untyped-def]
    if X.shape[1] != 2:
        raise ValueError("only two columns supported")

    class _Model:
        def predict_proba(self, Z: np.ndarray) -> np.ndarray:
            return np.full((Z.shape[0], n_classes), 1.0 / n_classes)

    return _Model()


def _fails_on_predict_hook(hp, X, y, seed, n_classes):  # type: ignore[no-untyped-def]
    class _Model:
        def predict_proba(self, Z: np.ndarray) -> np.ndarray:
            if Z.shape[0] > 4:
                raise RuntimeError("predict blew up")
            return np.full((Z.shape[0], n_classes), 1.0 / n_classes)

    return _Model()


# ---------------------------------------------------------------------------
# Tree model
# ---------------------------------------------------------------------------


class TestPaths:
    """Node addressing."""

    def test_render_and_parse(self) -> None:
        assert render_path(()) == "/"
        assert render_path((0, 1)) == "/0/1"
        assert parse_path("/0/1") == (0, 1)
        assert parse_path("/") == ()

    def test_bad_path(self) -> None:
        with pytest.raises(ValueError):
            parse_path("0/1")

    def test_preorder(self) -> None:
        tree = _nb(union(SOURCE, unary(NodeKind.TRANSFORMER, "PCA", {"frac": 0.5}, SOURCE)))
        assert [render_path(p) for p, _ in iter_paths(tree)] == [
            "/",
            "/0",
            "/0/0",
            "/0/1",
            "/0/1/0",
        ]

    def test_replace_subtree(self) -> None:
        tree = _nb(unary(NodeKind.TRANSFORMER, "MinMaxScaler", {}, SOURCE))
        new = replace_subtree(tree, (0,), SOURCE)
        assert new == _nb()
        assert tree.node_count == 2

    def test_node_seed_depends_on_path_only(self) -> None:
        assert node_seed(7, (0, 1)) == node_seed(7, "/0/1")
        assert node_seed(7, (0,)) != node_seed(7, (1,))
        assert node_seed(7, ()) != node_seed(8, ())


class TestValidate:
    """Grammar and size bounds."""

    def test_minimal_tree_is_valid(self) -> None:
        tree = _nb()
        assert validate(tree) is None
        assert complexity(tree) == 1

    def test_root_must_be_classifier(self) -> None:
        tree = PipelineTree(unary(NodeKind.TRANSFORMER, "PCA", {"frac": 0.5}, SOURCE))
        violation = validate(tree)
        assert violation is not None
        assert violation.path == "/"

    def test_union_needs_two_branches(self) -> None:
        violation = validate(_nb(union(SOURCE)))
        assert violation is not None
        assert violation.path == "/0"

    def test_inner_classifier_rejected(self) -> None:
        inner = unary(NodeKind.CLASSIFIER, "GaussianNB", {}, SOURCE)
        violation = validate(_nb(inner))
        assert violation is not None
        assert violation.path == "/0"

    def test_wrong_kind_for_operator(self) -> None:
        bad = unary(NodeKind.SELECTOR, "Identity", {}, SOURCE)
        assert validate(_nb(bad)) is not None

    def test_unknown_operator(self) -> None:
        violation = validate(_nb(unary(NodeKind.TRANSFORMER, "Foo", {}, SOURCE)))
        assert violation is not None
        assert "unknown operator 'Foo'" in str(violation)

    def test_out_of_space_hyperparameter(self) -> None:
        tree = _nb(unary(NodeKind.SELECTOR, "SelectKBest", {"k_fraction": 0.3}, SOURCE))
        assert validate(tree) is not None

    def test_depth_bound(self) -> None:
        assert validate(_chain_of(4)) is None
        violation = validate(_chain_of(5))
        assert violation is not None
        assert "depth" in violation.message

    def test_node_bound(self) -> None:
        branch = unary(NodeKind.TRANSFORMER, "MinMaxScaler", {}, SOURCE)
        tree = _nb(union(*([branch] * 9)))
        assert tree.node_count == 11
        violation = validate(tree)
        assert violation is not None
        assert "11 operator nodes" in violation.message

    def test_neural_operator_needs_registry_entry(self) -> None:
        tree = PipelineTree(unary(NodeKind.CLASSIFIER, "LogisticRegressionNN", LR, SOURCE))
        assert validate(tree) is None
        assert validate(tree, default_registry()) is not None


class TestResidualBlock:
    """The named residual topology."""

    def test_shape(self) -> None:
        tree = make_residual_block_tree(LR, LR, LR, LR)
        assert validate(tree) is None
        assert complexity(tree) == 6
        assert tree.max_depth == 5

    def test_fits_and_predicts(self) -> None:
        ds = make_hill_valley(200, 20, noisy=False, seed=0)
        fp = fit_pipeline(make_residual_block_tree(LR, LR, LR, LR), ds.features, ds.labels, 0)
        predicted = predict_pipeline(fp, ds.features)
        assert predicted.shape == (200,)
        assert set(predicted.tolist()) <= {0, 1}

    def test_script(self) -> None:
        script = render_script(make_residual_block_tree(LR, LR, LR, LR))
        assert "make_union" in script
        assert "FunctionTransformer(copy)  # Identity (skip)" in script
        assert script.count("StackingEstimator(") == 3
        assert script.count("LogisticRegressionNN(") == 4


# ---------------------------------------------------------------------------
# Fitting and scoring
# ---------------------------------------------------------------------------


class TestFitPredict:
    """Fitting trees and predicting through them."""

    def test_minimal_pipeline(self, blobs: Dataset) -> None:
        fp = fit_pipeline(_nb(), blobs.features, blobs.labels, 0)
        assert float(np.mean(predict_pipeline(fp, blobs.features) == blobs.labels)) >= 0.95
        proba = predict_proba_pipeline(fp, blobs.features)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)

    def test_linear_pipeline(self, blobs3: Dataset) -> None:
        tree = linear_pipeline(
            [
                (NodeKind.SELECTOR, OperatorInstance("SelectKBest", {"k_fraction": 0.75})),
                (NodeKind.TRANSFORMER, OperatorInstance("StandardScaler")),
                (NodeKind.STACK, OperatorInstance("DecisionTree", {"max_depth": 4})),
                (NodeKind.CLASSIFIER, OperatorInstance("KNearest", {"k": 3})),
            ]
        )
        assert validate(tree) is None
        fp = fit_pipeline(tree, blobs3.features, blobs3.labels, 0)
        assert predict_pipeline(fp, blobs3.features).shape == (blobs3.n_rows,)

    def test_width_mismatch(self, blobs: Dataset) -> None:
        fp = fit_pipeline(_nb(), blobs.features, blobs.labels, 0)
        with pytest.raises(DimensionMismatchError):
            predict_pipeline(fp, blobs.features[:, :2])

    def test_invalid_tree_rejected(self, blobs: Dataset) -> None:
        with pytest.raises(PipelineFitError):
            fit_pipeline(_nb(union(SOURCE)), blobs.features, blobs.labels, 0)

    def test_failure_carries_node_path(self, blobs: Dataset) -> None:
        spec = OperatorSpec("Picky", OperatorKindClass.CLASSIFIER)
        registry = register_custom_learner(default_registry(), spec, _picky_hook)
        tree = _nb(unary(NodeKind.STACK, "Picky", {}, SOURCE))
        with pytest.raises(PipelineFitError) as info:
            fit_pipeline(tree, blobs.features, blobs.labels, 0, registry=registry)
        assert info.value.path == "/0"

    @pytest.mark.parametrize(
        "wrapper",
        [
            ("Transformer", "Identity", {}),
            ("Selector", "SelectKBest", {"k_fraction": 1.0}),
        ],
    )
    def test_passthrough_insertion_keeps_predictions(
        self, wrapper: tuple[str, str, dict[str, float]], blobs3: Dataset
    ) -> None:
        kind, name, hp = wrapper
        plain = _nb()
        wrapped = _nb(unary(NodeKind(kind), name, hp, SOURCE))
        a = fit_pipeline(plain, blobs3.features, blobs3.labels, 1)
        b = fit_pipeline(wrapped, blobs3.features, blobs3.labels, 1)
        assert np.array_equal(
            predict_pipeline(a, blobs3.features), predict_pipeline(b, blobs3.features)
        )

    def test_union_branch_order_does_not_change_knn(self, blobs3: Dataset) -> None:
        left = unary(NodeKind.TRANSFORMER, "StandardScaler", {}, SOURCE)
        right = unary(NodeKind.TRANSFORMER, "MinMaxScaler", {}, SOURCE)
        knn = {"k": 3}
        ab = PipelineTree(unary(NodeKind.CLASSIFIER, "KNearest", knn, union(left, right)))
        ba = PipelineTree(unary(NodeKind.CLASSIFIER, "KNearest", knn, union(right, left)))
        pa = predict_pipeline(fit_pipeline(ab, blobs3.features, blobs3.labels, 0), blobs3.features)
        pb = predict_pipeline(fit_pipeline(ba, blobs3.features, blobs3.labels, 0), blobs3.features)
        assert np.array_equal(pa, pb)

    def test_deterministic(self, hill_valley_small: Dataset) -> None:
        tree = make_residual_block_tree(LR, LR, LR, LR)
        ds = hill_valley_small
        a = predict_proba_pipeline(fit_pipeline(tree, ds.features, ds.labels, 5), ds.features)
        b = predict_proba_pipeline(fit_pipeline(tree, ds.features, ds.labels, 5), ds.features)
        assert np.array_equal(a, b)


class TestCvScore:
    """Cross-validated accuracy."""

    def test_perfect_memoriser(self) -> None:
        X = np.repeat([[0.0], [1.0]], 20, axis=0)
        y = np.repeat([0, 1], 20)
        ds = Dataset(X, y, ("x",), 2, "dup")
        tree = PipelineTree(unary(NodeKind.CLASSIFIER, "DecisionTree", {"max_depth": 2}, SOURCE))
        assert cv_score(tree, ds, 5, 0) == 1.0

    def test_constant_predictor_scores_majority_share(self) -> None:
        y = np.array([0] * 60 + [1] * 40)
        ds = Dataset(np.zeros((100, 2)), y, ("a", "b"), 2, "flat")
        assert cv_score(_nb(), ds, 5, 0) == pytest.approx(0.6)

    def test_failed_folds_score_zero(self, blobs: Dataset) -> None:
        spec = OperatorSpec("Picky", OperatorKindClass.CLASSIFIER)
        registry = register_custom_learner(default_registry(), spec, _picky_hook)
        tree = PipelineTree(unary(NodeKind.CLASSIFIER, "Picky", {}, SOURCE))
        outcome = cross_validate(tree, blobs, 3, 0, registry=registry)
        assert outcome.all_failed
        assert outcome.score == 0.0

    def test_predict_time_failures_score_zero(self, blobs: Dataset) -> None:
        spec = OperatorSpec("FailsLate", OperatorKindClass.CLASSIFIER)
        registry = register_custom_learner(default_registry(), spec, _fails_on_predict_hook)
        tree = PipelineTree(unary(NodeKind.CLASSIFIER, "FailsLate", {}, SOURCE))
        outcome = cross_validate(tree, blobs, 3, 0, registry=registry)
        assert outcome.fold_scores == (0.0, 0.0, 0.0)
        assert outcome.failed_folds == 3

    def test_deterministic(self, blobs3: Dataset) -> None:
        tree = _nb(unary(NodeKind.TRANSFORMER, "PCA", {"frac": 0.5}, SOURCE))
        assert cv_score(tree, blobs3, 4, 2) == cv_score(tree, blobs3, 4, 2)


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------


class TestExport:
    """Canonical artifact text."""

    def test_golden(self) -> None:
        tree = _nb(unary(NodeKind.SELECTOR, "SelectKBest", {"k_fraction": 0.5}, SOURCE))
        assert export_pipeline(tree, 0.75, dataset="toy", seed=3) == GOLDEN

    def test_missing_metadata_is_none(self) -> None:
        text = export_pipeline(_nb())
        assert "cv_score = none" in text
        assert "# Average CV score" not in text

    def test_fitted_pipeline_exports_its_tree(self, blobs: Dataset) -> None:
        fp = fit_pipeline(_nb(), blobs.features, blobs.labels, 0)
        assert export_pipeline(fp) == export_pipeline(_nb())

    def test_single_step_script(self) -> None:
        assert render_script(_nb()) == "exported_pipeline = GaussianNB()"

    def test_float_precision(self) -> None:
        tree = PipelineTree(
            unary(NodeKind.CLASSIFIER, "LogisticRegressionNN", {**LR, "lr": 0.1}, SOURCE)
        )
        assert "lr=0.10000000000000001" in canonical_tree_text(tree)


class TestImport:
    """Parsing artifacts back into trees."""

    def test_golden_round_trip(self) -> None:
        tree, meta = import_pipeline(GOLDEN)
        assert meta.cv_score == 0.75
        assert meta.dataset == "toy"
        assert meta.seed == 3
        assert export_pipeline(tree, meta.cv_score, dataset="toy", seed=3) == GOLDEN

    def test_cv_score_keeps_every_digit(self) -> None:
        text = export_pipeline(_nb(), 0.9406477266781772)
        assert "cv_score = 0.94064772667817718" in text
        tree, meta = import_pipeline(text)
        assert meta.cv_score == 0.9406477266781772
        assert export_pipeline(tree, meta.cv_score) == text
        _, short = import_pipeline(text.replace("0.94064772667817718", "0.9406477266781772"))
        assert short.cv_score == 0.9406477266781772

    def test_residual_round_trip(self) -> None:
        tree = make_residual_block_tree(LR, {**LR, "batch": 16}, LR, LR)
        imported, _ = import_pipeline(export_pipeline(tree, 0.5))
        assert imported == tree

    @pytest.mark.parametrize("seed", range(100))
    def test_random_tree_round_trip(self, seed: int) -> None:
        cfg = GpConfig(registry=default_registry(nn_enabled=True))
        tree = random_tree(cfg, np.random.default_rng(seed))
        text = export_pipeline(tree, 0.123456789)
        imported, meta = import_pipeline(text)
        assert imported == tree
        assert meta.cv_score == 0.123456789
        assert export_pipeline(imported, meta.cv_score) == text

    def test_wrong_header(self) -> None:
        with pytest.raises(ArtifactParseError) as info:
            import_pipeline("hello\n")
        assert info.value.line == 1

    def test_version_mismatch(self) -> None:
        with pytest.raises(ArtifactVersionError):
            import_pipeline(GOLDEN.replace("evopipe-export v1", "evopipe-export v2"))

    def test_truncated(self) -> None:
        text = GOLDEN.replace("[end]\n", "")
        with pytest.raises(ArtifactParseError) as info:
            import_pipeline(text)
        assert info.value.line == len(text.splitlines()) + 1

    def test_missing_node(self) -> None:
        text = GOLDEN.replace("/0/0 Source\n", "")
        with pytest.raises(ArtifactParseError) as info:
            import_pipeline(text)
        assert "/0/0" in str(info.value)

    def test_bad_parameter(self) -> None:
        text = GOLDEN.replace("k_fraction=0.5", "k_fraction")
        with pytest.raises(ArtifactParseError) as info:
            import_pipeline(text)
        assert info.value.line == 8

    def test_unknown_operator(self) -> None:
        text = GOLDEN.replace("Classifier GaussianNB", "Classifier Foo")
        with pytest.raises(ArtifactValidationError, match="unknown operator 'Foo'"):
            import_pipeline(text)

    def test_script_block_is_ignored(self) -> None:
        text = GOLDEN.replace("GaussianNB()\n", "Anything()\n")
        tree, _ = import_pipeline(text)
        assert tree.root.inst is not None
        assert tree.root.inst.spec_name == "GaussianNB"
