"""Tests for the HTTP inspection routes."""

from __future__ import annotations

from fastapi import FastAPI
from fastapi.testclient import TestClient

from evopipe import create_app
from evopipe.harness import ExperimentConfig, ExperimentResult, ReplicateRecord, Summary
from evopipe.operators import NodeKind
from evopipe.pipeline import SOURCE, PipelineTree, export_pipeline, unary
from evopipe.routes import router

app = FastAPI()
app.include_router(router)
client = TestClient(app)


def _artifact() -> str:
    tree = PipelineTree(
        unary(
            NodeKind.CLASSIFIER,
            "GaussianNB",
            {},
            unary(NodeKind.TRANSFORMER, "PCA", {"frac": 0.5}, SOURCE),
        )
    )
    return export_pipeline(tree, 0.875, dataset="toy", seed=4)


def _result_payload() -> dict[str, object]:
    record = ReplicateRecord(
        replicate=0,
        seed=0,
        cv_accuracy=0.9,
        test_accuracy=0.85,
        duration_s=1.25,
        complexity=2,
        train_rows=8,
        test_rows=2,
        pipeline=_artifact(),
        generations=[],
    )
    result = ExperimentResult(
        config_id="toy-TPOT",
        family="TPOT",
        config=ExperimentConfig(dataset="toy"),
        replicates=[record],
        test_accuracy=Summary.of([0.85]),
        duration_s=Summary.of([1.25]),
    )
    return result.model_dump(mode="json")


# ---------------------------------------------------------------------------
# /pipelines/inspect
# ---------------------------------------------------------------------------


class TestInspect:
    """Artifact inspection."""

    def test_valid_artifact(self) -> None:
        resp = client.post("/pipelines/inspect", json={"artifact": _artifact()})
        assert resp.status_code == 200
        data = resp.json()
        assert data["valid"] is True
        assert data["complexity"] == 2
        assert data["depth"] == 2
        assert data["cv_score"] == 0.875
        assert data["dataset"] == "toy"
        assert data["seed"] == 4
        assert "PCA(frac=0.5)" in data["script"]

    def test_invalid_artifact_is_reported(self) -> None:
        text = _artifact().replace("GaussianNB", "Foo", 1)
        resp = client.post("/pipelines/inspect", json={"artifact": text})
        assert resp.status_code == 200
        data = resp.json()
        assert data["valid"] is False
        assert "unknown operator 'Foo'" in data["error"]

    def test_garbage(self) -> None:
        resp = client.post("/pipelines/inspect", json={"artifact": "not an artifact"})
        assert resp.json()["valid"] is False

    def test_missing_body_field(self) -> None:
        resp = client.post("/pipelines/inspect", json={})
        assert resp.status_code == 422


# ---------------------------------------------------------------------------
# /pipelines/render
# ---------------------------------------------------------------------------


class TestRender:
    """Template rendering with default hyperparameters."""

    def test_neural_template(self) -> None:
        resp = client.post("/pipelines/render", json={"template": "Selector-Transformer-MlpNN"})
        assert resp.status_code == 200
        data = resp.json()
        assert data["template"] == "Selector-Transformer-MlpNN"
        assert data["artifact"].startswith("evopipe-export v1\n")
        assert "/ Classifier MlpNN" in data["artifact"]
        assert "/0 Transformer MinMaxScaler" in data["artifact"]
        assert "/0/0 Selector VarianceThreshold threshold=0.0" in data["artifact"]
        assert "MlpNN(" in data["script"]

    def test_stack_slot(self) -> None:
        resp = client.post("/pipelines/render", json={"template": "KNearest-GaussianNB"})
        assert resp.status_code == 200
        assert "StackingEstimator(estimator=KNearest(k=1))" in resp.json()["script"]

    def test_bad_template(self) -> None:
        resp = client.post("/pipelines/render", json={"template": "Selector-Transformer"})
        assert resp.status_code == 422
        assert "not a classifier" in resp.json()["detail"]


# ---------------------------------------------------------------------------
# /reports
# ---------------------------------------------------------------------------


class TestReports:
    """Report rendering over posted results."""

    def test_report(self) -> None:
        resp = client.post("/reports", json={"results": [_result_payload()]})
        assert resp.status_code == 200
        report = resp.json()["report"]
        assert report.startswith("Dataset: toy\n")
        assert "TPOT" in report

    def test_empty_results_rejected(self) -> None:
        resp = client.post("/reports", json={"results": []})
        assert resp.status_code == 422


class TestCreateApp:
    """Application factory."""

    def test_routes_mounted(self) -> None:
        resp = TestClient(create_app()).post(
            "/pipelines/inspect", json={"artifact": _artifact()}
        )
        assert resp.json()["valid"] is True

    def test_router_mounts_under_a_host_prefix(self) -> None:
        host = FastAPI()
        host.include_router(router, prefix="/evopipe")
        resp = TestClient(host).post(
            "/evopipe/pipelines/render", json={"template": "Selector-Transformer-MlpNN"}
        )
        assert resp.status_code == 200
