"""Tests for experiment configs, replicate runs, result files, grids and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path
from unittest.mock import patch

import pytest
from pydantic import ValidationError

from evopipe import harness
from evopipe.errors import ConfigError, FetchError, ResultFileError
from evopipe.harness import (
    ExperimentConfig,
    ExperimentResult,
    ReplicateRecord,
    Summary,
    default_grid,
    family_of,
    flat_table,
    full_grid,
    load_grid,
    load_result,
    report_summary,
    result_text,
    run_experiment,
    run_grid,
    strip_durations,
    summarize,
    write_results,
)
from evopipe.metadata import FLAT_TABLE_HEADER, RESULT_FORMAT
from evopipe.pipeline import import_pipeline


def _tiny(**kwargs: object) -> ExperimentConfig:
    base: dict[str, object] = {
        "dataset": "hill-valley-noisy",
        "synthetic_rows": 60,
        "synthetic_length": 10,
        "population_size": 4,
        "generations": 1,
        "cv_folds": 2,
        "replicates": 2,
    }
    base.update(kwargs)
    return ExperimentConfig(**base)  # type: ignore[arg-type]


def _result(
    family: str, accuracies: list[float], durations: list[float], dataset: str = "d"
) -> ExperimentResult:
    cfg = ExperimentConfig(dataset=dataset)
    records = [
        ReplicateRecord(
            replicate=i,
            seed=i,
            cv_accuracy=acc,
            test_accuracy=acc,
            duration_s=dur,
            complexity=1,
            train_rows=8,
            test_rows=2,
            pipeline="",
            generations=[],
        )
        for i, (acc, dur) in enumerate(zip(accuracies, durations, strict=True))
    ]
    return ExperimentResult(
        config_id=f"{dataset}-{family}",
        family=family,
        config=cfg,
        replicates=records,
        test_accuracy=Summary.of(accuracies),
        duration_s=Summary.of(durations),
    )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class TestExperimentConfig:
    """Validation and derived values."""

    def test_filter_requires_nn(self) -> None:
        with pytest.raises(ValidationError):
            ExperimentConfig(dataset="d", estimator_filter="lr")

    def test_template_and_single_are_exclusive(self) -> None:
        with pytest.raises(ValidationError):
            ExperimentConfig(dataset="d", template="Classifier", single_estimator_mode=True)

    def test_unknown_field_rejected(self) -> None:
        with pytest.raises(ValidationError):
            ExperimentConfig(dataset="d", colour="blue")  # type: ignore[call-arg]

    def test_config_id_is_stable_and_ignores_cache_dir(self) -> None:
        a = ExperimentConfig(dataset="my data", cache_dir="/a")
        b = ExperimentConfig(dataset="my data", cache_dir="/b")
        assert a.config_id == b.config_id
        assert a.config_id.startswith("my_data-TPOT-")
        assert a.config_id != ExperimentConfig(dataset="my data", seed=1).config_id

    def test_unknown_classifier(self) -> None:
        with pytest.raises(ConfigError):
            ExperimentConfig(dataset="d", classifier="Nope").build_registry()

    def test_bad_template(self) -> None:
        cfg = ExperimentConfig(dataset="d", template="Selector-Transformer")
        with pytest.raises(ConfigError):
            cfg.gp_config(0)

    def test_gp_config(self) -> None:
        cfg = ExperimentConfig(dataset="d", nn_enabled=True, template="Selector-MlpNN")
        gp = cfg.gp_config(7, workers=2)
        assert gp.seed == 7
        assert gp.workers == 2
        assert gp.template is not None
        assert gp.template.tokens == ("Selector", "MlpNN")


class TestFamilyOf:
    """Family labels."""

    @pytest.mark.parametrize(
        ("kwargs", "family"),
        [
            ({}, "TPOT"),
            ({"nn_enabled": True}, "TPOT-NN"),
            ({"nn_enabled": True, "template": "Selector-Transformer-MlpNN"}, "TPOT-NN"),
            ({"single_estimator_mode": True}, "Shallow"),
            ({"single_estimator_mode": True, "classifier": "GaussianNB"}, "Shallow"),
            (
                {"single_estimator_mode": True, "nn_enabled": True, "estimator_filter": "mlp"},
                "NN",
            ),
        ],
    )
    def test_labels(self, kwargs: dict[str, object], family: str) -> None:
        cfg = ExperimentConfig(dataset="d", **kwargs)  # type: ignore[arg-type]
        assert family_of(cfg) == family


# ---------------------------------------------------------------------------
# Running and persistence
# ---------------------------------------------------------------------------


class TestRunExperiment:
    """Replicated runs on a tiny synthetic dataset."""

    def test_replicates(self) -> None:
        result = run_experiment(_tiny())
        assert result.format_version == RESULT_FORMAT
        assert [r.seed for r in result.replicates] == [0, 1]
        for rec in result.replicates:
            assert 0.0 <= rec.test_accuracy <= 1.0
            assert rec.duration_s > 0.0
            assert rec.train_rows == 48
            assert rec.test_rows == 12
            assert len(rec.generations) == 2
            tree, meta = import_pipeline(rec.pipeline)
            assert tree.node_count == rec.complexity
            assert meta.seed == rec.seed
            assert meta.dataset == "hill-valley-noisy"

    def test_deterministic_apart_from_durations(self) -> None:
        a = run_experiment(_tiny(replicates=1))
        b = run_experiment(_tiny(replicates=1))
        assert strip_durations(a) == strip_durations(b)

    def test_single_lr_only(self) -> None:
        cfg = _tiny(
            nn_enabled=True, estimator_filter="lr", single_estimator_mode=True, replicates=1
        )
        result = run_experiment(cfg)
        assert result.family == "NN"
        rec = result.replicates[0]
        assert rec.complexity == 1
        assert "/ Classifier LogisticRegressionNN" in rec.pipeline

    def test_bad_flags_fail_before_loading_data(self) -> None:
        cfg = ExperimentConfig(dataset="never-fetched", template="Foo-Classifier")
        with patch("evopipe.harness.resolve_dataset") as mock_resolve, pytest.raises(ConfigError):
            run_experiment(cfg)
        mock_resolve.assert_not_called()


class TestResultFiles:
    """JSON result file and flat CSV table."""

    def test_round_trip_is_byte_identical(self, tmp_path: Path) -> None:
        result = _result("TPOT", [0.9, 0.8], [1.5, 2.25])
        json_path, _ = write_results(result, tmp_path)
        loaded = load_result(json_path)
        assert loaded == result
        assert result_text(loaded) == json_path.read_text(encoding="utf-8")

    def test_flat_table(self) -> None:
        result = _result("NN", [0.9, 0.8], [1.5, 2.25])
        rows = list(csv.reader(io.StringIO(flat_table(result))))
        assert tuple(rows[0]) == FLAT_TABLE_HEADER
        assert rows[1] == ["d", "NN", "0", "0", "0.9", "0.9", "1.5", "1"]
        assert len(rows) == 3

    def test_missing_directory(self, tmp_path: Path) -> None:
        with pytest.raises(ResultFileError) as info:
            write_results(_result("TPOT", [0.5], [1.0]), tmp_path / "nope")
        assert info.value.path == str(tmp_path / "nope")

    def test_malformed_file(self, tmp_path: Path) -> None:
        path = tmp_path / "bad.json"
        path.write_text("{}", encoding="utf-8")
        with pytest.raises(ResultFileError):
            load_result(path)

    def test_wrong_format_version(self, tmp_path: Path) -> None:
        result = _result("TPOT", [0.5], [1.0]).model_copy(update={"format_version": "other v9"})
        path = tmp_path / "r.json"
        path.write_text(result_text(result), encoding="utf-8")
        with pytest.raises(ResultFileError):
            load_result(path)

    def test_strip_durations(self) -> None:
        a = _result("TPOT", [0.5], [1.0])
        b = _result("TPOT", [0.5], [9.0])
        assert strip_durations(a) == strip_durations(b)
        assert "duration_s" not in strip_durations(a)["replicates"][0]


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


class TestGrid:
    """Resumable grids."""

    def test_runs_then_skips(self, tmp_path: Path, caplog: pytest.LogCaptureFixture) -> None:
        cfg = _tiny(replicates=1)
        first = run_grid([cfg], tmp_path)
        assert len(first) == 1
        assert (tmp_path / f"{cfg.config_id}.json").exists()
        assert (tmp_path / f"{cfg.config_id}.csv").exists()

        with (
            patch("evopipe.harness.run_experiment", side_effect=AssertionError("rerun")),
            caplog.at_level(logging.INFO, logger="evopipe"),
        ):
            second = run_grid([cfg], tmp_path)
        assert second == first
        assert f"{cfg.config_id} skipped (exists)" in caplog.text
        manifest = json.loads((tmp_path / "grid.json").read_text(encoding="utf-8"))
        assert manifest["experiments"][0]["status"] == "skipped"

    def test_failure_is_recorded(self, tmp_path: Path) -> None:
        good = _tiny(replicates=1)
        bad = ExperimentConfig(dataset="no-such-dataset", cache_dir=str(tmp_path / "cache"))
        with patch("evopipe.data._download_pmlb", side_effect=FetchError("offline")):
            results = run_grid([bad, good], tmp_path / "out")
        assert len(results) == 1
        manifest = json.loads((tmp_path / "out" / "grid.json").read_text(encoding="utf-8"))
        statuses = [e["status"] for e in manifest["experiments"]]
        assert statuses == ["failed", "done"]
        assert "offline" in manifest["experiments"][0]["error"]

    def test_unexpected_error_is_recorded(
        self, tmp_path: Path, caplog: pytest.LogCaptureFixture
    ) -> None:
        good, bad = _tiny(replicates=1), _tiny(replicates=1, seed=5)
        real = harness.run_experiment

        def flaky(cfg: ExperimentConfig) -> ExperimentResult:
            if cfg.config_id == bad.config_id:
                raise RuntimeError("boom")
            return real(cfg)

        with (
            patch("evopipe.harness.run_experiment", side_effect=flaky),
            caplog.at_level(logging.ERROR, logger="evopipe"),
        ):
            results = run_grid([bad, good], tmp_path)
        assert [r.config.config_id for r in results] == [good.config_id]
        manifest = json.loads((tmp_path / "grid.json").read_text(encoding="utf-8"))
        entries = manifest["experiments"]
        assert [e["status"] for e in entries] == ["failed", "done"]
        assert entries[0]["error"] == "RuntimeError: boom"
        assert f"Experiment {bad.config_id} failed unexpectedly" in caplog.text

    def test_worker_count_does_not_change_results(self, tmp_path: Path) -> None:
        grid = [_tiny(replicates=1), _tiny(replicates=1, seed=3)]
        serial = run_grid(grid, tmp_path / "serial", workers=1)
        parallel = run_grid(grid, tmp_path / "parallel", workers=2)
        assert [strip_durations(r) for r in serial] == [strip_durations(r) for r in parallel]

    def test_duplicates_rejected(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError):
            run_grid([_tiny(), _tiny()], tmp_path)

    def test_empty_grid(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError):
            run_grid([], tmp_path)

    def test_load_grid(self, tmp_path: Path) -> None:
        path = tmp_path / "grid.json"
        path.write_text(json.dumps([{"dataset": "a"}, {"dataset": "b", "nn_enabled": True}]))
        grid = load_grid(path)
        assert [family_of(c) for c in grid] == ["TPOT", "TPOT-NN"]

    def test_load_grid_invalid(self, tmp_path: Path) -> None:
        path = tmp_path / "grid.json"
        path.write_text(json.dumps([{"dataset": "a", "estimator_filter": "lr"}]))
        with pytest.raises(ConfigError):
            load_grid(path)

    def test_default_grid(self) -> None:
        grid = default_grid()
        assert len(grid) == 8
        assert {family_of(c) for c in grid} == {"Shallow", "TPOT", "NN", "TPOT-NN"}
        assert len({c.config_id for c in grid}) == 8

    def test_full_grid(self) -> None:
        grid = full_grid(["a", "b"], replicates=1)
        assert len(grid) == 24
        assert len({c.config_id for c in grid}) == 24


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


class TestSummarize:
    """Report tables and comparisons."""

    def test_tables(self) -> None:
        report = summarize(
            [
                _result("TPOT", [0.9, 0.8], [10.0, 10.0]),
                _result("NN", [0.8, 0.9], [15.0, 15.0]),
                _result("TPOT-NN", [0.9, 0.8], [20.0, 20.0]),
            ]
        )
        lines = report.splitlines()
        assert lines[0] == "Dataset: d"
        assert lines[1] == "Test accuracy"
        assert lines[2].split() == ["family", "mean", "min", "max", "std"]
        assert lines[3].split() == ["TPOT", "0.8500", "0.8000", "0.9000", "0.0500"]
        assert "Training duration (s)" in lines
        assert "Accuracy std ratio NN / TPOT-NN: 1.000" in lines
        assert "Mean duration vs TPOT: NN +50.0%, TPOT-NN +100.0%" in lines

    def test_zero_variance_ratio_is_one(self) -> None:
        report = summarize([_result("NN", [0.7], [1.0]), _result("TPOT-NN", [0.7], [1.0])])
        assert "Accuracy std ratio NN / TPOT-NN: 1.000" in report

    def test_datasets_are_separate(self) -> None:
        results = [_result("TPOT", [0.5], [1.0], "b"), _result("TPOT", [0.5], [1.0], "a")]
        report = summarize(results)
        assert report.index("Dataset: a") < report.index("Dataset: b")

    def test_nothing_to_report(self) -> None:
        with pytest.raises(ConfigError):
            summarize([])

    def test_report_from_files(self, tmp_path: Path) -> None:
        json_path, _ = write_results(_result("Shallow", [0.6, 0.7], [1.0, 2.0]), tmp_path)
        report = report_summary([json_path])
        assert "Shallow" in report
