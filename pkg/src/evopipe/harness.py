"""Experiment runner: configurations, replicates, result files and reports.

A result file is the JSON dump of :class:`ExperimentResult` (field order
fixed by the model, floats in shortest round-trip form), so loading and
re-serialising it is byte-identical. Next to it sits a flat per-replicate
CSV table for cross-experiment analysis.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import math
import os
import re
import tempfile
import time
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, model_validator

from evopipe._log import logger
from evopipe.data import (
    PMLB_CATALOG,
    Dataset,
    accuracy,
    resolve_dataset,
    train_test_split,
)
from evopipe.errors import ConfigError, EvopipeError, PipelineFitError, ResultFileError
from evopipe.evolve import GenerationRecord, GpConfig, ProgressSink, run_evolution
from evopipe.learners import NEURAL_KINDS
from evopipe.metadata import (
    BUNDLED_BREAST_CANCER,
    FAMILIES,
    FAMILY_NN,
    FAMILY_SHALLOW,
    FAMILY_TPOT,
    FAMILY_TPOT_NN,
    FLAT_TABLE_HEADER,
    GRID_MANIFEST_FORMAT,
    HILL_VALLEY_NOISY,
    RESULT_FORMAT,
)
from evopipe.operators import (
    EstimatorFilter,
    Registry,
    TemplateConstraint,
    default_registry,
    parse_template,
    restrict_classifiers,
)
from evopipe.pipeline import export_pipeline, fit_pipeline, predict_pipeline

DEFAULT_TEMPLATE = "Selector-Transformer-Classifier"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class ExperimentConfig(BaseModel):
    """One experiment: a dataset, a search configuration and a replicate count."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    dataset: str = Field(min_length=1)
    data_path: str | None = None
    nn_enabled: bool = False
    template: str | None = None
    estimator_filter: EstimatorFilter = EstimatorFilter.ALL
    single_estimator_mode: bool = False
    classifier: str | None = None
    generations: int = Field(default=5, ge=0)
    population_size: int = Field(default=20, ge=2)
    cv_folds: int = Field(default=5, ge=2)
    train_fraction: float = Field(default=0.8, gt=0.0, lt=1.0)
    seed: int = Field(default=0, ge=0)
    replicates: int = Field(default=1, ge=1)
    eval_timeout_s: float = Field(default=60.0, gt=0.0)
    synthetic_rows: int = Field(default=400, ge=2)
    synthetic_length: int = Field(default=50, ge=8)
    cache_dir: str = ".evopipe-cache"

    @model_validator(mode="after")
    def _check_consistency(self) -> ExperimentConfig:
        if self.estimator_filter is not EstimatorFilter.ALL and not self.nn_enabled:
            raise ValueError(
                f"estimator filter {self.estimator_filter.value!r} requires nn_enabled"
            )
        if self.template is not None and self.single_estimator_mode:
            raise ValueError("template and single_estimator_mode are mutually exclusive")
        return self

    @property
    def config_id(self) -> str:
        payload = self.model_dump_json(exclude={"cache_dir"}).encode()
        digest = hashlib.blake2b(payload, digest_size=6).hexdigest()
        stem = re.sub(r"[^A-Za-z0-9_.-]", "_", self.dataset)
        return f"{stem}-{family_of(self)}-{digest}"

    def build_registry(self) -> Registry:
        try:
            registry = default_registry(self.nn_enabled, self.estimator_filter)
            if self.classifier is not None:
                registry = restrict_classifiers(registry, [self.classifier])
        except EvopipeError as exc:
            raise ConfigError(str(exc)) from exc
        return registry

    def build_template(self, registry: Registry) -> TemplateConstraint | None:
        if self.template is None:
            return None
        try:
            return parse_template(self.template, registry)
        except EvopipeError as exc:
            raise ConfigError(str(exc)) from exc

    def gp_config(self, seed: int, *, workers: int = 1) -> GpConfig:
        registry = self.build_registry()
        return GpConfig(
            registry=registry,
            population_size=self.population_size,
            generations=self.generations,
            cv_folds=self.cv_folds,
            eval_timeout_s=self.eval_timeout_s,
            seed=seed,
            template=self.build_template(registry),
            single_estimator_mode=self.single_estimator_mode,
            workers=workers,
        )


_GRID_ADAPTER = TypeAdapter(list[ExperimentConfig])


def family_of(cfg: ExperimentConfig) -> str:
    """Configuration family label derived from the search flags."""
    if cfg.single_estimator_mode:
        if cfg.classifier is not None:
            neural = cfg.classifier in {str(k) for k in NEURAL_KINDS}
        else:
            neural = cfg.nn_enabled
        return FAMILY_NN if neural else FAMILY_SHALLOW
    return FAMILY_TPOT_NN if cfg.nn_enabled else FAMILY_TPOT


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


class GenerationLog(BaseModel):
    generation: int
    best_accuracy: float
    mean_accuracy: float
    front_size: int
    best_complexity: int
    evaluations: int
    cache_hits: int
    elapsed_s: float

    @classmethod
    def from_record(cls, record: GenerationRecord) -> GenerationLog:
        return cls(**dataclasses.asdict(record))


class ReplicateRecord(BaseModel):
    replicate: int
    seed: int
    cv_accuracy: float
    test_accuracy: float
    duration_s: float
    complexity: int
    train_rows: int
    test_rows: int
    pipeline: str = Field(description="Export artifact of the best pipeline")
    generations: list[GenerationLog]


class Summary(BaseModel):
    mean: float
    min: float
    max: float
    std: float

    @classmethod
    def of(cls, values: Sequence[float]) -> Summary:
        arr = np.asarray(values, dtype=np.float64)
        return cls(
            mean=float(arr.mean()),
            min=float(arr.min()),
            max=float(arr.max()),
            std=float(arr.std()),
        )


class ExperimentResult(BaseModel):
    format_version: str = RESULT_FORMAT
    config_id: str
    family: str
    config: ExperimentConfig
    replicates: list[ReplicateRecord]
    test_accuracy: Summary
    duration_s: Summary


class ManifestEntry(BaseModel):
    config_id: str
    status: Literal["done", "skipped", "failed"]
    result_file: str | None = None
    error: str | None = None


class GridManifest(BaseModel):
    format_version: str = GRID_MANIFEST_FORMAT
    experiments: list[ManifestEntry]


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    return resolve_dataset(
        cfg.dataset,
        data_path=cfg.data_path,
        cache_dir=cfg.cache_dir,
        synthetic_rows=cfg.synthetic_rows,
        synthetic_length=cfg.synthetic_length,
        seed=cfg.seed,
    )


def run_experiment(
    cfg: ExperimentConfig,
    *,
    workers: int = 1,
    progress_sink: ProgressSink | None = None,
) -> ExperimentResult:
    """Run every replicate: split with ``seed + r``, evolve, score the best once on test."""
    # inconsistent flags fail here, before the dataset is touched
    cfg.gp_config(cfg.seed, workers=workers)
    ds = load_dataset(cfg)
    family = family_of(cfg)
    logger.info(
        "Experiment %s: %s on %s (%d x %d), %d replicate(s)",
        cfg.config_id,
        family,
        ds.name,
        ds.n_rows,
        ds.n_features,
        cfg.replicates,
    )

    records: list[ReplicateRecord] = []
    for r in range(cfg.replicates):
        seed = cfg.seed + r
        gp = cfg.gp_config(seed, workers=workers)
        train, test = train_test_split(ds, cfg.train_fraction, seed)
        started = time.perf_counter()
        evolution = run_evolution(gp, train, progress_sink)
        best = evolution.best
        fitness = best.evaluated
        try:
            fitted = fit_pipeline(
                best.tree,
                train.features,
                train.labels,
                seed,
                registry=gp.registry,
                n_classes=ds.n_classes,
            )
        except PipelineFitError as exc:
            logger.warning("Replicate %d: best pipeline failed to refit: %s", r, exc)
            fitted = None
        duration = time.perf_counter() - started
        test_acc = 0.0
        if fitted is not None:
            test_acc = accuracy(predict_pipeline(fitted, test.features), test.labels)
        logger.info(
            "Replicate %d (seed %d): cv %.4f, test %.4f, complexity %d, %.2f s",
            r,
            seed,
            fitness.cv_accuracy,
            test_acc,
            fitness.complexity,
            duration,
        )
        records.append(
            ReplicateRecord(
                replicate=r,
                seed=seed,
                cv_accuracy=fitness.cv_accuracy,
                test_accuracy=test_acc,
                duration_s=duration,
                complexity=fitness.complexity,
                train_rows=train.n_rows,
                test_rows=test.n_rows,
                pipeline=export_pipeline(
                    best.tree, fitness.cv_accuracy, dataset=ds.name, seed=seed
                ),
                generations=[GenerationLog.from_record(g) for g in evolution.log],
            )
        )

    return ExperimentResult(
        config_id=cfg.config_id,
        family=family,
        config=cfg,
        replicates=records,
        test_accuracy=Summary.of([rec.test_accuracy for rec in records]),
        duration_s=Summary.of([rec.duration_s for rec in records]),
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _write_text_atomic(path: Path, text: str) -> None:
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise ResultFileError(str(exc), path=str(path)) from exc


def result_text(result: ExperimentResult) -> str:
    return result.model_dump_json(indent=2) + "\n"


def flat_table(result: ExperimentResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FLAT_TABLE_HEADER)
    for rec in result.replicates:
        writer.writerow(
            [
                result.config.dataset,
                result.family,
                rec.replicate,
                rec.seed,
                repr(rec.cv_accuracy),
                repr(rec.test_accuracy),
                repr(rec.duration_s),
                rec.complexity,
            ]
        )
    return buf.getvalue()


def write_results(result: ExperimentResult, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``<config_id>.json`` and ``<config_id>.csv`` atomically."""
    out = Path(out_dir)
    if not out.is_dir():
        raise ResultFileError("output directory does not exist", path=str(out))
    json_path = out / f"{result.config_id}.json"
    csv_path = out / f"{result.config_id}.csv"
    _write_text_atomic(json_path, result_text(result))
    _write_text_atomic(csv_path, flat_table(result))
    logger.info("Wrote %s", json_path)
    return json_path, csv_path


def load_result(path: str | Path) -> ExperimentResult:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ResultFileError(str(exc), path=str(p)) from exc
    try:
        result = ExperimentResult.model_validate_json(text)
    except ValidationError as exc:
        raise ResultFileError(f"malformed result file: {exc}", path=str(p)) from exc
    if result.format_version != RESULT_FORMAT:
        raise ResultFileError(f"unsupported format {result.format_version!r}", path=str(p))
    return result


def strip_durations(result: ExperimentResult) -> dict[str, Any]:
    """Result payload without wall-clock fields, for determinism comparisons."""
    payload = result.model_dump(mode="json")
    payload.pop("duration_s")
    for rec in payload["replicates"]:
        rec.pop("duration_s")
        for gen in rec["generations"]:
            gen.pop("elapsed_s")
    return payload


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


def load_grid(path: str | Path) -> list[ExperimentConfig]:
    """Read a JSON array of experiment configurations."""
    p = Path(path)
    try:
        raw = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    try:
        return _GRID_ADAPTER.validate_json(raw)
    except ValidationError as exc:
        raise ConfigError(f"{p}: invalid grid: {exc}") from exc


def run_grid(
    grid: Sequence[ExperimentConfig], out_dir: str | Path, workers: int = 1
) -> list[ExperimentResult]:
    """Run every configuration, skipping those whose result file already exists.

    Each result is written as soon as it completes; a failed experiment is
    recorded in the manifest and does not stop the others.
    """
    if not grid:
        raise ConfigError("empty grid")
    ids = [cfg.config_id for cfg in grid]
    if len(set(ids)) != len(ids):
        raise ConfigError("grid contains duplicate configurations")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ResultFileError(str(exc), path=str(out)) from exc

    def job(cfg: ExperimentConfig) -> tuple[ExperimentResult, ManifestEntry]:
        path = out / f"{cfg.config_id}.json"
        if path.exists():
            logger.info("%s skipped (exists)", cfg.config_id)
            entry = ManifestEntry(config_id=cfg.config_id, status="skipped", result_file=path.name)
            return load_result(path), entry
        result = run_experiment(cfg)
        write_results(result, out)
        return result, ManifestEntry(config_id=cfg.config_id, status="done", result_file=path.name)

    results: list[ExperimentResult] = []
    entries: list[ManifestEntry] = []
    try:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            futures = [pool.submit(job, cfg) for cfg in grid]
            for cfg, future in zip(grid, futures, strict=True):
                try:
                    result, entry = future.result()
                except EvopipeError as exc:
                    logger.warning("Experiment %s failed: %s", cfg.config_id, exc)
                    entry = ManifestEntry(config_id=cfg.config_id, status="failed", error=str(exc))
                except Exception as exc:
                    logger.exception("Experiment %s failed unexpectedly", cfg.config_id)
                    message = f"{type(exc).__name__}: {exc}"
                    entry = ManifestEntry(config_id=cfg.config_id, status="failed", error=message)
                else:
                    results.append(result)
                entries.append(entry)
    finally:
        manifest = GridManifest(experiments=entries)
        _write_text_atomic(out / "grid.json", manifest.model_dump_json(indent=2) + "\n")
    return results


def default_grid(seed: int = 0) -> list[ExperimentConfig]:
    """Desk-scale grid: two datasets, four families, three replicates, pop 20, gens 5."""
    common: dict[str, Any] = {
        "population_size": 20,
        "generations": 5,
        "replicates": 3,
        "seed": seed,
    }
    families: list[dict[str, Any]] = [
        {"single_estimator_mode": True, "classifier": "GaussianNB"},
        {},
        {
            "single_estimator_mode": True,
            "nn_enabled": True,
            "estimator_filter": EstimatorFilter.MLP_ONLY,
        },
        {"nn_enabled": True},
    ]
    return [
        ExperimentConfig(dataset=name, **common, **flags)
        for name in (BUNDLED_BREAST_CANCER, HILL_VALLEY_NOISY)
        for flags in families
    ]


def full_grid(
    datasets: Iterable[str] | None = None,
    *,
    replicates: int = 5,
    generations: int = 100,
    population_size: int = 100,
    seed: int = 0,
) -> list[ExperimentConfig]:
    """Every consistent combination of the search flags on every dataset."""
    combos: list[dict[str, Any]] = []
    for nn in (False, True):
        filters = list(EstimatorFilter) if nn else [EstimatorFilter.ALL]
        for flt in filters:
            base = {"nn_enabled": nn, "estimator_filter": flt}
            combos.append(base)
            combos.append({**base, "template": DEFAULT_TEMPLATE})
            combos.append({**base, "single_estimator_mode": True})
    return [
        ExperimentConfig(
            dataset=name,
            replicates=replicates,
            generations=generations,
            population_size=population_size,
            seed=seed,
            **combo,
        )
        for name in (datasets if datasets is not None else sorted(PMLB_CATALOG))
        for combo in combos
    ]


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def _std_ratio(numerator: float, denominator: float) -> float:
    if denominator == 0.0:
        return 1.0 if numerator == 0.0 else math.inf
    return numerator / denominator


def _table(title: str, rows: list[tuple[str, Summary]], digits: int) -> list[str]:
    header = ("family", "mean", "min", "max", "std")
    cells = [[fam] + [f"{v:.{digits}f}" for v in (s.mean, s.min, s.max, s.std)] for fam, s in rows]
    widths = [max(len(header[i]), *(len(c[i]) for c in cells)) for i in range(len(header))]

    def row(values: Sequence[str]) -> str:
        padded = [values[0].ljust(widths[0])]
        padded.extend(v.rjust(w) for v, w in zip(values[1:], widths[1:], strict=True))
        return "  ".join(padded)

    return [title, row(header), *(row(c) for c in cells)]


def summarize(results: Sequence[ExperimentResult]) -> str:
    """Per dataset and family: test-accuracy and duration tables plus comparisons."""
    if not results:
        raise ConfigError("nothing to report")
    grouped: dict[str, dict[str, list[ReplicateRecord]]] = {}
    for result in results:
        per_family = grouped.setdefault(result.config.dataset, {})
        per_family.setdefault(result.family, []).extend(result.replicates)

    lines: list[str] = []
    for dataset in sorted(grouped):
        per_family = grouped[dataset]
        families = [f for f in FAMILIES if f in per_family]
        acc = {f: Summary.of([r.test_accuracy for r in per_family[f]]) for f in families}
        dur = {f: Summary.of([r.duration_s for r in per_family[f]]) for f in families}
        if lines:
            lines.append("")
        lines.append(f"Dataset: {dataset}")
        lines.extend(_table("Test accuracy", [(f, acc[f]) for f in families], 4))
        lines.append("")
        lines.extend(_table("Training duration (s)", [(f, dur[f]) for f in families], 3))
        if FAMILY_NN in acc and FAMILY_TPOT_NN in acc:
            ratio = _std_ratio(acc[FAMILY_NN].std, acc[FAMILY_TPOT_NN].std)
            lines.append(f"Accuracy std ratio {FAMILY_NN} / {FAMILY_TPOT_NN}: {ratio:.3f}")
        if FAMILY_TPOT in dur and dur[FAMILY_TPOT].mean > 0.0:
            base = dur[FAMILY_TPOT].mean
            increases = [
                f"{f} {100.0 * (dur[f].mean - base) / base:+.1f}%"
                for f in families
                if f != FAMILY_TPOT
            ]
            if increases:
                lines.append(f"Mean duration vs {FAMILY_TPOT}: " + ", ".join(increases))
    return "\n".join(lines) + "\n"


def report_summary(paths: Iterable[str | Path]) -> str:
    """Load result files and render the summary report."""
    return summarize([load_result(p) for p in paths])

