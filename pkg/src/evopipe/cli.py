"""Command-line entry point: ``evopipe run|grid|report|fit|predict``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from pydantic import ValidationError

from evopipe import __version__
from evopipe._log import logger
from evopipe.data import (
    Dataset,
    accuracy,
    read_feature_rows,
    resolve_dataset,
    train_test_split,
)
from evopipe.errors import ConfigError, EvopipeError, ResultFileError
from evopipe.harness import (
    ExperimentConfig,
    default_grid,
    full_grid,
    load_grid,
    report_summary,
    run_experiment,
    run_grid,
    summarize,
    write_results,
)
from evopipe.operators import EstimatorFilter
from evopipe.pipeline import (
    cv_score,
    export_pipeline,
    fit_pipeline,
    import_pipeline,
    predict_pipeline,
    render_script,
)

EXIT_ERROR = 2


def _add_dataset_flags(parser: argparse.ArgumentParser, *, required: bool) -> None:
    parser.add_argument("--dataset", required=required, help="PMLB, bundled or synthetic name")
    parser.add_argument("--data-path", help="CSV file to use instead of a named dataset")
    parser.add_argument("--cache-dir", default=".evopipe-cache", help="PMLB download cache")
    parser.add_argument("--synthetic-rows", type=int, default=400)
    parser.add_argument("--synthetic-length", type=int, default=50)


def _add_search_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--nn", action="store_true", help="enable neural estimators")
    parser.add_argument("--template", help='linear template, e.g. "Selector-Transformer-MlpNN"')
    parser.add_argument(
        "--estimators",
        choices=[f.value for f in EstimatorFilter],
        default=EstimatorFilter.ALL.value,
        help="restrict classifiers (lr and mlp need --nn)",
    )
    parser.add_argument(
        "--single-estimator", action="store_true", help="pipelines are a single classifier"
    )
    parser.add_argument("--classifier", help="restrict the search to one named classifier")
    parser.add_argument("--generations", type=int, default=5)
    parser.add_argument("--population", type=int, default=20)
    parser.add_argument("--cv-folds", type=int, default=5)
    parser.add_argument("--train-fraction", type=float, default=0.8)
    parser.add_argument("--replicates", type=int, default=1)
    parser.add_argument("--timeout", type=float, default=60.0, help="seconds per evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evopipe",
        description="Genetic-programming search over classification pipelines.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    _add_dataset_flags(run, required=True)
    _add_search_flags(run)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--workers", type=int, default=1, help="evaluation threads")
    run.add_argument("--out", default="results", help="directory for result files")

    grid = sub.add_parser("grid", help="run a grid of experiments (resumable)")
    source = grid.add_mutually_exclusive_group()
    source.add_argument("--grid-file", help="JSON array of experiment configurations")
    source.add_argument(
        "--full-grid", action="store_true", help="every flag combination on --dataset"
    )
    grid.add_argument("--dataset", action="append", help="dataset for --full-grid (repeatable)")
    grid.add_argument("--seed", type=int, default=0)
    grid.add_argument("--replicates", type=int, default=5)
    grid.add_argument("--generations", type=int, default=100)
    grid.add_argument("--population", type=int, default=100)
    grid.add_argument("--workers", type=int, default=1, help="concurrent experiments")
    grid.add_argument("--out", default="results", help="directory for result files")

    report = sub.add_parser("report", help="summarise result files")
    report.add_argument("paths", nargs="*", help="result files")
    report.add_argument("--out", help="directory whose result files are summarised")

    fit = sub.add_parser("fit", help="fit an exported pipeline and score it")
    fit.add_argument("--pipeline", required=True, help="export artifact")
    _add_dataset_flags(fit, required=True)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--cv-folds", type=int, default=5)
    fit.add_argument("--train-fraction", type=float, default=0.8)
    fit.add_argument("--out", help="write the artifact with the new CV score here")

    predict = sub.add_parser("predict", help="fit an exported pipeline, then label new rows")
    predict.add_argument("--pipeline", required=True, help="export artifact")
    _add_dataset_flags(predict, required=True)
    predict.add_argument("--input", required=True, help="CSV of feature rows to label")
    predict.add_argument("--seed", type=int, default=0)
    predict.add_argument("--out", help="CSV file for predictions (default: stdout)")
    return parser


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    try:
        return ExperimentConfig(
            dataset=args.dataset,
            data_path=args.data_path,
            nn_enabled=args.nn,
            template=args.template,
            estimator_filter=EstimatorFilter(args.estimators),
            single_estimator_mode=args.single_estimator,
            classifier=args.classifier,
            generations=args.generations,
            population_size=args.population,
            cv_folds=args.cv_folds,
            train_fraction=args.train_fraction,
            seed=args.seed,
            replicates=args.replicates,
            eval_timeout_s=args.timeout,
            synthetic_rows=args.synthetic_rows,
            synthetic_length=args.synthetic_length,
            cache_dir=args.cache_dir,
        )
    except ValidationError as exc:
        raise ConfigError(_validation_message(exc)) from exc


def _validation_message(exc: ValidationError) -> str:
    return "; ".join(err["msg"] for err in exc.errors())


def _dataset(args: argparse.Namespace) -> Dataset:
    return resolve_dataset(
        args.dataset,
        data_path=args.data_path,
        cache_dir=args.cache_dir,
        synthetic_rows=args.synthetic_rows,
        synthetic_length=args.synthetic_length,
        seed=args.seed,
    )


def _read_artifact(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ResultFileError(str(exc), path=path) from exc


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _experiment_config(args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ResultFileError(str(exc), path=str(out)) from exc
    result = run_experiment(cfg, workers=args.workers)
    json_path, csv_path = write_results(result, out)
    print(summarize([result]), end="")
    print(f"Results: {json_path} {csv_path}")
    return 0


def _cmd_grid(args: argparse.Namespace) -> int:
    if args.grid_file:
        grid = load_grid(args.grid_file)
    elif args.full_grid:
        try:
            grid = full_grid(
                args.dataset,
                replicates=args.replicates,
                generations=args.generations,
                population_size=args.population,
                seed=args.seed,
            )
        except ValidationError as exc:
            raise ConfigError(_validation_message(exc)) from exc
    else:
        grid = default_grid(seed=args.seed)
    results = run_grid(grid, args.out, workers=args.workers)
    logger.info("Grid finished: %d of %d experiments available", len(results), len(grid))
    if results:
        print(summarize(results), end="")
    return 0 if len(results) == len(grid) else 1


def _cmd_report(args: argparse.Namespace) -> int:
    paths = [Path(p) for p in args.paths]
    if args.out:
        paths.extend(p for p in sorted(Path(args.out).glob("*.json")) if p.name != "grid.json")
    if not paths:
        raise ConfigError("no result files given")
    print(report_summary(paths), end="")
    return 0


def _cmd_fit(args: argparse.Namespace) -> int:
    tree, meta = import_pipeline(_read_artifact(args.pipeline))
    ds = _dataset(args)
    train, test = train_test_split(ds, args.train_fraction, args.seed)
    score = cv_score(tree, train, args.cv_folds, args.seed)
    fitted = fit_pipeline(tree, train.features, train.labels, args.seed, n_classes=ds.n_classes)
    test_acc = accuracy(predict_pipeline(fitted, test.features), test.labels)
    print(render_script(tree, score))
    print(f"cv_accuracy={score!r} test_accuracy={test_acc!r} complexity={tree.node_count}")
    if meta.cv_score is not None:
        logger.info("Recorded CV score was %r", meta.cv_score)
    if args.out:
        text = export_pipeline(tree, score, dataset=ds.name, seed=args.seed)
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise ResultFileError(str(exc), path=args.out) from exc
    return 0


def _cmd_predict(args: argparse.Namespace) -> int:
    tree, _ = import_pipeline(_read_artifact(args.pipeline))
    ds = _dataset(args)
    fitted = fit_pipeline(tree, ds.features, ds.labels, args.seed, n_classes=ds.n_classes)
    rows = read_feature_rows(args.input, ds.feature_names)
    predicted = predict_pipeline(fitted, rows)
    names = ds.class_labels or tuple(str(i) for i in range(ds.n_classes))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["prediction"])
    writer.writerows([names[int(p)]] for p in predicted)
    if args.out:
        try:
            Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
        except OSError as exc:
            raise ResultFileError(str(exc), path=args.out) from exc
    else:
        print(buf.getvalue(), end="")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "grid": _cmd_grid,
    "report": _cmd_report,
    "fit": _cmd_fit,
    "predict": _cmd_predict,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except EvopipeError as exc:
        print(f"evopipe: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
