"""Datasets: loading, PMLB fetching, splitting, folds and scoring.

Two on-disk formats are understood:

- CSV (comma separated, UTF-8, header row); the target is a named column or
  the last column.
- PMLB (gzip-compressed tab-separated values with a literal ``target``
  column), fetched from ``<base_url>/<name>/<name>.tsv.gz`` and cached as
  ``<cache_dir>/<name>.tsv.gz``.

Labels are re-encoded to ``0..c-1`` by the sorted order of the distinct raw
target values (numeric order when every value is numeric, string order
otherwise). Missing or non-finite feature values are rejected, never imputed.
"""

from __future__ import annotations

import csv
import gzip
import io
import math
import os
import tempfile
import threading
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar

import numpy as np
from numpy.typing import NDArray

from evopipe._log import logger
from evopipe.errors import DatasetError, DatasetParseError, FetchError
from evopipe.metadata import (
    BUNDLED_BREAST_CANCER,
    HILL_VALLEY,
    HILL_VALLEY_NOISY,
    PMLB_BASE_URL,
    PMLB_TARGET_COLUMN,
)

FloatMatrix = NDArray[np.float64]
LabelVector = NDArray[np.int64]

# Expected (rows, features, classes) of the benchmark datasets.
PMLB_CATALOG: dict[str, tuple[int, int, int]] = {
    "Hill_Valley_with_noise": (1212, 100, 2),
    "Hill_Valley_without_noise": (1212, 100, 2),
    "breast-cancer-wisconsin": (569, 30, 2),
    "car-evaluation": (1728, 21, 4),
    "ionosphere": (351, 34, 2),
    "spambase": (4601, 57, 2),
}

_FETCH_TIMEOUT_S = 60.0
_cache_lock = threading.Lock()

# Hill/valley generator constants.
_BUMP_WIDTH_FRACTION = 0.1
_BUMP_AMPLITUDE = 1.0
_BASELINE_RANGE = (0.0, 5.0)
_NOISE_FRACTION = 0.05


_ArrayT = TypeVar("_ArrayT", bound="np.ndarray[Any, Any]")


def _frozen(array: _ArrayT) -> _ArrayT:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix with encoded labels."""

    features: FloatMatrix
    labels: LabelVector
    feature_names: tuple[str, ...]
    n_classes: int
    name: str
    class_labels: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise DatasetError("feature matrix must be two-dimensional")
        n, d = self.features.shape
        if self.labels.shape != (n,):
            raise DatasetError(
                f"feature matrix has {n} rows but label vector has {self.labels.shape[0]}"
            )
        if len(self.feature_names) != d:
            raise DatasetError(f"{len(self.feature_names)} feature names for {d} columns")
        if self.n_classes < 2:
            raise DatasetError("a dataset needs at least two classes")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError(f"labels must lie in [0, {self.n_classes - 1}]")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("feature matrix contains NaN or infinite values")
        object.__setattr__(self, "features", _frozen(np.ascontiguousarray(self.features)))
        object.__setattr__(self, "labels", _frozen(np.ascontiguousarray(self.labels)))

    @property
    def n_rows(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def subset(self, rows: NDArray[np.intp] | Sequence[int]) -> Dataset:
        """Return the given rows (in the given order) with metadata preserved."""
        index = np.asarray(rows, dtype=np.intp)
        return Dataset(
            features=self.features[index].copy(),
            labels=self.labels[index].copy(),
            feature_names=self.feature_names,
            n_classes=self.n_classes,
            name=self.name,
            class_labels=self.class_labels,
        )


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Fold index per row."""

    fold_of: NDArray[np.int64]
    k: int

    def test_indices(self, fold: int) -> NDArray[np.intp]:
        return np.flatnonzero(self.fold_of == fold)

    def train_indices(self, fold: int) -> NDArray[np.intp]:
        return np.flatnonzero(self.fold_of != fold)

    def sizes(self) -> list[int]:
        return [int(c) for c in np.bincount(self.fold_of, minlength=self.k)]


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _encode_targets(raw: list[str]) -> tuple[LabelVector, tuple[str, ...]]:
    numbers: list[float] | None
    try:
        numbers = [float(v) for v in raw]
    except ValueError:
        numbers = None
    if numbers is not None and all(math.isfinite(x) for x in numbers):
        # "1" and "1.0" are the same class
        raw = [str(int(x)) if x.is_integer() else repr(x) for x in numbers]
        ordered = sorted(set(raw), key=float)
    else:
        ordered = sorted(set(raw))
    lookup = {value: i for i, value in enumerate(ordered)}
    return np.array([lookup[v] for v in raw], dtype=np.int64), tuple(ordered)


def _parse_table(
    text: str,
    *,
    name: str,
    delimiter: str,
    target_column: str | None,
) -> Dataset:
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DatasetParseError("file is empty; a header row is required", row=1) from None

    if target_column is None:
        target_index = len(header) - 1
    elif target_column in header:
        target_index = header.index(target_column)
    else:
        raise DatasetParseError(f"missing target column {target_column!r}", row=1)
    if len(header) < 2:
        raise DatasetParseError("need at least one feature column and a target column", row=1)

    feature_columns = [i for i in range(len(header)) if i != target_index]
    rows: list[list[float]] = []
    targets: list[str] = []
    for line_no, record in enumerate(reader, start=2):
        if not record or all(not cell.strip() for cell in record):
            continue
        if len(record) != len(header):
            raise DatasetParseError(
                f"expected {len(header)} cells, found {len(record)}", row=line_no
            )
        values: list[float] = []
        for i in feature_columns:
            cell = record[i].strip()
            try:
                value = float(cell)
            except ValueError:
                raise DatasetParseError(
                    f"non-numeric feature value {cell!r}", row=line_no, column=header[i]
                ) from None
            if not math.isfinite(value):
                raise DatasetParseError(
                    f"non-finite feature value {cell!r}", row=line_no, column=header[i]
                )
            values.append(value)
        target = record[target_index].strip()
        if not target:
            raise DatasetParseError("empty target value", row=line_no, column=header[target_index])
        rows.append(values)
        targets.append(target)

    labels, class_labels = _encode_targets(targets)
    if len(class_labels) < 2:
        raise DatasetParseError(
            f"target column {header[target_index]!r} has fewer than two distinct values"
        )

    features = np.array(rows, dtype=np.float64).reshape(len(rows), len(feature_columns))
    return Dataset(
        features=features,
        labels=labels,
        feature_names=tuple(header[i] for i in feature_columns),
        n_classes=len(class_labels),
        name=name,
        class_labels=class_labels,
    )


def load_csv(path: str | Path, target_column: str | None = None) -> Dataset:
    """Load a comma-separated file with a header row.

    *target_column* names the label column; the last column is used when it
    is ``None``.
    """
    source = Path(path)
    try:
        text = source.read_bytes().decode("utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read {source}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DatasetParseError(f"{source} is not valid UTF-8: {exc}") from exc
    ds = _parse_table(text, name=source.stem, delimiter=",", target_column=target_column)
    logger.info(
        "Loaded %s: %d rows, %d features, %d classes",
        source,
        ds.n_rows,
        ds.n_features,
        ds.n_classes,
    )
    return ds


def read_feature_rows(path: str | Path, feature_names: Sequence[str]) -> FloatMatrix:
    """Read the named feature columns (in the given order) from a CSV file.

    Extra columns, including a target column, are ignored.
    """
    source = Path(path)
    try:
        text = source.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read {source}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DatasetParseError("file is empty; a header row is required", row=1) from None
    missing = [name for name in feature_names if name not in header]
    if missing:
        raise DatasetParseError(f"missing feature columns {missing}", row=1)
    columns = [header.index(name) for name in feature_names]

    rows: list[list[float]] = []
    for line_no, record in enumerate(reader, start=2):
        if not record:
            continue
        values: list[float] = []
        for i in columns:
            cell = record[i].strip() if i < len(record) else ""
            try:
                value = float(cell)
            except ValueError:
                raise DatasetParseError(
                    f"non-numeric feature value {cell!r}", row=line_no, column=header[i]
                ) from None
            if not math.isfinite(value):
                raise DatasetParseError(
                    f"non-finite feature value {cell!r}", row=line_no, column=header[i]
                )
            values.append(value)
        rows.append(values)
    return np.array(rows, dtype=np.float64).reshape(len(rows), len(columns))


# ---------------------------------------------------------------------------
# PMLB client
# ---------------------------------------------------------------------------


def _download_pmlb(url: str) -> bytes:
    """Download one PMLB archive."""
    import httpx

    try:
        with httpx.Client(timeout=_FETCH_TIMEOUT_S, follow_redirects=True) as client:
            resp = client.get(url)
    except httpx.HTTPError as exc:
        raise FetchError(f"download of {url} failed: {exc}") from exc
    if resp.status_code != 200:
        raise FetchError(f"download of {url} failed", status=resp.status_code)
    return resp.content


def _write_atomic(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def fetch_pmlb(
    dataset_name: str,
    cache_dir: str | Path,
    *,
    base_url: str | None = None,
) -> Dataset:
    """Return a PMLB dataset, downloading it into *cache_dir* on first use.

    A cached copy is used without touching the network.
    """
    cache_path = Path(cache_dir) / f"{dataset_name}.tsv.gz"
    # one download per cache file when experiments run concurrently
    with _cache_lock:
        if cache_path.exists():
            logger.debug("Using cached PMLB copy %s", cache_path)
            payload = cache_path.read_bytes()
        else:
            url = f"{(base_url or PMLB_BASE_URL).rstrip('/')}/{dataset_name}/{dataset_name}.tsv.gz"
            logger.info("Fetching PMLB dataset %s from %s", dataset_name, url)
            payload = _download_pmlb(url)
            try:
                gzip.decompress(payload)
            except (OSError, EOFError) as exc:
                raise FetchError(f"{url} is not a valid gzip archive: {exc}") from exc
            try:
                _write_atomic(cache_path, payload)
            except OSError as exc:
                raise DatasetError(f"cannot write cache file {cache_path}: {exc}") from exc

    try:
        text = gzip.decompress(payload).decode("utf-8")
    except (OSError, EOFError, UnicodeDecodeError) as exc:
        raise FetchError(f"cached copy {cache_path} is corrupt: {exc}") from exc
    ds = _parse_table(text, name=dataset_name, delimiter="\t", target_column=PMLB_TARGET_COLUMN)

    expected = PMLB_CATALOG.get(dataset_name)
    actual = (ds.n_rows, ds.n_features, ds.n_classes)
    if expected is not None and expected != actual:
        logger.warning(
            "PMLB dataset %s has shape %s, expected %s", dataset_name, actual, expected
        )
    return ds


def load_bundled(name: str = BUNDLED_BREAST_CANCER) -> Dataset:
    """Return a dataset shipped with the installed dependencies (no network)."""
    if name != BUNDLED_BREAST_CANCER:
        raise DatasetError(f"unknown bundled dataset {name!r}")
    from sklearn.datasets import load_breast_cancer

    raw = load_breast_cancer()
    return Dataset(
        features=np.asarray(raw.data, dtype=np.float64),
        labels=np.asarray(raw.target, dtype=np.int64),
        feature_names=tuple(str(n) for n in raw.feature_names),
        n_classes=2,
        name=name,
        class_labels=tuple(str(n) for n in raw.target_names),
    )


# ---------------------------------------------------------------------------
# Splits, folds, scoring
# ---------------------------------------------------------------------------


def split_indices(
    n: int, train_fraction: float, seed: int
) -> tuple[NDArray[np.intp], NDArray[np.intp]]:
    """Row indices of the seeded train/test split of *n* rows."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train fraction must lie in (0, 1), got {train_fraction}")
    n_train = math.floor(train_fraction * n)
    if n_train < 1 or n - n_train < 1:
        raise DatasetError(
            f"train fraction {train_fraction} on {n} rows leaves an empty side"
        )
    order = np.random.default_rng(seed).permutation(n)
    return order[:n_train], order[n_train:]


def train_test_split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``floor(fraction * n)`` rows train."""
    train, test = split_indices(ds.n_rows, train_fraction, seed)
    return ds.subset(train), ds.subset(test)


def kfold(ds: Dataset, k: int, seed: int) -> FoldAssignment:
    """Seeded shuffle followed by round-robin fold assignment."""
    n = ds.n_rows
    if not 2 <= k <= n:
        raise DatasetError(f"k must lie in [2, {n}], got {k}")
    order = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % k
    return FoldAssignment(fold_of=_frozen(fold_of), k=k)


def accuracy(
    predicted: Sequence[int] | NDArray[np.int64],
    actual: Sequence[int] | NDArray[np.int64],
) -> float:
    """Fraction of exact label matches."""
    p = np.asarray(predicted)
    a = np.asarray(actual)
    if p.shape != a.shape:
        raise DatasetError(f"length mismatch: {p.shape[0]} predictions for {a.shape[0]} labels")
    if p.size == 0:
        raise DatasetError("cannot score empty label vectors")
    return float(np.count_nonzero(p == a)) / float(p.size)


def make_hill_valley(n: int, length: int, noisy: bool, seed: int) -> Dataset:
    """Synthetic sequences holding one smooth hill (label 1) or valley (label 0).

    Each row is a flat baseline (uniform offset in ``[0, 5)``) plus or minus a
    Gaussian bump of amplitude 1 whose width is 10% of the sequence, centred
    at a random position clear of both ends. With *noisy*, Gaussian noise of
    standard deviation 5% of the amplitude is added.
    """
    if length < 8 or n < 2:
        raise DatasetError(f"hill/valley needs n >= 2 and length >= 8, got n={n}, length={length}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n, dtype=np.int64) % 2)

    width = max(1.0, _BUMP_WIDTH_FRACTION * length)
    margin = math.ceil(width)
    centres = rng.integers(margin, length - margin, size=n, endpoint=False)
    baselines = rng.uniform(*_BASELINE_RANGE, size=n)

    t = np.arange(length, dtype=np.float64)
    bumps = _BUMP_AMPLITUDE * np.exp(-0.5 * ((t[None, :] - centres[:, None]) / (width / 2.0)) ** 2)
    sign = np.where(labels == 1, 1.0, -1.0)
    features = baselines[:, None] + sign[:, None] * bumps
    if noisy:
        noise = rng.normal(0.0, _NOISE_FRACTION * _BUMP_AMPLITUDE, size=features.shape)
        features = features + noise

    return Dataset(
        features=features,
        labels=labels,
        feature_names=tuple(f"x{i}" for i in range(length)),
        n_classes=2,
        name=HILL_VALLEY_NOISY if noisy else HILL_VALLEY,
        class_labels=("valley", "hill"),
    )


def resolve_dataset(
    name: str,
    *,
    data_path: str | Path | None = None,
    cache_dir: str | Path = ".evopipe-cache",
    synthetic_rows: int = 400,
    synthetic_length: int = 50,
    seed: int = 0,
    base_url: str | None = None,
) -> Dataset:
    """Resolve a dataset reference used by the experiment harness.

    Order: explicit CSV path, bundled name, synthetic hill/valley name, PMLB.
    """
    if data_path is not None:
        return load_csv(data_path)
    if name == BUNDLED_BREAST_CANCER:
        return load_bundled(name)
    if name in (HILL_VALLEY, HILL_VALLEY_NOISY):
        return make_hill_valley(synthetic_rows, synthetic_length, name == HILL_VALLEY_NOISY, seed)
    return fetch_pmlb(name, cache_dir, base_url=base_url)
