"""Synthetic exchangeable data generators and CSV ingestion."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from . import errors
from .forest import Dataset, Task


def make_blobs(n: int, n_classes: int = 10, n_features: int = 5, spread: float = 2.0,
               seed: int = 0) -> Dataset:
    """Gaussian blobs: class centers ~ N(0, spread^2 I), points = center + N(0, I).

    The centers depend only on ``seed``; labels are uniform over the classes.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=spread, size=(n_classes, n_features))
    y = rng.integers(0, n_classes, size=n)
    X = centers[y] + rng.normal(size=(n, n_features))
    return Dataset(X, y, Task.CLASSIFICATION, n_classes)


def make_linear(n: int, n_features: int = 5, noise: float = 1.0, seed: int = 0) -> Dataset:
    """``y = X @ beta + noise * N(0, 1)`` with ``X ~ N(0, I)`` and ``beta ~ N(0, I)``."""
    rng = np.random.default_rng(seed)
    beta = rng.normal(size=n_features)
    X = rng.normal(size=(n, n_features))
    y = X @ beta + noise * rng.normal(size=n)
    return Dataset(X, y, Task.REGRESSION)


def _label_order(labels: set[str]) -> list[str]:
    try:
        return sorted(labels, key=float)
    except ValueError:
        return sorted(labels)


def read_csv_rows(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise errors.EmptyFile(f"{path} is empty")
        rows = [row for row in reader if row]
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise errors.SchemaMismatch(f"{path}:{lineno}: {len(row)} fields, header has {len(header)}")
    return [h.strip() for h in header], rows


def _parse_float(text: str, column: str, lineno: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise errors.NonNumericFeature(f"line {lineno}, column {column!r}: {text!r} is not numeric") from None
    if math.isnan(value):
        raise errors.NonFiniteInput(f"line {lineno}, column {column!r}: missing values are not supported")
    return value


def load_csv(path, target_column: str | None, task: Task | str,
             feature_columns: list[str] | None = None,
             class_labels: list[str] | None = None) -> Dataset:
    """Read a headered CSV into a :class:`Dataset`.

    Every non-target column is a numeric feature unless ``feature_columns``
    names them.  Classification labels are encoded by sorted order (numeric
    when all labels parse as numbers); pass ``class_labels`` to reuse a stored
    encoding.  ``target_column=None`` reads features only (targets are zeros).
    """
    task = Task(task)
    header, rows = read_csv_rows(path)
    if not rows:
        raise errors.EmptyFile(f"{path} has a header but no rows")
    if target_column is not None and target_column not in header:
        raise errors.MissingColumn(f"target column {target_column!r} not in {path}")
    if feature_columns is None:
        feature_columns = [h for h in header if h != target_column]
    missing = [c for c in feature_columns if c not in header]
    if missing:
        raise errors.SchemaMismatch(f"{path} lacks feature columns {missing}")
    if not feature_columns:
        raise errors.SchemaMismatch(f"{path} has no feature columns")
    cols = [header.index(c) for c in feature_columns]
    X = np.array(
        [[_parse_float(row[c], header[c], ln) for c in cols] for ln, row in enumerate(rows, start=2)],
        dtype=np.float64,
    )
    if target_column is None:
        y = np.zeros(len(rows))
        n_classes = len(class_labels) if class_labels else 0
        if task is Task.CLASSIFICATION:
            y = y.astype(np.int64)
        return Dataset(X, y, task, n_classes, list(feature_columns), class_labels)

    t = header.index(target_column)
    raw = [row[t].strip() for row in rows]
    if task is Task.REGRESSION:
        y = np.array([_parse_float(v, target_column, ln) for ln, v in enumerate(raw, start=2)])
        return Dataset(X, y, task, 0, list(feature_columns))
    labels = list(class_labels) if class_labels is not None else _label_order(set(raw))
    code = {lab: i for i, lab in enumerate(labels)}
    unknown = sorted(set(raw) - set(code))
    if unknown:
        raise errors.ClassOutOfRange(f"labels {unknown} not in the stored encoding")
    y = np.array([code[v] for v in raw], dtype=np.int64)
    return Dataset(X, y, task, len(labels), list(feature_columns), labels)
