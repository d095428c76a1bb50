"""Labeled point sets: CSV ingestion and benchmark sampling from mother sets.

A benchmark dataset carries an N x n matrix of real features plus a binary
normal/anomaly label per row. Benchmarks are produced by designating some of
a labeled "mother" dataset's classes as anomalous and sampling normal and
anomaly rows at a requested proportion.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SfexplainError


class EmptyFile(SfexplainError):
    """The CSV file has no header or no data rows."""


class MissingColumn(SfexplainError):
    """The requested label column is absent from the header."""


class NonNumericCell(SfexplainError):
    """A feature cell failed to parse as a finite real."""

    def __init__(self, row: int, column: str, value: str):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"row {row}, column {column!r}: {value!r} is not a finite number")


class InsufficientPoints(SfexplainError):
    """The mother set cannot supply the requested number of points."""

    def __init__(self, group: str, needed: int, available: int):
        self.group = group
        self.needed = needed
        self.available = available
        super().__init__(f"need {needed} {group} points, mother set has {available}")


@dataclass(frozen=True)
class Dataset:
    """Immutable labeled point matrix.

    Attributes:
        points: (N, n) float64 matrix, all values finite.
        labels: (N,) bool vector, True marks an anomaly.
        feature_names: n column names, in matrix column order.
    """

    points: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        labels = np.array(self.labels, dtype=bool)
        if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
            raise ValueError(f"points must be a nonempty 2D matrix, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ValueError("points must be finite")
        if labels.shape != (points.shape[0],):
            raise ValueError("labels length must match the number of points")
        if labels.all():
            raise ValueError("dataset must contain at least one normal point")
        names = tuple(str(c) for c in self.feature_names)
        if len(names) != points.shape[1]:
            raise ValueError("feature_names length must match the number of columns")
        points.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", names)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_features(self) -> int:
        return self.points.shape[1]

    @property
    def n_anomalies(self) -> int:
        return int(self.labels.sum())


@dataclass(frozen=True)
class MotherSet:
    """Multiclass source dataset from which benchmarks are sampled."""

    points: np.ndarray
    classes: tuple[str, ...]
    feature_names: tuple[str, ...]

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
            raise ValueError(f"points must be a nonempty 2D matrix, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ValueError("points must be finite")
        classes = tuple(str(c) for c in self.classes)
        if len(classes) != points.shape[0]:
            raise ValueError("classes length must match the number of points")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "feature_names", tuple(str(c) for c in self.feature_names))

    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for c in self.classes:
            counts[c] = counts.get(c, 0) + 1
        return counts


@dataclass(frozen=True)
class BenchmarkSpec:
    """How to carve one benchmark out of a mother set.

    anomaly_fraction is the fraction of the benchmark's rows drawn from the
    anomaly classes; the anomaly count is round-half-up(fraction * size).
    """

    anomaly_classes: frozenset[str] = field(default_factory=frozenset)
    anomaly_fraction: float = 0.05
    target_size: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "anomaly_classes", frozenset(str(c) for c in self.anomaly_classes))
        if not self.anomaly_classes:
            raise ValueError("anomaly_classes must be nonempty")
        if not 0.0 < self.anomaly_fraction < 1.0:
            raise ValueError(f"anomaly_fraction must be in (0, 1), got {self.anomaly_fraction}")
        if self.target_size < 1:
            raise ValueError(f"target_size must be positive, got {self.target_size}")


def _read_rows(path: Path) -> tuple[list[str], list[list[str]], list[int]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [(lineno, row) for lineno, row in enumerate(reader, start=1) if row]
    if not rows:
        raise EmptyFile(f"{path}: file is empty")
    header = [c.strip() for c in rows[0][1]]
    data = [row for _, row in rows[1:]]
    lines = [lineno for lineno, _ in rows[1:]]
    if not data:
        raise EmptyFile(f"{path}: no data rows")
    return header, data, lines


def _parse_features(
    header: list[str], data: list[list[str]], lines: list[int], label_idx: int
) -> tuple[np.ndarray, list[str]]:
    feature_cols = [i for i in range(len(header)) if i != label_idx]
    matrix = np.empty((len(data), len(feature_cols)), dtype=np.float64)
    raw_labels = []
    for r, row in enumerate(data):
        if len(row) != len(header):
            raise NonNumericCell(lines[r], "<row>", f"expected {len(header)} cells, got {len(row)}")
        for j, i in enumerate(feature_cols):
            cell = row[i].strip()
            try:
                value = float(cell)
            except ValueError:
                raise NonNumericCell(lines[r], header[i], cell) from None
            if not math.isfinite(value):
                raise NonNumericCell(lines[r], header[i], cell)
            matrix[r, j] = value
        raw_labels.append(row[label_idx].strip())
    return matrix, raw_labels


def load_csv(path: str | Path, label_column: str, anomaly_values: set[str]) -> Dataset:
    """Load a labeled benchmark CSV.

    Rows whose label cell is in ``anomaly_values`` become anomalies; all other
    rows are normal. Feature order follows column order.
    """
    path = Path(path)
    header, data, lines = _read_rows(path)
    if label_column not in header:
        raise MissingColumn(f"{path}: no column named {label_column!r} (header: {header})")
    label_idx = header.index(label_column)
    matrix, raw_labels = _parse_features(header, data, lines, label_idx)
    anomaly_values = {str(v) for v in anomaly_values}
    labels = np.array([lab in anomaly_values for lab in raw_labels], dtype=bool)
    names = tuple(h for i, h in enumerate(header) if i != label_idx)
    return Dataset(points=matrix, labels=labels, feature_names=names)


def load_mother_csv(path: str | Path, label_column: str) -> MotherSet:
    """Load a multiclass mother CSV, keeping the original class labels."""
    path = Path(path)
    header, data, lines = _read_rows(path)
    if label_column not in header:
        raise MissingColumn(f"{path}: no column named {label_column!r} (header: {header})")
    label_idx = header.index(label_column)
    matrix, raw_labels = _parse_features(header, data, lines, label_idx)
    names = tuple(h for i, h in enumerate(header) if i != label_idx)
    return MotherSet(points=matrix, classes=tuple(raw_labels), feature_names=names)


def save_csv(
    dataset: Dataset,
    path: str | Path,
    label_column: str = "label",
    anomaly_value: str = "anomaly",
    normal_value: str = "normal",
) -> None:
    """Write a Dataset as CSV. Floats use repr, so a reload is bit-identical."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(dataset.feature_names) + [label_column])
        for row, is_anomaly in zip(dataset.points, dataset.labels):
            writer.writerow(
                [repr(float(v)) for v in row] + [anomaly_value if is_anomaly else normal_value]
            )


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_benchmark(mother: MotherSet, spec: BenchmarkSpec) -> Dataset:
    """Sample one benchmark from a mother set.

    Draws without replacement, deterministically for a given seed. The result
    has exactly target_size rows of which round-half-up(fraction * size) come
    from the anomaly classes.
    """
    benchmark, _ = sample_benchmark_split(mother, spec)
    return benchmark


def sample_benchmark_split(
    mother: MotherSet, spec: BenchmarkSpec
) -> tuple[Dataset, Dataset | None]:
    """Like sample_benchmark, but also returns the unsampled remainder.

    The remainder carries the same anomaly labeling and is suitable as
    held-out training data for the simulated analyst. It is None when the
    benchmark consumed the whole mother set.
    """
    present = set(mother.classes)
    missing = sorted(spec.anomaly_classes - present)
    if missing:
        raise ValueError(f"anomaly classes not present in mother set: {missing}")
    if spec.anomaly_classes >= present:
        raise ValueError("anomaly_classes must be a proper subset of the mother set's classes")

    is_anomaly_class = np.array([c in spec.anomaly_classes for c in mother.classes], dtype=bool)
    anomaly_pool = np.flatnonzero(is_anomaly_class)
    normal_pool = np.flatnonzero(~is_anomaly_class)

    n_anomaly = _round_half_up(spec.anomaly_fraction * spec.target_size)
    n_normal = spec.target_size - n_anomaly
    if len(anomaly_pool) < n_anomaly:
        raise InsufficientPoints("anomaly", n_anomaly, len(anomaly_pool))
    if len(normal_pool) < n_normal:
        raise InsufficientPoints("normal", n_normal, len(normal_pool))

    rng = np.random.default_rng(spec.seed)
    chosen_anomaly = rng.choice(anomaly_pool, size=n_anomaly, replace=False)
    chosen_normal = rng.choice(normal_pool, size=n_normal, replace=False)
    chosen = np.sort(np.concatenate([chosen_anomaly, chosen_normal]))

    benchmark = Dataset(
        points=mother.points[chosen],
        labels=is_anomaly_class[chosen],
        feature_names=mother.feature_names,
    )

    rest_mask = np.ones(len(mother.classes), dtype=bool)
    rest_mask[chosen] = False
    rest_idx = np.flatnonzero(rest_mask)
    rest = None
    if len(rest_idx) > 0 and not is_anomaly_class[rest_idx].all():
        rest = Dataset(
            points=mother.points[rest_idx],
            labels=is_anomaly_class[rest_idx],
            feature_names=mother.feature_names,
        )
    return benchmark, rest
