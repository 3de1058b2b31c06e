"""Tabular (CSV) and image (IDX) ingestion into a uniform case representation.

The training split produced here is the shared memory of both twins: the
network is fitted on it and the k-NN explainer retrieves from it.
"""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .errors import DatasetError

CLASSIFICATION = "classification"
REGRESSION = "regression"
TASKS = (CLASSIFICATION, REGRESSION)

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

NORM_METHODS = ("zscore", "minmax", "none")


@dataclass(frozen=True)
class FeatureSchema:
    feature_names: tuple[str, ...]
    task: str
    input_shape: tuple[int, ...]
    num_classes: Optional[int] = None
    # index -> original label text, first-appearance order (CSV classification only)
    class_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise DatasetError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if len(self.input_shape) not in (1, 3) or any(s <= 0 for s in self.input_shape):
            raise DatasetError(f"input_shape must be (d,) or (C, H, W), got {self.input_shape}")
        if len(self.feature_names) != int(np.prod(self.input_shape)):
            raise DatasetError(
                f"{len(self.feature_names)} feature names but input_shape {self.input_shape}"
            )
        if self.task == CLASSIFICATION:
            if self.num_classes is None or self.num_classes < 2:
                raise DatasetError("classification needs num_classes >= 2")
        elif self.num_classes is not None:
            raise DatasetError("regression schema cannot carry num_classes")

    @property
    def feature_count(self) -> int:
        return len(self.feature_names)

    @property
    def is_image(self) -> bool:
        return len(self.input_shape) == 3

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "task": self.task,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "class_names": None if self.class_names is None else list(self.class_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(
            feature_names=tuple(d["feature_names"]),
            task=d["task"],
            input_shape=tuple(int(s) for s in d["input_shape"]),
            num_classes=d.get("num_classes"),
            class_names=None if d.get("class_names") is None else tuple(d["class_names"]),
        )


@dataclass(frozen=True)
class Case:
    id: int
    features: np.ndarray
    label: Union[int, float]
    raw: Optional[bytes] = None
    # id in the dataset this case was split from
    origin: Optional[int] = None


@dataclass(frozen=True)
class NormStats:
    """Per-feature affine map ``x -> (x - loc) / scale`` recorded at normalization time."""

    method: str
    loc: np.ndarray
    scale: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.loc) / self.scale

    def to_dict(self) -> dict:
        return {"method": self.method, "loc": self.loc.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["method"], np.asarray(d["loc"], dtype=float), np.asarray(d["scale"], dtype=float))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable collection of cases stored column-wise.

    ``X`` is the (n, d) feature matrix in flattened row-major order, ``y``
    the label vector (int class indices or float targets). Case ids are the
    row positions 0..n-1; ``origin`` keeps the provenance ids after a split.
    """

    schema: FeatureSchema
    X: np.ndarray
    y: np.ndarray
    raw: Optional[tuple[bytes, ...]] = None
    origin: Optional[np.ndarray] = None
    norm_stats: Optional[NormStats] = None
    _cases: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.schema.feature_count:
            raise DatasetError(f"feature matrix shape {X.shape} does not match schema")
        if not np.all(np.isfinite(X)):
            raise DatasetError("feature values must be finite")
        if self.schema.task == CLASSIFICATION:
            y = np.asarray(self.y, dtype=np.int64)
            if len(y) and (y.min() < 0 or y.max() >= self.schema.num_classes):
                raise DatasetError("class index out of range")
        else:
            y = np.asarray(self.y, dtype=np.float64)
            if not np.all(np.isfinite(y)):
                raise DatasetError("regression targets must be finite")
        if len(y) != len(X):
            raise DatasetError("label count does not match case count")
        if self.raw is not None and len(self.raw) != len(X):
            raise DatasetError("raw payload count does not match case count")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.origin is not None:
            origin = np.array(self.origin, dtype=np.int64)
            origin.setflags(write=False)
            object.__setattr__(self, "origin", origin)

    def __len__(self) -> int:
        return len(self.X)

    def __getitem__(self, i: int) -> Case:
        if not 0 <= i < len(self):
            raise IndexError(f"case id {i} out of range 0..{len(self) - 1}")
        label = int(self.y[i]) if self.schema.task == CLASSIFICATION else float(self.y[i])
        return Case(
            id=i,
            features=self.X[i],
            label=label,
            raw=None if self.raw is None else self.raw[i],
            origin=None if self.origin is None else int(self.origin[i]),
        )

    def __iter__(self) -> Iterator[Case]:
        return (self[i] for i in range(len(self)))

    @property
    def cases(self) -> list[Case]:
        if not self._cases:
            self._cases.extend(self)
        return self._cases

    def provenance(self) -> np.ndarray:
        """Original ids of the cases (their own ids when never split)."""
        return self.origin if self.origin is not None else np.arange(len(self))

    def inputs(self) -> np.ndarray:
        """Feature matrix reshaped to ``(n, *input_shape)`` for the network."""
        return self.X.reshape((len(self),) + self.schema.input_shape)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            schema=self.schema,
            X=self.X[idx],
            y=self.y[idx],
            raw=None if self.raw is None else tuple(self.raw[i] for i in idx),
            origin=self.provenance()[idx],
            norm_stats=self.norm_stats,
        )


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DatasetError(f"non-numeric value {cell!r} at row {row}, column {col!r}") from None
    if not math.isfinite(v):
        raise DatasetError(f"non-finite value {cell!r} at row {row}, column {col!r}")
    return v


def load_csv(path, label_column: Union[str, int] = -1, task: str = CLASSIFICATION) -> Dataset:
    """Read a headered CSV file; every non-label column must be numeric.

    Class labels are indexed in order of first appearance.
    """
    if task not in TASKS:
        raise DatasetError(f"unknown task {task!r}")
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    with path.open(newline="", encoding="utf-8") as f:
        rows = [r for r in csv.reader(f) if r]
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header, body = [h.strip() for h in rows[0]], rows[1:]
    if isinstance(label_column, str) and label_column.lstrip("-").isdigit() and label_column not in header:
        label_column = int(label_column)
    if isinstance(label_column, int):
        if not -len(header) <= label_column < len(header):
            raise DatasetError(f"unknown label column index {label_column}")
        li = label_column % len(header)
    else:
        if label_column not in header:
            raise DatasetError(f"unknown label column {label_column!r}; header is {header}")
        li = header.index(label_column)
    if len(body) < 2:
        raise DatasetError(f"{path}: fewer than 2 rows")
    names = tuple(h for j, h in enumerate(header) if j != li)
    X = np.empty((len(body), len(names)))
    labels: list = []
    class_index: dict[str, int] = {}
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DatasetError(f"row {r} has {len(row)} cells, header has {len(header)}")
        cells = [c.strip() for c in row]
        X[r - 2] = [_parse_float(c, r, header[j]) for j, c in enumerate(cells) if j != li]
        cell = cells[li]
        if task == CLASSIFICATION:
            labels.append(class_index.setdefault(cell, len(class_index)))
        else:
            labels.append(_parse_float(cell, r, header[li]))
    if task == CLASSIFICATION:
        if len(class_index) < 2:
            raise DatasetError(f"{path}: classification needs at least 2 distinct labels")
        schema = FeatureSchema(names, task, (len(names),), len(class_index), tuple(class_index))
    else:
        schema = FeatureSchema(names, task, (len(names),))
    return Dataset(schema, X, np.asarray(labels))


def write_csv(dataset: Dataset, path, label_name: str = "label") -> None:
    """Write cases back as CSV, restoring original class names when known."""
    schema = dataset.schema
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(schema.feature_names) + [label_name])
        for x, y in zip(dataset.X, dataset.y):
            if schema.class_names is not None:
                label = schema.class_names[int(y)]
            else:
                label = repr(int(y)) if schema.task == CLASSIFICATION else repr(float(y))
            w.writerow([repr(float(v)) for v in x] + [label])


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair (optionally gzipped).

    Pixels are scaled to [0, 1] by division by 255; the original bytes of
    each image are kept as the case's raw payload.
    """
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    if len(img) < 16:
        raise DatasetError(f"{images_path}: truncated file (no header)")
    if len(lab) < 8:
        raise DatasetError(f"{labels_path}: truncated file (no header)")
    magic, count, rows, cols = struct.unpack(">iiii", img[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DatasetError(f"{images_path}: magic mismatch (got {magic}, expected {IDX_IMAGE_MAGIC})")
    lmagic, lcount = struct.unpack(">ii", lab[:8])
    if lmagic != IDX_LABEL_MAGIC:
        raise DatasetError(f"{labels_path}: magic mismatch (got {lmagic}, expected {IDX_LABEL_MAGIC})")
    if count != lcount:
        raise DatasetError(f"count mismatch: {count} images but {lcount} labels")
    if count < 1 or rows < 1 or cols < 1:
        raise DatasetError(f"{images_path}: degenerate dimensions {count}x{rows}x{cols}")
    size = rows * cols
    if len(img) < 16 + count * size:
        raise DatasetError(f"{images_path}: truncated file")
    if len(lab) < 8 + count:
        raise DatasetError(f"{labels_path}: truncated file")
    pixels = np.frombuffer(img, dtype=np.uint8, count=count * size, offset=16).reshape(count, size)
    labels = np.frombuffer(lab, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    names = tuple(f"px_{r}_{c}" for r in range(rows) for c in range(cols))
    schema = FeatureSchema(names, CLASSIFICATION, (1, rows, cols), max(int(labels.max()) + 1, 2))
    raw = tuple(p.tobytes() for p in pixels)
    return Dataset(schema, pixels / 255.0, labels, raw=raw)


def compute_norm_stats(X: np.ndarray, method: str) -> NormStats:
    if method not in NORM_METHODS:
        raise DatasetError(f"unknown normalization {method!r}; expected one of {NORM_METHODS}")
    d = X.shape[1]
    if method == "zscore":
        loc = X.mean(axis=0)
        scale = X.std(axis=0)
    elif method == "minmax":
        loc = X.min(axis=0)
        scale = X.max(axis=0) - loc
    else:
        loc, scale = np.zeros(d), np.ones(d)
    scale = np.where(scale == 0, 1.0, scale)
    return NormStats(method, loc, scale)


def normalize(dataset: Dataset, method: str = "zscore", stats: Optional[NormStats] = None) -> Dataset:
    """Normalize features per column.

    With ``stats`` given (e.g. those of the training split) they are reapplied
    as-is instead of being recomputed, which is how test data must be treated.
    """
    if len(dataset) == 0:
        raise DatasetError("cannot normalize an empty dataset")
    if stats is None:
        stats = compute_norm_stats(dataset.X, method)
    elif len(stats.loc) != dataset.schema.feature_count:
        raise DatasetError("normalization stats do not match the feature count")
    return replace(dataset, X=stats.apply(dataset.X), norm_stats=stats, _cases=[])


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split; sizes are ceil(n * (1 - f)) and the remainder."""
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(dataset)
    if n < 2:
        raise DatasetError("split needs at least 2 cases")
    # guard against 0.7 -> 0.30000000000000004 style overshoot in the ceiling
    n_train = math.ceil(n * (1.0 - test_fraction) - 1e-9)
    if n_train in (0, n):
        raise DatasetError(f"test_fraction {test_fraction} leaves an empty split for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])
