"""Synthetic datasets, CSV ingestion, and persistence of runs and checkpoints.

Synthetic tasks are the desk-scale stand-ins for image benchmarks: Gaussian
blobs whose difficulty is set by the centroid separation, and concentric
rings for a non-linear option.  Persistence is JSON throughout; floats go
through Python's shortest-repr encoding, which round-trips float64 exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .neural import Mlp, MlpSpec

__all__ = [
    "METRICS_SCHEMA_VERSION",
    "CHECKPOINT_FORMAT_VERSION",
    "DatasetSpec",
    "LabeledDataset",
    "generate",
    "load_csv",
    "save_metrics",
    "load_metrics",
    "save_checkpoint",
    "load_checkpoint",
    "save_experiment_config",
    "load_experiment_config",
]

METRICS_SCHEMA_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1

_KINDS = ("gaussian_blobs", "concentric_rings", "csv")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    num_classes: int
    features: int
    train_size: int
    val_size: int
    class_separation: float = 3.0
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}, got {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.features < 1:
            raise ValueError(f"features must be >= 1, got {self.features}")
        if self.train_size < self.num_classes or self.val_size < 0:
            raise ValueError("train_size must cover every class and val_size must be >= 0")
        if not (self.class_separation > 0):
            raise ValueError(f"class_separation must be > 0, got {self.class_separation}")
        if self.kind == "concentric_rings" and self.features < 2:
            raise ValueError("concentric_rings needs at least 2 features")
        if self.kind == "csv" and not self.path:
            raise ValueError("csv datasets need a path")

    def with_seed(self, seed: int) -> "DatasetSpec":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "num_classes": self.num_classes,
            "features": self.features,
            "train_size": self.train_size,
            "val_size": self.val_size,
            "class_separation": self.class_separation,
            "seed": self.seed,
        }
        if self.path is not None:
            d["path"] = self.path
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(
            kind=d["kind"],
            num_classes=int(d["num_classes"]),
            features=int(d["features"]),
            train_size=int(d["train_size"]),
            val_size=int(d["val_size"]),
            class_separation=float(d.get("class_separation", 3.0)),
            seed=int(d.get("seed", 0)),
            path=d.get("path"),
        )


@dataclass
class LabeledDataset:
    """Feature rows with integer labels; the first ``train_size`` rows are the train split."""

    features: np.ndarray
    labels: np.ndarray
    train_size: int
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be (n, F) and labels (n,)")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if not (0 < self.train_size <= self.labels.size):
            raise ValueError("train split is empty or exceeds the data")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")
        train_classes = np.unique(self.labels[: self.train_size])
        if train_classes.size < self.num_classes:
            missing = sorted(set(range(self.num_classes)) - set(train_classes.tolist()))
            raise ValueError(f"classes {missing} never appear in the train split")

    @property
    def train_features(self) -> np.ndarray:
        return self.features[: self.train_size]

    @property
    def train_labels(self) -> np.ndarray:
        return self.labels[: self.train_size]

    @property
    def val_features(self) -> np.ndarray:
        return self.features[self.train_size:]

    @property
    def val_labels(self) -> np.ndarray:
        return self.labels[self.train_size:]


def _stratified_counts(size: int, num_classes: int) -> np.ndarray:
    counts = np.full(num_classes, size // num_classes, dtype=np.int64)
    counts[: size % num_classes] += 1
    return counts


def _class_directions(rng: np.random.Generator, num_classes: int, features: int) -> np.ndarray:
    # Orthonormal directions whenever the feature space allows: the pairwise
    # centroid distance is then separation * sqrt(2), so task difficulty is
    # governed by class_separation alone.
    raw = rng.normal(size=(features, max(num_classes, 2)))
    if features >= num_classes:
        qmat, rmat = np.linalg.qr(raw[:, :num_classes])
        return (qmat * np.sign(np.diag(rmat))).T
    dirs = raw.T[:num_classes]
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _split_samples(rng, spec: DatasetSpec, size: int, make_class_samples) -> tuple[np.ndarray, np.ndarray]:
    counts = _stratified_counts(size, spec.num_classes)
    xs, ys = [], []
    for c, count in enumerate(counts):
        xs.append(make_class_samples(c, int(count)))
        ys.append(np.full(int(count), c, dtype=np.int64))
    x = np.vstack(xs)
    y = np.concatenate(ys)
    order = rng.permutation(size)
    return x[order], y[order]


def generate(spec: DatasetSpec) -> LabeledDataset:
    """Deterministic synthetic dataset for the spec; csv kind defers to `load_csv`."""
    if spec.kind == "csv":
        return load_csv(spec.path, spec.num_classes, spec.features, spec.train_size)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian_blobs":
        centers = spec.class_separation * _class_directions(rng, spec.num_classes, spec.features)

        def make(c, count):
            return centers[c] + rng.normal(size=(count, spec.features))
    else:  # concentric_rings
        def make(c, count):
            radius = (c + 1) * spec.class_separation \
                + 0.1 * spec.class_separation * rng.normal(size=count)
            angle = rng.uniform(0.0, 2.0 * np.pi, size=count)
            x = rng.normal(size=(count, spec.features))
            x[:, 0] = radius * np.cos(angle)
            x[:, 1] = radius * np.sin(angle)
            return x

    train_x, train_y = _split_samples(rng, spec, spec.train_size, make)
    val_x, val_y = (np.empty((0, spec.features)), np.empty(0, dtype=np.int64)) \
        if spec.val_size == 0 else _split_samples(rng, spec, spec.val_size, make)
    return LabeledDataset(np.vstack([train_x, val_x]), np.concatenate([train_y, val_y]),
                          spec.train_size, spec.num_classes)


def load_csv(path, num_classes: int, features: int, train_size: int | None = None) -> LabeledDataset:
    """Load `feature_1,...,feature_F,label` rows; standardize on train statistics.

    The first row is treated as a header when any of its fields fails to
    parse as a number.  Row order defines the split: the first
    ``train_size`` rows (default: all rows) are the train split, and the
    standardization mean/scale come from those rows only.
    """
    if not path or not os.path.exists(path):
        raise FileNotFoundError(f"csv dataset not found: {path}")
    rows, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    start = 0
    if lines:
        first = lines[0].strip().split(",")
        try:
            [float(x) for x in first]
        except ValueError:
            start = 1
    for lineno, line in enumerate(lines[start:], start=start + 1):
        text = line.strip()
        if not text:
            continue
        parts = text.split(",")
        if len(parts) != features + 1:
            raise ValueError(f"{path}:{lineno}: expected {features + 1} fields, got {len(parts)}")
        try:
            values = [float(x) for x in parts]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed number ({exc})") from None
        label = values[-1]
        if label != int(label) or not (0 <= int(label) < num_classes):
            raise ValueError(f"{path}:{lineno}: label {parts[-1]} out of range [0, {num_classes})")
        rows.append(values[:-1])
        labels.append(int(label))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    x = np.asarray(rows, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_train = len(rows) if train_size is None else int(train_size)
    mean = x[:n_train].mean(axis=0)
    std = x[:n_train].std(axis=0)
    std[std == 0] = 1.0
    return LabeledDataset((x - mean) / std, y, n_train, num_classes)


def _atomic_write(path, text: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_metrics(records, path):
    """Write run records as a JSON array; each object carries the schema version."""
    payload = []
    for record in records:
        d = record.to_dict()
        d["schema_version"] = METRICS_SCHEMA_VERSION
        payload.append(d)
    _atomic_write(path, json.dumps(payload, indent=2))


def load_metrics(path):
    """Read run records back; rejects unknown schema versions loudly."""
    from .lab import RunRecord

    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, list):
        raise ValueError(f"{path}: metrics file must hold a JSON array")
    records = []
    for i, d in enumerate(payload):
        version = d.get("schema_version")
        if version != METRICS_SCHEMA_VERSION:
            raise ValueError(f"{path}: record {i} has schema version {version!r}, "
                             f"this build reads {METRICS_SCHEMA_VERSION}")
        d = dict(d)
        d.pop("schema_version")
        records.append(RunRecord.from_dict(d))
    return records


def save_checkpoint(model: Mlp, path):
    """Versioned JSON checkpoint: spec plus row-major float64 weights and biases."""
    model.check_shapes()
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "layers": [
            {"weights": w.tolist(), "bias": b.tolist()}
            for w, b in zip(model.weights, model.biases)
        ],
    }
    _atomic_write(path, json.dumps(payload))


def load_checkpoint(path) -> Mlp:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: checkpoint format version {version!r}, "
                         f"this build reads {CHECKPOINT_FORMAT_VERSION}")
    spec = MlpSpec.from_dict(payload["spec"])
    weights = [np.asarray(layer["weights"], dtype=np.float64) for layer in payload["layers"]]
    biases = [np.asarray(layer["bias"], dtype=np.float64) for layer in payload["layers"]]
    model = Mlp(spec, weights, biases)
    model.check_shapes()
    return model


def save_experiment_config(config, path):
    _atomic_write(path, json.dumps(config.to_dict(), indent=2))


def load_experiment_config(path):
    from .lab import ExperimentConfig

    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from None
    try:
        return ExperimentConfig.from_dict(payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: bad experiment config: {exc}") from None
