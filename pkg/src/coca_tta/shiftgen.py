"""Synthetic source tasks, corruption operators, and test-stream builders.

All generators are pure functions of their parameters and a seed.
Severity tables are artifact-defined and monotone in corruption strength.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator

import numpy as np

DATASET_MAGIC = b"COCD"
DATASET_VERSION = 1

GAUSSIAN_NOISE_STD = {1: 0.25, 2: 0.5, 3: 0.75, 4: 1.0, 5: 1.5}
UNIFORM_NOISE_HALFWIDTH = {1: 0.25, 2: 0.5, 3: 0.75, 4: 1.0, 5: 1.5}
CONTRAST_SCALE = {1: 0.8, 2: 0.6, 3: 0.45, 4: 0.3, 5: 0.2}
ROTATION_DEGREES = {1: 10.0, 2: 20.0, 3: 30.0, 4: 45.0, 5: 60.0}

CORRUPTION_KINDS = ("gaussian_noise", "uniform_noise", "contrast_scale",
                    "feature_rotation", "blur3x3")


class DatasetError(ValueError):
    """Raised when a dataset file is malformed."""


@dataclass
class SourceTask:
    kind: str                     # "gaussian_mixture" | "procedural_images"
    num_classes: int
    dims: int = 32                # gaussian_mixture feature dimension
    image_shape: tuple[int, int, int] = (1, 8, 8)
    center_separation: float = 6.0  # pairwise center distance in noise-std units
    noise_std: float = 1.0
    center_seed: int = 0            # class centers/patterns are a task property

    def __post_init__(self):
        if self.kind not in ("gaussian_mixture", "procedural_images"):
            raise ValueError(f"unsupported task kind: {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kind == "gaussian_mixture" and self.num_classes > self.dims:
            raise ValueError("gaussian_mixture requires num_classes <= dims")
        self.image_shape = tuple(int(d) for d in self.image_shape)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return (self.dims,) if self.kind == "gaussian_mixture" else self.image_shape

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "num_classes": self.num_classes,
            "dims": self.dims,
            "image_shape": list(self.image_shape),
            "center_separation": self.center_separation,
            "noise_std": self.noise_std,
            "center_seed": self.center_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SourceTask":
        out = cls(kind=d["kind"], num_classes=int(d["num_classes"]))
        if "dims" in d:
            out.dims = int(d["dims"])
        if "image_shape" in d:
            out.image_shape = tuple(d["image_shape"])
        if "center_separation" in d:
            out.center_separation = float(d["center_separation"])
        if "noise_std" in d:
            out.noise_std = float(d["noise_std"])
        if "center_seed" in d:
            out.center_seed = int(d["center_seed"])
        out.__post_init__()
        return out


@dataclass
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unsupported corruption kind: {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "severity": self.severity}

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionSpec":
        return cls(kind=d["kind"], severity=int(d["severity"]))


@dataclass
class StreamSpec:
    order: str = "iid_shuffled"   # iid_shuffled | label_sorted | mixed_blocks
    batch_size: int = 64
    total_samples: int = 0        # 0 = use the whole dataset
    seed: int = 0

    def __post_init__(self):
        if self.order not in ("iid_shuffled", "label_sorted", "mixed_blocks"):
            raise ValueError(f"unsupported stream order: {self.order!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {"order": self.order, "batch_size": self.batch_size,
                "total_samples": self.total_samples, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "StreamSpec":
        return cls(order=d.get("order", "iid_shuffled"),
                   batch_size=int(d.get("batch_size", 64)),
                   total_samples=int(d.get("total_samples", 0)),
                   seed=int(d.get("seed", 0)))


def class_centers(task: SourceTask) -> np.ndarray:
    """Mutually orthogonal class centers with the configured pairwise separation."""
    rng = np.random.default_rng(task.center_seed)
    raw = rng.standard_normal((task.dims, task.num_classes))
    q, _ = np.linalg.qr(raw)
    # orthonormal centers are sqrt(2)*r apart; scale so the distance is sep*noise_std
    radius = task.center_separation * task.noise_std / np.sqrt(2.0)
    return q[:, :task.num_classes].T * radius


def class_patterns(task: SourceTask) -> np.ndarray:
    """Per-class base images for the procedural image task."""
    rng = np.random.default_rng(task.center_seed)
    c = task.num_classes
    flat = int(np.prod(task.image_shape))
    raw = rng.standard_normal((flat, c))
    q, _ = np.linalg.qr(raw)
    radius = task.center_separation * task.noise_std / np.sqrt(2.0)
    return (q[:, :c].T * radius).reshape((c,) + task.image_shape)


def gen_source(task: SourceTask, n_per_class: int, seed: int):
    """Balanced labeled dataset: (features, labels), deterministic in seed."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    c = task.num_classes
    labels = np.repeat(np.arange(c), n_per_class)
    if task.kind == "gaussian_mixture":
        centers = class_centers(task)
        noise = rng.standard_normal((c * n_per_class, task.dims)) * task.noise_std
        features = centers[labels] + noise
    else:
        patterns = class_patterns(task)
        noise = rng.standard_normal((c * n_per_class,) + task.image_shape) * task.noise_std
        features = patterns[labels] + noise
    return features, labels


def apply_corruption(features: np.ndarray, spec: CorruptionSpec, seed: int) -> np.ndarray:
    """Corrupt features without changing labels or cardinality."""
    rng = np.random.default_rng(seed)
    s = spec.severity
    x = features
    if spec.kind == "gaussian_noise":
        sigma = GAUSSIAN_NOISE_STD[s] * x.std()
        return x + rng.standard_normal(x.shape) * sigma
    if spec.kind == "uniform_noise":
        a = UNIFORM_NOISE_HALFWIDTH[s] * x.std()
        return x + rng.uniform(-a, a, size=x.shape)
    if spec.kind == "contrast_scale":
        return x * CONTRAST_SCALE[s]
    if spec.kind == "feature_rotation":
        flat = x.reshape(len(x), -1)
        return _rotate_planes(flat, ROTATION_DEGREES[s], rng).reshape(x.shape)
    # blur3x3: severity-many passes of a normalized 3x3 box kernel
    if x.ndim != 4:
        raise ValueError("blur3x3 applies to image features of shape (N, C, H, W)")
    out = x
    for _ in range(s):
        out = _box_blur(out)
    return out


def _rotate_planes(flat: np.ndarray, degrees: float, rng: np.random.Generator) -> np.ndarray:
    d = flat.shape[1]
    theta = np.deg2rad(degrees)
    perm = rng.permutation(d)
    out = flat.copy()
    cos, sin = np.cos(theta), np.sin(theta)
    for k in range(d // 2):
        i, j = perm[2 * k], perm[2 * k + 1]
        xi, xj = out[:, i].copy(), out[:, j].copy()
        out[:, i] = cos * xi - sin * xj
        out[:, j] = sin * xi + cos * xj
    return out


def _box_blur(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            out += xp[:, :, i:i + h, j:j + w]
    return out / 9.0


def make_stream(features: np.ndarray, labels: np.ndarray,
                spec: StreamSpec) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (features, hidden-true-labels) batches in the configured order.

    Labels are carried only for post-hoc accuracy; a final batch smaller
    than 2 is dropped (batch statistics would be undefined).
    """
    n = len(labels)
    if n == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(spec.seed)
    if spec.order == "iid_shuffled":
        order = rng.permutation(n)
    elif spec.order == "label_sorted":
        order = np.argsort(labels, kind="stable")
    else:  # mixed_blocks: label-sorted blocks emitted in shuffled order
        sorted_idx = np.argsort(labels, kind="stable")
        blocks = [sorted_idx[i:i + spec.batch_size]
                  for i in range(0, n, spec.batch_size)]
        rng.shuffle(blocks)
        order = np.concatenate(blocks)
    total = spec.total_samples if spec.total_samples > 0 else n
    order = order[:total]
    for start in range(0, len(order), spec.batch_size):
        idx = order[start:start + spec.batch_size]
        if len(idx) < 2:
            break
        yield features[idx], labels[idx]


# --- dataset file IO ---------------------------------------------------------

def save_dataset(path: str, features: np.ndarray, labels: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(features) != len(labels):
        raise DatasetError("features and labels length mismatch")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<I", len(labels)))
        f.write(struct.pack("<I", features.ndim))
        for d in features.shape:
            f.write(struct.pack("<I", d))
        f.write(np.ascontiguousarray(features, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(labels, dtype="<u4").tobytes())


def load_dataset(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise DatasetError(f"bad dataset magic: {magic!r}")
        version = _read_u32(f)
        if version != DATASET_VERSION:
            raise DatasetError(f"unsupported dataset version: {version}")
        count = _read_u32(f)
        rank = _read_u32(f)
        dims = tuple(_read_u32(f) for _ in range(rank))
        if not dims or dims[0] != count:
            raise DatasetError("dataset shape does not match sample count")
        nfloat = int(np.prod(dims))
        raw = f.read(nfloat * 8)
        if len(raw) != nfloat * 8:
            raise DatasetError("truncated dataset features")
        features = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise DatasetError("truncated dataset labels")
        labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    return features, labels


def _read_u32(f: BinaryIO) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise DatasetError("truncated dataset file")
    return struct.unpack("<I", raw)[0]
