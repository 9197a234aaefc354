"""Small model zoo: MLPs and a tiny ConvNet with trainable normalization.

Models expose their normalization affine parameters by name so that
adaptation can update only those tensors. Checkpoints round-trip
bit-exactly through a little-endian binary format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tape, Tensor

CHECKPOINT_MAGIC = b"COCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or incompatible."""


@dataclass
class ModelSpec:
    kind: str                       # "mlp" | "convnet"
    input_shape: tuple[int, ...]    # (dims,) for mlp, (C, H, W) for convnet
    hidden_sizes: list[int]         # mlp widths, or convnet channel counts (2 entries)
    norm_kind: str                  # "batchnorm" | "layernorm"
    num_classes: int

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.hidden_sizes = [int(h) for h in self.hidden_sizes]
        if self.kind not in ("mlp", "convnet"):
            raise ValueError(f"unsupported model kind: {self.kind!r}")
        if self.norm_kind not in ("batchnorm", "layernorm"):
            raise ValueError(f"unsupported norm kind: {self.norm_kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kind == "mlp":
            if len(self.input_shape) != 1:
                raise ValueError("mlp input_shape must be 1-D")
            if not self.hidden_sizes:
                raise ValueError("mlp requires non-empty hidden_sizes")
        else:
            if len(self.input_shape) != 3:
                raise ValueError("convnet input_shape must be (channels, height, width)")
            if len(self.hidden_sizes) != 2:
                raise ValueError("convnet is fixed to 2 conv blocks: hidden_sizes must have 2 entries")
            if self.norm_kind != "batchnorm":
                raise ValueError("convnet supports batchnorm only")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "hidden_sizes": list(self.hidden_sizes),
            "norm_kind": self.norm_kind,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            kind=d["kind"],
            input_shape=tuple(d["input_shape"]),
            hidden_sizes=list(d["hidden_sizes"]),
            norm_kind=d["norm_kind"],
            num_classes=int(d["num_classes"]),
        )


@dataclass
class ModelHandle:
    spec: ModelSpec
    params: dict[str, Tensor]
    norm_param_names: list[str]
    seed: int

    @property
    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def norm_params(self) -> list[Tensor]:
        return [self.params[n] for n in self.norm_param_names]

    def all_params(self) -> list[Tensor]:
        return list(self.params.values())

    def set_trainable(self, norm_only: bool) -> None:
        """Restrict gradient tracking to norm affines (adaptation mode) or all params."""
        norm = set(self.norm_param_names)
        for name, p in self.params.items():
            p.requires_grad = (name in norm) if norm_only else True
            p.grad = None

    def clone(self) -> "ModelHandle":
        params = {n: _clone_param(p) for n, p in self.params.items()}
        return ModelHandle(self.spec, params, list(self.norm_param_names), self.seed)

    def forward(self, batch: Tensor) -> Tensor:
        return forward_logits(self, batch)


def _clone_param(p: Tensor) -> Tensor:
    q = Tensor(p.data.copy(), requires_grad=p.requires_grad)
    return q


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def build_model(spec: ModelSpec, seed: int) -> ModelHandle:
    """Initialize a model deterministically from (spec, seed).

    He-uniform weights, zero biases, scale-1/shift-0 norm affines.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    norm_names: list[str] = []

    def param(name, data):
        params[name] = Tensor(data, requires_grad=True)

    if spec.kind == "mlp":
        in_dim = spec.input_shape[0]
        for i, width in enumerate(spec.hidden_sizes):
            param(f"layer{i}.weight", _he_uniform(rng, (in_dim, width), in_dim))
            param(f"layer{i}.bias", np.zeros(width))
            param(f"layer{i}.norm_scale", np.ones(width))
            param(f"layer{i}.norm_shift", np.zeros(width))
            norm_names += [f"layer{i}.norm_scale", f"layer{i}.norm_shift"]
            in_dim = width
        param("head.weight", _he_uniform(rng, (in_dim, spec.num_classes), in_dim))
        param("head.bias", np.zeros(spec.num_classes))
    else:
        cin = spec.input_shape[0]
        for i, cout in enumerate(spec.hidden_sizes):
            fan_in = cin * 9
            param(f"block{i}.weight", _he_uniform(rng, (cout, cin, 3, 3), fan_in))
            param(f"block{i}.bias", np.zeros(cout))
            param(f"block{i}.norm_scale", np.ones(cout))
            param(f"block{i}.norm_shift", np.zeros(cout))
            norm_names += [f"block{i}.norm_scale", f"block{i}.norm_shift"]
            cin = cout
        flat = spec.hidden_sizes[-1] * spec.input_shape[1] * spec.input_shape[2]
        param("head.weight", _he_uniform(rng, (flat, spec.num_classes), flat))
        param("head.bias", np.zeros(spec.num_classes))

    return ModelHandle(spec, params, norm_names, int(seed))


def forward_logits(model: ModelHandle, batch: Tensor) -> Tensor:
    """Forward pass producing (B, C) logits on the active tape."""
    spec = model.spec
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = spec.input_shape
    if x.shape[1:] != expected:
        raise ad.ShapeError(
            f"forward: batch shape {x.shape} does not match input shape {expected}")
    if spec.norm_kind == "batchnorm" and x.shape[0] < 2:
        raise ad.ShapeError("forward: batchnorm model requires batch size >= 2")
    p = model.params

    if spec.kind == "mlp":
        for i in range(len(spec.hidden_sizes)):
            x = ad.add(ad.matmul(x, p[f"layer{i}.weight"]), p[f"layer{i}.bias"])
            norm = ad.batchnorm if spec.norm_kind == "batchnorm" else ad.layernorm
            x = norm(x, p[f"layer{i}.norm_scale"], p[f"layer{i}.norm_shift"])
            x = ad.relu(x)
        return ad.add(ad.matmul(x, p["head.weight"]), p["head.bias"])

    for i in range(len(spec.hidden_sizes)):
        x = ad.conv2d(x, p[f"block{i}.weight"])
        x = ad.add(x, ad.reshape(p[f"block{i}.bias"], (1, -1, 1, 1)))
        x = ad.batchnorm(x, p[f"block{i}.norm_scale"], p[f"block{i}.norm_shift"])
        x = ad.relu(x)
    b = x.shape[0]
    x = ad.reshape(x, (b, -1))
    return ad.add(ad.matmul(x, p["head.weight"]), p["head.bias"])


def cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    lse = ad.logsumexp(logits)                                  # (B,)
    picked = ad.tensor_sum(ad.mul(logits, onehot), axis=-1)     # (B,)
    return ad.tensor_mean(ad.sub(lse, picked))


def pretrain(model: ModelHandle, features: np.ndarray, labels: np.ndarray,
             epochs: int, lr: float, seed: int, batch_size: int = 64,
             momentum: float = 0.9) -> list[dict]:
    """Full-parameter supervised training with shuffled minibatches.

    Returns a per-epoch log of mean loss and training accuracy.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    n = len(labels)
    if n == 0:
        raise ValueError("empty dataset")
    model.set_trainable(norm_only=False)
    opt = SGD(model.all_params(), lr=lr, momentum=momentum)
    rng = np.random.default_rng(seed)
    log = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses, correct, seen = [], 0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if model.spec.norm_kind == "batchnorm" and len(idx) < 2:
                continue
            xb, yb = features[idx], labels[idx]
            with Tape():
                logits = forward_logits(model, Tensor(xb))
                loss = cross_entropy_mean(logits, yb)
                ad.backward(loss)
            opt.step()
            losses.append(loss.item())
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            seen += len(idx)
        log.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "accuracy": correct / seen,
        })
    return log


def anchor_select(models: Sequence[ModelHandle]) -> list[ModelHandle]:
    """Order models anchor-first: descending param count, ties by declaration order."""
    if len(models) < 2:
        raise ValueError("anchor selection requires at least 2 models")
    indexed = list(enumerate(models))
    indexed.sort(key=lambda im: (-im[1].param_count, im[0]))
    return [m for _, m in indexed]


def evaluate_clean_accuracy(model: ModelHandle, features: np.ndarray,
                            labels: np.ndarray, batch_size: int = 64) -> float:
    # shuffled batches: class-ordered batches would distort batch statistics
    order = np.random.default_rng(0).permutation(len(labels))
    features, labels = features[order], labels[order]
    correct = 0
    seen = 0
    for start in range(0, len(labels), batch_size):
        xb = features[start:start + batch_size]
        yb = labels[start:start + batch_size]
        if model.spec.norm_kind == "batchnorm" and len(yb) < 2:
            continue
        logits = forward_logits(model, Tensor(xb))
        correct += int((logits.data.argmax(axis=1) == yb).sum())
        seen += len(yb)
    return correct / seen


# --- checkpoint IO -----------------------------------------------------------

def _write_u32(f: BinaryIO, v: int) -> None:
    f.write(struct.pack("<I", v))


def _read_u32(f: BinaryIO) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated checkpoint file")
    return struct.unpack("<I", raw)[0]


def save_checkpoint(model: ModelHandle, path: str) -> None:
    meta = json.dumps({
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "param_count": model.param_count,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        _write_u32(f, CHECKPOINT_VERSION)
        _write_u32(f, len(meta))
        f.write(meta)
        for name, p in model.params.items():
            nb = name.encode("utf-8")
            _write_u32(f, len(nb))
            f.write(nb)
            _write_u32(f, p.data.ndim)
            for d in p.data.shape:
                _write_u32(f, d)
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> ModelHandle:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic: {magic!r}")
        version = _read_u32(f)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version: {version}")
        meta_len = _read_u32(f)
        meta_raw = f.read(meta_len)
        if len(meta_raw) != meta_len:
            raise CheckpointError("truncated checkpoint metadata")
        meta = json.loads(meta_raw.decode("utf-8"))
        spec = ModelSpec.from_dict(meta["spec"])
        model = build_model(spec, int(meta["seed"]))
        loaded = {}
        while True:
            raw = f.read(4)
            if not raw:
                break
            if len(raw) != 4:
                raise CheckpointError("truncated checkpoint blob header")
            name_len = struct.unpack("<I", raw)[0]
            name = f.read(name_len).decode("utf-8")
            rank = _read_u32(f)
            dims = tuple(_read_u32(f) for _ in range(rank))
            count = int(np.prod(dims)) if dims else 1
            data = f.read(count * 8)
            if len(data) != count * 8:
                raise CheckpointError(f"truncated data for parameter {name!r}")
            loaded[name] = np.frombuffer(data, dtype="<f8").reshape(dims).copy()
    if set(loaded) != set(model.params):
        raise CheckpointError("checkpoint parameter names do not match model spec")
    for name, arr in loaded.items():
        if arr.shape != model.params[name].data.shape:
            raise CheckpointError(f"shape mismatch for parameter {name!r}")
        model.params[name].data = arr
    if model.param_count != meta["param_count"]:
        raise CheckpointError("param_count mismatch in checkpoint metadata")
    return model
