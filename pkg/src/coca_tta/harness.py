"""Run orchestration: pretraining, streaming adaptation, metrics, sweeps.

Labels never reach the adaptation code; strategy steps receive features
only and accuracies are computed here after each step.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .adaptation import (CascadeOutput, FilterConfig, LossBreakdown, LossMasks,
                         TauState, coca_step, multi_model_step, tent_step)
from .autodiff import SGD, Tensor
from .models import (ModelHandle, ModelSpec, anchor_select, build_model,
                     forward_logits, pretrain)
from .shiftgen import (CorruptionSpec, SourceTask, StreamSpec, apply_corruption,
                       gen_source, make_stream)

STRATEGIES = ("source_only", "tent", "coca", "coca_filtered")

CSV_HEADER = "batch,acc_anchor,acc_aux,acc_combined,tau,L_mar,L_ckd,L_sa,L_total,kept_frac"


def mix64(seed: int, index: int) -> int:
    """Derive an independent 64-bit seed from (seed, index) via splitmix64."""
    z = (seed * 0x9E3779B97F4A7C15 + index + 1) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return (z ^ (z >> 31)) & 0x7FFFFFFFFFFFFFFF


@dataclass
class ModelEntry:
    spec: ModelSpec
    lr: float
    # per-model pretraining budget; None falls back to the run value
    pretrain_epochs: Optional[int] = None

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "lr": self.lr,
                "pretrain_epochs": self.pretrain_epochs}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelEntry":
        pe = d.get("pretrain_epochs")
        return cls(spec=ModelSpec.from_dict(d["spec"]), lr=float(d["lr"]),
                   pretrain_epochs=None if pe is None else int(pe))


@dataclass
class RunConfig:
    models: list[ModelEntry]
    task: SourceTask
    stream: StreamSpec
    corruption: Optional[CorruptionSpec] = None
    strategy: str = "coca"
    n_per_class: int = 400
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05
    pretrain_batch_size: int = 64
    lam_col: float = 1.0
    tau_steps: int = 5
    tau_step_size: float = 1e-2
    tau_clamp: float = 20.0
    tau_min: float = 1e-2
    tau_max: float = 1e3
    loss_masks: LossMasks = field(default_factory=LossMasks)
    filter_threshold_factor: float = 0.4
    collapse_threshold: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unsupported strategy: {self.strategy!r}")
        if self.strategy in ("coca", "coca_filtered") and len(self.models) < 2:
            raise ValueError("co-adaptation strategies require >= 2 models")
        for entry in self.models:
            if entry.spec.num_classes != self.task.num_classes:
                raise ValueError(
                    f"model classes {entry.spec.num_classes} incompatible with "
                    f"task classes {self.task.num_classes}")

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "models": [m.to_dict() for m in self.models],
            "task": self.task.to_dict(),
            "stream": self.stream.to_dict(),
            "corruption": self.corruption.to_dict() if self.corruption else None,
            "strategy": self.strategy,
            "n_per_class": self.n_per_class,
            "pretrain_epochs": self.pretrain_epochs,
            "pretrain_lr": self.pretrain_lr,
            "pretrain_batch_size": self.pretrain_batch_size,
            "lam_col": self.lam_col,
            "tau_steps": self.tau_steps,
            "tau_step_size": self.tau_step_size,
            "tau_clamp": self.tau_clamp,
            "tau_min": self.tau_min,
            "tau_max": self.tau_max,
            "loss_masks": {"sa": self.loss_masks.sa, "mar": self.loss_masks.mar,
                           "ckd": self.loss_masks.ckd},
            "filter_threshold_factor": self.filter_threshold_factor,
            "collapse_threshold": self.collapse_threshold,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        masks = d.get("loss_masks", {})
        return cls(
            models=[ModelEntry.from_dict(m) for m in d["models"]],
            task=SourceTask.from_dict(d["task"]),
            stream=StreamSpec.from_dict(d.get("stream", {})),
            corruption=(CorruptionSpec.from_dict(d["corruption"])
                        if d.get("corruption") else None),
            strategy=d.get("strategy", "coca"),
            n_per_class=int(d.get("n_per_class", 400)),
            pretrain_epochs=int(d.get("pretrain_epochs", 30)),
            pretrain_lr=float(d.get("pretrain_lr", 0.05)),
            pretrain_batch_size=int(d.get("pretrain_batch_size", 64)),
            lam_col=float(d.get("lam_col", 1.0)),
            tau_steps=int(d.get("tau_steps", 5)),
            tau_step_size=float(d.get("tau_step_size", 1e-2)),
            tau_clamp=float(d.get("tau_clamp", 20.0)),
            tau_min=float(d.get("tau_min", 1e-2)),
            tau_max=float(d.get("tau_max", 1e3)),
            loss_masks=LossMasks(sa=bool(masks.get("sa", True)),
                                 mar=bool(masks.get("mar", True)),
                                 ckd=bool(masks.get("ckd", True))),
            filter_threshold_factor=float(d.get("filter_threshold_factor", 0.4)),
            collapse_threshold=float(d.get("collapse_threshold", 0.4)),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class MetricsRecord:
    batch: int
    acc_anchor: float
    acc_aux: Optional[float]
    acc_combined: Optional[float]
    tau: Optional[float]
    l_mar: Optional[float]
    l_ckd: Optional[float]
    l_sa: Optional[float]
    l_total: Optional[float]
    kept_frac: Optional[float]
    n_samples: int = 0

    def csv_row(self) -> str:
        def fmt(v):
            return "NA" if v is None else format(v, ".12g")
        return ",".join([str(self.batch), fmt(self.acc_anchor), fmt(self.acc_aux),
                         fmt(self.acc_combined), fmt(self.tau), fmt(self.l_mar),
                         fmt(self.l_ckd), fmt(self.l_sa), fmt(self.l_total),
                         fmt(self.kept_frac)])


@dataclass
class RunReport:
    config: RunConfig
    seed: int
    records: list[MetricsRecord]
    acc_per_model: list[float]   # anchor-first ordering
    acc_combined: Optional[float]
    tau_final: Optional[float]
    tau_min_seen: Optional[float]
    tau_max_seen: Optional[float]
    n_samples: int
    pretrain_logs: list[list[dict]]
    wall_clock_sec: float = 0.0  # not serialized; kept for local inspection

    @property
    def acc_anchor(self) -> float:
        return self.acc_per_model[0]

    @property
    def acc_aux(self) -> Optional[float]:
        return self.acc_per_model[1] if len(self.acc_per_model) > 1 else None

    def to_json_dict(self) -> dict:
        return {
            "schema": 1,
            "config": self.config.to_dict(),
            "seed": self.seed,
            "n_samples": self.n_samples,
            "n_batches": len(self.records),
            "acc_per_model": self.acc_per_model,
            "acc_combined": self.acc_combined,
            "tau_summary": {"final": self.tau_final, "min": self.tau_min_seen,
                            "max": self.tau_max_seen},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"

    def metrics_csv(self) -> str:
        lines = [CSV_HEADER] + [r.csv_row() for r in self.records]
        return "\n".join(lines) + "\n"


def evaluate_accuracy(predictions: np.ndarray, true_labels: np.ndarray) -> float:
    predictions = np.asarray(predictions)
    true_labels = np.asarray(true_labels)
    if predictions.shape != true_labels.shape:
        raise ValueError("predictions and labels must have equal length")
    return float((predictions == true_labels).mean())


def prepare_models(config: RunConfig) -> list[ModelHandle]:
    """Build and pretrain the configured models (deterministic in the run seed)."""
    feats, labels = gen_source(config.task, config.n_per_class, mix64(config.seed, 1))
    models = []
    for i, entry in enumerate(config.models):
        model = build_model(entry.spec, mix64(config.seed, 100 + i))
        pretrain(model, feats, labels,
                 epochs=entry.pretrain_epochs or config.pretrain_epochs,
                 lr=config.pretrain_lr, seed=mix64(config.seed, 200 + i),
                 batch_size=config.pretrain_batch_size)
        models.append(model)
    return models


# Pretraining cache for repeated runs that share (models, task, seed).
_PRETRAIN_CACHE: dict[str, list[ModelHandle]] = {}


def prepare_models_cached(config: RunConfig) -> list[ModelHandle]:
    key = json.dumps({
        "models": [m.to_dict() for m in config.models],
        "task": config.task.to_dict(),
        "n_per_class": config.n_per_class,
        "epochs": config.pretrain_epochs,
        "lr": config.pretrain_lr,
        "batch_size": config.pretrain_batch_size,
        "seed": config.seed,
    }, sort_keys=True)
    if key not in _PRETRAIN_CACHE:
        _PRETRAIN_CACHE[key] = prepare_models(config)
    return [m.clone() for m in _PRETRAIN_CACHE[key]]


def build_test_stream(config: RunConfig):
    """Corrupted test set plus its stream iterator."""
    total = config.stream.total_samples
    c = config.task.num_classes
    n_per_class = max(1, math.ceil((total or c * 64) / c))
    feats, labels = gen_source(config.task, n_per_class, mix64(config.seed, 3))
    if config.corruption is not None:
        feats = apply_corruption(feats, config.corruption, mix64(config.seed, 4))
    spec = replace(config.stream, seed=mix64(config.seed, 5))
    return make_stream(feats, labels, spec)


def run(config: RunConfig, models: Optional[Sequence[ModelHandle]] = None,
        use_cache: bool = True) -> RunReport:
    """Execute one adaptation run and collect per-batch metrics."""
    t0 = time.perf_counter()
    pretrain_logs: list[list[dict]] = []
    if models is None:
        models = (prepare_models_cached(config) if use_cache
                  else prepare_models(config))
    models = list(models)
    for entry, model in zip(config.models, models):
        if model.spec.num_classes != config.task.num_classes:
            raise ValueError("model/task class count mismatch")

    lrs = {id(m): e.lr for m, e in zip(models, config.models)}
    ordered = anchor_select(models) if len(models) >= 2 else list(models)
    n_models = len(ordered)

    for m in ordered:
        m.set_trainable(norm_only=True)
    optimizers = [SGD(m.norm_params(), lr=lrs[id(m)], momentum=0.9) for m in ordered]

    filter_cfg = FilterConfig(enabled=config.strategy == "coca_filtered",
                              threshold_factor=config.filter_threshold_factor)
    tau_kwargs = dict(step_size=config.tau_step_size, steps=config.tau_steps,
                      tau_min=config.tau_min, tau_max=config.tau_max,
                      logit_clamp=config.tau_clamp)
    tau_states = [TauState(**tau_kwargs) for _ in range(max(1, n_models - 1))]

    records: list[MetricsRecord] = []
    correct = np.zeros(n_models)
    correct_combined = 0.0
    total_seen = 0
    has_combined = config.strategy in ("coca", "coca_filtered")

    for b, (xb, yb) in enumerate(build_test_stream(config)):
        tau_val = None
        losses = (None, None, None, None, None)
        if config.strategy == "source_only":
            preds = [forward_logits(m, Tensor(xb)).data.argmax(axis=1) for m in ordered]
            comb = None
        elif config.strategy == "tent":
            preds = [tent_step(m, xb, opt) for m, opt in zip(ordered, optimizers)]
            comb = None
        else:
            if n_models == 2:
                ens, bd = coca_step(ordered[0], ordered[1], tau_states[0], xb,
                                    optimizers, filter_cfg=filter_cfg,
                                    lam_col=config.lam_col, masks=config.loss_masks,
                                    collapse_threshold=config.collapse_threshold)
                preds = [ens.p_a.argmax(axis=1), ens.p_s.argmax(axis=1)]
                comb = ens.y_hat
                tau_val = tau_states[0].tau
            else:
                out = multi_model_step(ordered, tau_states, xb, optimizers,
                                       filter_cfg=filter_cfg, lam_col=config.lam_col,
                                       masks=config.loss_masks,
                                       collapse_threshold=config.collapse_threshold)
                preds = out.per_model_preds
                comb = out.y_hat
                bd = out.breakdown
                tau_val = out.taus[-1]  # topmost pairing
            losses = (bd.l_mar, bd.l_ckd, bd.l_sa, bd.l_total, bd.kept_frac)

        n = len(yb)
        total_seen += n
        batch_accs = [evaluate_accuracy(p, yb) for p in preds]
        for i, a in enumerate(batch_accs):
            correct[i] += a * n
        comb_acc = None
        if comb is not None:
            comb_acc = evaluate_accuracy(comb, yb)
            correct_combined += comb_acc * n
        records.append(MetricsRecord(
            batch=b, acc_anchor=batch_accs[0],
            acc_aux=batch_accs[1] if n_models > 1 else None,
            acc_combined=comb_acc, tau=tau_val,
            l_mar=losses[0], l_ckd=losses[1], l_sa=losses[2],
            l_total=losses[3], kept_frac=losses[4], n_samples=n))

    taus = [r.tau for r in records if r.tau is not None]
    return RunReport(
        config=config, seed=config.seed, records=records,
        acc_per_model=[float(c / total_seen) for c in correct],
        acc_combined=(correct_combined / total_seen) if has_combined else None,
        tau_final=taus[-1] if taus else None,
        tau_min_seen=min(taus) if taus else None,
        tau_max_seen=max(taus) if taus else None,
        n_samples=total_seen,
        pretrain_logs=pretrain_logs,
        wall_clock_sec=time.perf_counter() - t0)


# --- sweeps -------------------------------------------------------------------

MASK_NAMES = {
    "sa": LossMasks(True, False, False),
    "mar": LossMasks(False, True, False),
    "ckd": LossMasks(False, False, True),
    "mar+ckd": LossMasks(False, True, True),
    "sa+ckd": LossMasks(True, False, True),
    "sa+mar": LossMasks(True, True, False),
    "sa+mar+ckd": LossMasks(True, True, True),
}


def apply_override(config: RunConfig, key: str, value) -> RunConfig:
    if key == "loss_masks":
        masks = MASK_NAMES[value] if isinstance(value, str) else LossMasks(**value)
        return replace(config, loss_masks=masks)
    if key == "severity":
        if config.corruption is None:
            raise ValueError("severity override requires a corruption spec")
        return replace(config, corruption=CorruptionSpec(config.corruption.kind, int(value)))
    if key == "stream_order":
        return replace(config, stream=replace(config.stream, order=value))
    if key in ("strategy", "lam_col", "tau_steps", "tau_step_size", "seed",
               "pretrain_epochs", "n_per_class"):
        return replace(config, **{key: value})
    raise ValueError(f"unknown sweep key: {key!r}")


def sweep_points(grid: dict[str, list]) -> list[dict]:
    if not grid:
        raise ValueError("sweep grid must not be empty")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def ablation_sweep(base: RunConfig, grid: dict[str, list],
                   derive_seeds: bool = True) -> list[tuple[dict, RunReport]]:
    """Cartesian-product sweep; each point gets a derived deterministic seed."""
    results = []
    for index, point in enumerate(sweep_points(grid)):
        cfg = base
        for k, v in point.items():
            cfg = apply_override(cfg, k, v)
        if derive_seeds and "seed" not in point:
            cfg = replace(cfg, seed=mix64(base.seed, 1000 + index))
        results.append((point, run(cfg)))
    return results
