"""Sweep the loss-term masks and the inner temperature step count, printing a
small table of combined accuracies.

    python3 demos/ablation_sweep.py
"""

from coca_tta.harness import (MASK_NAMES, ModelEntry, RunConfig,
                              ablation_sweep)
from coca_tta.models import ModelSpec
from coca_tta.shiftgen import CorruptionSpec, SourceTask, StreamSpec

task = SourceTask(kind="gaussian_mixture", num_classes=8, dims=16,
                  center_separation=5.0)
base = RunConfig(
    models=[
        ModelEntry(spec=ModelSpec(kind="mlp", input_shape=(16,),
                                  hidden_sizes=[64, 64], norm_kind="layernorm",
                                  num_classes=8), lr=1e-3),
        ModelEntry(spec=ModelSpec(kind="mlp", input_shape=(16,),
                                  hidden_sizes=[24], norm_kind="batchnorm",
                                  num_classes=8), lr=2e-2),
    ],
    task=task, strategy="coca",
    corruption=CorruptionSpec(kind="gaussian_noise", severity=4),
    stream=StreamSpec(order="iid_shuffled", batch_size=64, total_samples=1600),
    n_per_class=200, pretrain_epochs=20, seed=7)

print("loss-term ablation (same seed, same stream):")
results = ablation_sweep(base, {"loss_masks": list(MASK_NAMES)},
                         derive_seeds=False)
for point, report in sorted(results, key=lambda r: -r[1].acc_combined):
    print(f"  {point['loss_masks']:11s} combined {report.acc_combined:.3f}")

print("\ninner temperature steps per batch:")
for point, report in ablation_sweep(base, {"tau_steps": [0, 1, 5, 10]},
                                    derive_seeds=False):
    print(f"  K={point['tau_steps']:2d}  combined {report.acc_combined:.3f}  "
          f"tau final {report.tau_final:.3f}")
