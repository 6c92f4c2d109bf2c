"""Hierarchical LoRA on the frozen visual encoder, one stage at a time.

Each stage folds the previous low-rank factors into the base weights and
opens fresh factors on a deeper prefix of layers. This script shows which
layers train at each stage, how many parameters that is, and that merging
never changes what the network computes.

Run: python3 demos/02_hilora_stages.py
"""
import numpy as np

from hivg import HiVG, ModelConfig
from hivg.hilora import HiLoraSchedule, advance_stage, closed_form_parameter_count, lora_parameter_count
from hivg.tensor import Tensor, no_grad

cfg = ModelConfig(dtype="float64")
model = HiVG(cfg, seed=0)
targets = model.visual.lora_targets()
schedule = HiLoraSchedule(cfg.visual_layers, cfg.hilora_groups)
rng = np.random.default_rng(0)
print(f"{len(targets)} adapted linears (q, k, v, fc1, fc2 in each of {cfg.visual_layers} layers)")
print(f"rank {cfg.lora_rank}, alpha {cfg.lora_alpha}, {cfg.hilora_groups} groups\n")

x = Tensor(rng.standard_normal((5, targets[0].in_features)))
probe = targets[0]  # layer 1 query projection: covered by every stage

for _ in range(cfg.hilora_groups):
    with no_grad():
        before = probe(x).data
    schedule = advance_stage(targets, schedule, model.lora_rng, cfg.lora_rank, cfg.lora_alpha)
    with no_grad():
        after = probe(x).data
    j = schedule.current_stage
    print(f"stage {j}: trainable layers {schedule.covered_layers()}")
    print(f"  trainable LoRA parameters {lora_parameter_count(targets)}"
          f" (closed form {closed_form_parameter_count(targets, schedule, cfg.lora_rank)})")
    # Merging and then opening fresh factors (B = 0) leaves outputs unchanged up to rounding.
    print(f"  output change when the stage opens: {np.abs(after - before).max():.1e}")

    # Pretend training happened: give the live factors random B.
    for layer in targets:
        for f in layer.factors:
            f.B.data = rng.standard_normal(f.B.shape) * 0.05
    with no_grad():
        trained = probe(x).data
    merged = x.data @ probe.effective_weight().T + probe.bias.data
    print(f"  factor path vs merged weight: {np.abs(trained - merged).max():.1e}\n")

print("boundaries where a new group joins:", schedule.stage_boundaries())
