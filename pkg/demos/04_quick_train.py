"""A short end-to-end run: phase A, three HiLoRA stages, evaluation and a checkpoint.

The budget here is small (about five minutes on one core), with a higher
phase-A rate than the default so the model gets past the initial plateau in
time. Expect accuracy well below a full run; ``hivg train --out runs/x``
uses the full defaults.

Run: python3 demos/04_quick_train.py [out_dir]
"""
import sys
from pathlib import Path

from hivg import RunConfig, TrainPlan
from hivg.checkpoint import load_checkpoint
from hivg.config import StagePlan
from hivg.data import build_arrays, generate_splits
from hivg.train import evaluate, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "quick_run")
plan = TrainPlan(phase_a_lr=1e-3, phase_a_epochs=8,
                 stages=[StagePlan(1e-4, 1), StagePlan(0.5e-4, 1), StagePlan(0.25e-4, 1)])
cfg = RunConfig(train=plan)
specs = generate_splits(cfg.seed, {"train": 2000, "val": 300}, "attribute")
tr = build_arrays(specs["train"], 64, 64, 8)
va = build_arrays(specs["val"], 64, 64, 8)

result = train(cfg, tr, va, out_dir=out)
print("\nepoch  phase stage  loss    val_acc")
for row in result.history:
    print(f"{row['epoch']:5d}  {row['phase']:>5} {row['stage']:5d}  {row['loss_total']:.3f}  {row['val_acc']:.3f}")
print("accuracy after each stage:", [round(a, 3) for a in result.stage_acc])
print(f"{result.seconds:.0f}s")

model, _, meta = load_checkpoint(out / "final.ckpt")
scores = evaluate(model, va)
print("reloaded checkpoint: acc@0.5", round(scores["accuracy"], 3), "mean IoU", round(scores["miou"], 3))
print("per query length:", {k: round(v, 3) for k, v in scores["per_length"].items()})
