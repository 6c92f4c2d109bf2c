"""Two-phase training, evaluation, the module ablation grid and the LoRA comparison.

Phase A trains the grounding side (grounding encoder, REG token, box head,
CLC/RTCC projections), the bridges and a single-group LoRA on every text
block, with both encoders' base weights frozen. Phase B then runs the visual
adaptation named by ``TrainPlan.lora_mode``:

* ``hilora``: G stages; stage ``j`` merges the previous factors and trains
  fresh ones on layers ``1..j*L/G`` at ``stages[j-1].lr``.
* ``vanilla``: one set of factors on every visual layer, opened at the first
  stage and trained through all the stage plans without merging.
* ``none``: the same stage plans with no visual factors.

All three modes see the same learning-rate sequence, so they differ only in
which low-rank factors exist.

Grounding-side parts keep training through phase B unless
``freeze_grounding_in_stages`` is set. The text LoRA is merged at the end of
phase A.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import LossWeights, RunConfig, StagePlan, replace
from .data import GroundingArrays
from .hilora import HiLoraSchedule, advance_stage, merge_stage
from .losses import TrainingError, box_iou_np, box_loss, clc, rtcc_from_logits, total_loss
from .model import HiVG
from .optim import AdamW, cosine_lr

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "phase", "stage", "lr", "loss_total", "loss_box", "loss_clc", "loss_rtcc",
                 "val_acc", "val_miou")
ABLATION_FIELDS = ("macb", "hilora", "val_acc", "test_acc")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
def accuracy_from_boxes(pred: np.ndarray, gt: np.ndarray, query_lengths: np.ndarray | None = None) -> dict:
    if len(gt) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    iou = box_iou_np(np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64))
    hit = iou >= 0.5
    result = {"accuracy": float(hit.mean()), "miou": float(iou.mean()), "per_length": {}, "iou": iou}
    if query_lengths is not None:
        for n in sorted(set(int(q) for q in query_lengths)):
            sel = query_lengths == n
            result["per_length"][n] = float(hit[sel].mean())
    return result


def evaluate(model: HiVG, arrays: GroundingArrays, batch_size: int = 128) -> dict:
    """Accuracy at IoU >= 0.5, mean IoU and accuracy bucketed by query word count."""
    if len(arrays) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    pred = model.predict(arrays.pixels, arrays.tokens, batch_size)
    return accuracy_from_boxes(pred, arrays.boxes, arrays.query_lengths)


# ---------------------------------------------------------------------------
# Metrics log
# ---------------------------------------------------------------------------
class MetricsLog:
    """Append-only CSV with one row per epoch; also kept in memory."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        if self.path is not None and not self.path.exists():
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(METRIC_FIELDS)

    def append(self, row: dict) -> None:
        row = {k: row[k] for k in METRIC_FIELDS}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow([_fmt(row[k]) for k in METRIC_FIELDS])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return list(reader)


# ---------------------------------------------------------------------------
# Steps and epochs
# ---------------------------------------------------------------------------
def compute_losses(model: HiVG, batch: GroundingArrays, weights: LossWeights, use_clc: bool = True) -> dict:
    out = model(batch.pixels, batch.tokens)
    parts = {"box": box_loss(out.box, batch.boxes, weights),
             "rtcc": rtcc_from_logits(out.rtcc_logits, batch.masks, weights)}
    if use_clc:
        parts["clc"] = clc(out.clc_v, out.clc_t, weights.tau)
    return parts


@dataclass
class TrainState:
    """Bookkeeping shared by both phases."""

    cfg: RunConfig
    model: HiVG
    train: GroundingArrays
    val: GroundingArrays | None
    log: MetricsLog
    out_dir: Path | None = None
    epoch: int = 0
    visual_stage: int = 0
    text_stage: int = 0
    stage_acc: list[float] = field(default_factory=list)
    on_epoch: Callable[[dict], None] | None = None

    def checkpoint(self, name: str = "last.ckpt") -> None:
        if self.out_dir is None:
            return
        save_checkpoint(self.out_dir / name, self.model, self.cfg, epoch=self.epoch,
                        stages={"visual": self.visual_stage, "text": self.text_stage}, metrics=self.log.rows)


def run_epochs(state: TrainState, params, lr0: float, epochs: int, phase: str, stage: int,
               use_clc: bool, rng: np.random.Generator) -> None:
    plan = state.cfg.train
    n = len(state.train)
    if n == 0:
        raise ValueError("training set is empty")
    steps_per_epoch = math.ceil(n / plan.batch_size)
    total_steps = steps_per_epoch * epochs
    opt = AdamW(params, lr0, plan.betas, plan.adam_eps, plan.weight_decay, plan.grad_clip)
    step = 0
    for _ in range(epochs):
        t0 = time.time()
        perm = rng.permutation(n)
        sums = {"total": 0.0, "box": 0.0, "clc": 0.0, "rtcc": 0.0}
        lr = lr0
        for s in range(steps_per_epoch):
            batch = state.train.subset(perm[s * plan.batch_size:(s + 1) * plan.batch_size])
            parts = compute_losses(state.model, batch, state.cfg.loss, use_clc)
            try:
                loss = total_loss(parts)
            except TrainingError as exc:
                raise TrainingError(f"{exc} (phase {phase}, stage {stage}, epoch {state.epoch + 1}, step {s})") from exc
            opt.zero_grad()
            T.backward(loss)
            lr = cosine_lr(step, total_steps, lr0)
            opt.step(lr)
            step += 1
            w = len(batch) / n
            sums["total"] += float(loss.data) * w
            for k, v in parts.items():
                sums[k] += float(v.data) * w
        state.epoch += 1
        if state.val is not None and len(state.val):
            ev = evaluate(state.model, state.val, plan.eval_batch_size)
            acc, miou = ev["accuracy"], ev["miou"]
        else:
            acc = miou = float("nan")
        row = {"epoch": state.epoch, "phase": phase, "stage": stage, "lr": lr, "loss_total": sums["total"],
               "loss_box": sums["box"], "loss_clc": sums["clc"], "loss_rtcc": sums["rtcc"],
               "val_acc": acc, "val_miou": miou}
        state.log.append(row)
        state.checkpoint()
        logger.info("epoch %d %s/%d loss %.4f val_acc %.4f (%.1fs)", state.epoch, phase, stage, sums["total"],
                    acc, time.time() - t0)
        if state.on_epoch is not None:
            state.on_epoch(row)


def _grounding_params(model: HiVG, trainable: bool) -> list:
    params = model.grounding_parameters() + model.bridge_parameters()
    for p in params:
        p.requires_grad = trainable
    return params if trainable else []


def train_phase_a(state: TrainState, rng: np.random.Generator) -> None:
    cfg, model = state.cfg, state.model
    text_targets = model.text.lora_targets()
    sched = HiLoraSchedule(cfg.model.text_layers, 1)
    sched = advance_stage(text_targets, sched, model.lora_rng, cfg.model.lora_rank, cfg.model.lora_alpha)
    state.text_stage = sched.current_stage
    params = _grounding_params(model, True) + model.lora_parameters()
    run_epochs(state, params, cfg.train.phase_a_lr, cfg.train.phase_a_epochs, "A", 0,
               cfg.train.clc_phases == "both", rng)
    for layer in text_targets:
        merge_stage(layer)
    _record_stage(state)


def train_phase_b(state: TrainState, rng: np.random.Generator) -> None:
    cfg, model = state.cfg, state.model
    mode = cfg.train.lora_mode
    plans = cfg.train.stages
    groups = cfg.model.hilora_groups
    if mode == "hilora" and len(plans) != groups:
        raise ValueError(f"{len(plans)} stage plans for {groups} HiLoRA groups")
    targets = model.visual.lora_targets()
    # vanilla is a single group: its factors cover every layer from the first plan on
    sched = HiLoraSchedule(cfg.model.visual_layers, groups if mode == "hilora" else 1)
    live = not cfg.train.freeze_grounding_in_stages
    for j, sp in enumerate(plans, start=1):
        if mode == "none":
            params = _grounding_params(model, True)
        else:
            if mode == "hilora" or j == 1:
                sched = advance_stage(targets, sched, model.lora_rng, cfg.model.lora_rank, cfg.model.lora_alpha)
                state.visual_stage = sched.current_stage
            params = model.lora_parameters() + _grounding_params(model, live)
        if sp.epochs > 0 and params:
            run_epochs(state, params, sp.lr, sp.epochs, "B", j, True, rng)
        _record_stage(state)
    for layer in targets:
        merge_stage(layer)
    _grounding_params(model, True)


def _record_stage(state: TrainState) -> None:
    if state.val is not None and len(state.val):
        state.stage_acc.append(evaluate(state.model, state.val, state.cfg.train.eval_batch_size)["accuracy"])


@dataclass
class TrainResult:
    model: HiVG
    history: list[dict]
    stage_acc: list[float]
    seconds: float


def train(cfg: RunConfig, train_set: GroundingArrays, val_set: GroundingArrays | None = None,
          out_dir: str | Path | None = None, model: HiVG | None = None, phases: str = "AB",
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run phase A and/or phase B; ``stage_acc`` holds val accuracy after each phase/stage."""
    t0 = time.time()
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    _check_arrays(cfg, train_set)
    if val_set is not None:
        _check_arrays(cfg, val_set)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model = model if model is not None else HiVG(cfg.model, seed=cfg.seed)
    log = MetricsLog(out / "metrics.csv" if out is not None else None)
    state = TrainState(cfg, model, train_set, val_set, log, out, on_epoch=on_epoch)
    rng = np.random.default_rng([cfg.seed, 7])
    if "A" in phases:
        train_phase_a(state, rng)
    if "B" in phases:
        train_phase_b(state, rng)
    state.checkpoint("final.ckpt")
    return TrainResult(model, log.rows, state.stage_acc, time.time() - t0)


def _check_arrays(cfg: RunConfig, arrays: GroundingArrays) -> None:
    m = cfg.model
    if arrays.pixels.shape[1:] != (3, m.image_height, m.image_width):
        raise ValueError(f"dataset images {arrays.pixels.shape[1:]} do not match the model config")
    if arrays.tokens.shape[1] != m.max_text_len:
        raise ValueError(f"dataset token length {arrays.tokens.shape[1]} != max_text_len {m.max_text_len}")
    if arrays.masks.shape[1] != m.num_patches:
        raise ValueError("dataset patch masks do not match the patch grid")


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------
def _variant(cfg: RunConfig, seed: int, macb: bool, lora_mode: str) -> RunConfig:
    model = cfg.model if macb else replace(cfg.model, bridge_layers=())
    return replace(cfg, seed=seed, model=model, train=replace(cfg.train, lora_mode=lora_mode))


def _clone(model: HiVG) -> HiVG:
    import copy

    return copy.deepcopy(model)


GRID_CELLS = ((False, "none"), (False, "hilora"), (True, "none"), (True, "hilora"))


def run_grid(cfg: RunConfig, train_set: GroundingArrays, val_set: GroundingArrays,
             test_set: GroundingArrays | None, seeds: Sequence[int],
             cells: Sequence[tuple[bool, str]] = GRID_CELLS) -> list[dict]:
    """Train every (seed, macb, lora_mode) cell; phase A is shared by cells with the same macb flag."""
    results = []
    for seed in seeds:
        for macb in dict.fromkeys(m for m, _ in cells):
            base_cfg = _variant(cfg, seed, macb, "none")
            base = train(base_cfg, train_set, val_set, phases="A").model
            for mode in [mode for m, mode in cells if m == macb]:
                vcfg = _variant(cfg, seed, macb, mode)
                res = train(vcfg, train_set, val_set, model=_clone(base), phases="B")
                val = evaluate(res.model, val_set, cfg.train.eval_batch_size)["accuracy"]
                test = (evaluate(res.model, test_set, cfg.train.eval_batch_size)["accuracy"]
                        if test_set is not None and len(test_set) else float("nan"))
                results.append({"seed": seed, "macb": macb, "lora_mode": mode, "val_acc": val, "test_acc": test,
                                "stage_acc": res.stage_acc})
                logger.info("seed %d macb %s %s: val %.4f", seed, macb, mode, val)
    return results


def ablation_table(results: list[dict]) -> list[dict]:
    """Average the grid over seeds into the four (macb, hilora) rows."""
    rows = []
    for macb in (False, True):
        for mode in ("none", "hilora"):
            cell = [r for r in results if r["macb"] == macb and r["lora_mode"] == mode]
            if not cell:
                continue
            rows.append({"macb": int(macb), "hilora": int(mode == "hilora"),
                         "val_acc": float(np.mean([r["val_acc"] for r in cell])),
                         "test_acc": float(np.mean([r["test_acc"] for r in cell]))})
    return rows


def write_ablation_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in ABLATION_FIELDS})


def ablate(cfg: RunConfig, train_set, val_set, test_set, seeds: Sequence[int], out_csv: str | Path | None = None):
    results = run_grid(cfg, train_set, val_set, test_set, seeds)
    rows = ablation_table(results)
    if out_csv is not None:
        write_ablation_csv(rows, out_csv)
    return rows, results
