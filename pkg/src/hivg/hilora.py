"""Hierarchical low-rank adaptation.

An :class:`AdaptedLinear` keeps a frozen base weight ``W0`` of shape
``[d, k]`` and a list of stage-tagged :class:`LoraFactor` pairs. Its forward is
``W0 x + sum_f (alpha/r) B_f A_f x + bias``.

Layers ``1..L`` are split into ``G`` equal groups; layer ``l`` belongs to group
``ceil(l*G/L)``. At stage ``j`` every target in layers ``l <= j*L/G`` carries
a trainable factor. Stages are realised merge-then-fresh: entering stage
``j+1`` folds every live factor into ``W0`` and attaches new zero-``B`` factors
to the newly covered prefix of layers, so the effective weight of a layer in
group ``g`` at stage ``j`` is ``W0 + sum_{k=g..j} B_k A_k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .module import Module, lecun_normal
from .tensor import Tensor


class LoraShapeError(ValueError):
    pass


class ScheduleError(RuntimeError):
    pass


class LoraFactor(Module):
    """One rank-``r`` update ``(alpha/r) B A`` with A ``[r, k]`` and B ``[d, r]``."""

    def __init__(self, A: np.ndarray, B: np.ndarray, stage: int, alpha: float, trainable: bool = True):
        r, k = A.shape
        d, r2 = B.shape
        if r != r2:
            raise LoraShapeError(f"factor ranks disagree: A {A.shape}, B {B.shape}")
        self.A = Tensor(A, requires_grad=trainable)
        self.B = Tensor(B, requires_grad=trainable)
        self.stage = int(stage)
        self.rank = int(r)
        self.alpha = float(alpha)

    @classmethod
    def fresh(cls, d: int, k: int, rank: int, alpha: float, stage: int, rng: np.random.Generator, dtype) -> "LoraFactor":
        # A ~ N(0, 1/k), B = 0 so the update starts at exactly zero.
        A = (rng.standard_normal((rank, k)) / math.sqrt(k)).astype(dtype)
        B = np.zeros((d, rank), dtype=dtype)
        return cls(A, B, stage, alpha)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def trainable(self) -> bool:
        return self.A.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.A.requires_grad = flag
        self.B.requires_grad = flag

    def delta(self) -> np.ndarray:
        return (self.B.data @ self.A.data) * self.B.dtype.type(self.scaling)


class AdaptedLinear(Module):
    """Frozen linear map with stackable low-rank updates; biases are never adapted."""

    def __init__(self, in_features: int, out_features: int, layer_index: int, rng: np.random.Generator,
                 dtype=np.float32, bias: bool = True):
        self.weight = Tensor(lecun_normal(rng, out_features, in_features, dtype), requires_grad=False)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=False) if bias else None
        self.layer_index = int(layer_index)
        self.factors: list[LoraFactor] = []

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def set_trainable(self, flag: bool) -> "AdaptedLinear":
        # W0 and bias stay frozen regardless; only factors follow the flag.
        for f in self.factors:
            f.trainable = flag
        return self

    def attach(self, factor: LoraFactor) -> LoraFactor:
        d, k = self.weight.shape
        if factor.A.shape[1] != k or factor.B.shape[0] != d:
            raise LoraShapeError(
                f"factor A {factor.A.shape} / B {factor.B.shape} does not fit base weight {self.weight.shape}"
            )
        if factor.rank >= min(d, k):
            raise LoraShapeError(f"rank {factor.rank} must be below min(d, k) = {min(d, k)}")
        if any(f.stage == factor.stage for f in self.factors):
            raise ScheduleError(f"layer {self.layer_index} already has a stage-{factor.stage} factor")
        self.factors.append(factor)
        return factor

    def attach_fresh(self, rank: int, alpha: float, stage: int, rng: np.random.Generator) -> LoraFactor:
        d, k = self.weight.shape
        return self.attach(LoraFactor.fresh(d, k, rank, alpha, stage, rng, self.weight.dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise LoraShapeError(f"input last dim {x.shape[-1]} != k = {self.in_features}")
        out = T.linear(x, self.weight, self.bias)
        for f in self.factors:
            out = out + T.scale(T.linear(T.linear(x, f.A), f.B), f.scaling)
        return out

    def effective_weight(self) -> np.ndarray:
        w = self.weight.data.copy()
        for f in self.factors:
            w = w + f.delta()
        return w


def lora_forward(layer: AdaptedLinear, x: Tensor) -> Tensor:
    return layer.forward(x)


def merge_stage(layer: AdaptedLinear) -> None:
    """Fold every factor into the base weight and drop the factor list."""
    if not layer.factors:
        return
    # accumulate in float64 so a 32-bit merge rounds only once
    w = layer.weight.data.astype(np.float64)
    for f in layer.factors:
        w += (f.B.data.astype(np.float64) @ f.A.data.astype(np.float64)) * f.scaling
    layer.weight.data = w.astype(layer.weight.dtype)
    layer.factors = []


@dataclass
class HiLoraSchedule:
    total_layers: int
    groups: int
    current_stage: int = 0
    stage_lrs: tuple[float, ...] = ()
    stage_epochs: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.total_layers <= 0 or self.groups <= 0:
            raise ScheduleError("total_layers and groups must be positive")
        if self.total_layers % self.groups:
            raise ScheduleError(f"groups={self.groups} must divide total_layers={self.total_layers}")
        if not 0 <= self.current_stage <= self.groups:
            raise ScheduleError(f"stage {self.current_stage} outside [0, {self.groups}]")

    @property
    def layers_per_group(self) -> int:
        return self.total_layers // self.groups

    def group_of(self, layer: int) -> int:
        if not 1 <= layer <= self.total_layers:
            raise ScheduleError(f"layer {layer} outside [1, {self.total_layers}]")
        return -(-layer * self.groups // self.total_layers)

    def covers(self, layer: int, stage: int | None = None) -> bool:
        j = self.current_stage if stage is None else stage
        return layer * self.groups <= j * self.total_layers

    def covered_layers(self, stage: int | None = None) -> list[int]:
        return [l for l in range(1, self.total_layers + 1) if self.covers(l, stage)]

    def stage_boundaries(self) -> list[int]:
        return [j * self.layers_per_group for j in range(1, self.groups + 1)]


def advance_stage(layers: Sequence[AdaptedLinear], schedule: HiLoraSchedule, rng: np.random.Generator,
                  rank: int, alpha: float) -> HiLoraSchedule:
    """Merge the live stage into the base weights and open the next one."""
    if schedule.current_stage >= schedule.groups:
        raise ScheduleError(f"already at final stage {schedule.groups}")
    for layer in layers:
        merge_stage(layer)
    nxt = replace(schedule, current_stage=schedule.current_stage + 1)
    for layer in layers:
        if nxt.covers(layer.layer_index):
            layer.attach_fresh(rank, alpha, nxt.current_stage, rng)
    return nxt


def lora_target_set(block) -> list[AdaptedLinear]:
    """Q, K, V projections and both feed-forward linears of an adapted block.

    The attention output projection is not a target. Blocks built from plain
    trainable linears (the grounding encoder) yield no targets.
    """
    candidates = [block.attn.q, block.attn.k, block.attn.v, block.mlp.fc1, block.mlp.fc2]
    return [c for c in candidates if isinstance(c, AdaptedLinear)]


def collect_targets(blocks: Iterable) -> list[AdaptedLinear]:
    out: list[AdaptedLinear] = []
    for block in blocks:
        out.extend(lora_target_set(block))
    return out


def lora_parameter_count(layers: Iterable[AdaptedLinear], trainable_only: bool = True) -> int:
    return sum(f.A.size + f.B.size for layer in layers for f in layer.factors if f.trainable or not trainable_only)


def closed_form_parameter_count(layers: Iterable[AdaptedLinear], schedule: HiLoraSchedule, rank: int) -> int:
    return sum(rank * (l.out_features + l.in_features) for l in layers if schedule.covers(l.layer_index))
