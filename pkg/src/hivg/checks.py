"""Self-verification suites behind the ``gradcheck`` and ``merge-check`` commands.

Both return a list of :class:`CheckResult`; callers decide how to print and
what exit code to use.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .bridge import BridgeLayer
from .config import LossWeights, ModelConfig
from .hilora import (AdaptedLinear, HiLoraSchedule, advance_stage, closed_form_parameter_count, lora_parameter_count,
                     merge_stage)
from .losses import box_loss, clc, dice_loss, focal_loss, focal_loss_from_logits, giou, rtcc_from_logits, RTCCHead
from .model import HiVG
from .tensor import Tensor

GRAD_TOL = 1e-4
MERGE_TOL_32 = 1e-5


@dataclass
class CheckResult:
    component: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.component:<28} {self.value:.3e}  (tol {self.tolerance:.0e}){extra}"


def _t(rng: np.random.Generator, *shape, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _shape(rng: np.random.Generator, ndim: int = 2) -> tuple[int, ...]:
    return tuple(int(v) for v in rng.integers(1, 5, size=ndim))


def _away_from(x: Tensor, points, margin: float = 1e-2) -> None:
    """Nudge entries off non-differentiable points so FD stays meaningful."""
    for p in points:
        near = np.abs(x.data - p) < margin
        x.data[near] += 2 * margin


# ---------------------------------------------------------------------------
# Gradient suite
# ---------------------------------------------------------------------------
def _primitive_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]]:
    def unary(op, lo=-1.0, hi=1.0, kinks=()):
        def make(rng):
            x = _t(rng, *_shape(rng, 3), lo=lo, hi=hi)
            _away_from(x, kinks)
            w = rng.standard_normal(x.shape)
            return (lambda: T.sum_(op(x) * w)), [x]
        return make

    def binary(op, lo=-1.0, hi=1.0):
        def make(rng):
            s = _shape(rng, 3)
            a, b = _t(rng, *s, lo=lo, hi=hi), _t(rng, *s, lo=lo, hi=hi)
            w = rng.standard_normal(s)
            return (lambda: T.sum_(op(a, b) * w)), [a, b]
        return make

    def matmul(rng):
        b, m, k, n = (int(v) for v in rng.integers(1, 5, size=4))
        x, y = _t(rng, b, m, k), _t(rng, b, k, n)
        w = rng.standard_normal((b, m, n))
        return (lambda: T.sum_(T.matmul(x, y) * w)), [x, y]

    def linear(rng):
        m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
        x, W, bias = _t(rng, 2, m, k), _t(rng, n, k), _t(rng, n)
        w = rng.standard_normal((2, m, n))
        return (lambda: T.sum_(T.linear(x, W, bias) * w)), [x, W, bias]

    def softmax(rng):
        x = _t(rng, *_shape(rng, 3), lo=-3, hi=3)
        w = rng.standard_normal(x.shape)
        return (lambda: T.sum_(T.softmax(x, axis=-1) * w)), [x]

    def log_softmax(rng):
        x = _t(rng, *_shape(rng, 3), lo=-3, hi=3)
        w = rng.standard_normal(x.shape)
        return (lambda: T.sum_(T.log_softmax(x, axis=-1) * w)), [x]

    def layernorm(rng):
        s = _shape(rng, 2)
        s = (s[0], s[1] + 1)
        x, g, b = _t(rng, *s), _t(rng, s[-1]), _t(rng, s[-1])
        w = rng.standard_normal(s)
        return (lambda: T.sum_(T.layernorm(x, g, b, 1e-5) * w)), [x, g, b]

    def concat(rng):
        a, b = _t(rng, 2, int(rng.integers(1, 4))), _t(rng, 2, int(rng.integers(1, 4)))
        w = rng.standard_normal((2, a.shape[1] + b.shape[1]))
        return (lambda: T.sum_(T.concat([a, b], axis=1) * w)), [a, b]

    def stack(rng):
        s = _shape(rng, 2)
        a, b = _t(rng, *s), _t(rng, *s)
        w = rng.standard_normal((2, *s))
        return (lambda: T.sum_(T.stack([a, b], axis=0) * w)), [a, b]

    def reshape_transpose(rng):
        x = _t(rng, 2, 3, 4)
        w = rng.standard_normal((4, 6))
        return (lambda: T.sum_(T.reshape(T.transpose(x, (2, 0, 1)), (4, 6)) * w)), [x]

    def getitem(rng):
        x = _t(rng, 4, 5)
        idx = rng.integers(0, 4, size=6)
        w = rng.standard_normal((6, 5))
        return (lambda: T.sum_(x[idx] * w) + T.sum_(x[1:3, ::2])), [x]

    def reductions(rng):
        x = _t(rng, *_shape(rng, 3))
        w = rng.standard_normal(x.shape[:-1])
        return (lambda: T.sum_(T.mean(x, axis=-1) * w) + T.sum_(x, axis=None)), [x]

    def embedding(rng):
        W = _t(rng, 6, 3)
        ids = rng.integers(0, 6, size=(2, 4))
        w = rng.standard_normal((2, 4, 3))
        return (lambda: T.sum_(T.embedding(W, ids) * w)), [W]

    def l2n(rng):
        x = _t(rng, *_shape(rng, 2), lo=0.2, hi=1.0)
        w = rng.standard_normal(x.shape)
        return (lambda: T.sum_(T.l2_normalize(x) * w)), [x]

    def cosine(rng):
        s = _shape(rng, 2)
        a, b = _t(rng, *s, lo=0.1, hi=1), _t(rng, *s, lo=0.1, hi=1)
        w = rng.standard_normal(s[:-1])
        return (lambda: T.sum_(T.cosine_similarity(a, b) * w)), [a, b]

    return {
        "add": binary(lambda a, b: a + b),
        "sub": binary(lambda a, b: a - b),
        "mul": binary(lambda a, b: a * b),
        "div": binary(lambda a, b: a / b, lo=0.5, hi=2.0),
        "scale": unary(lambda x: T.scale(x, -1.7)),
        "power": unary(lambda x: T.power(x, 3.0), lo=0.2, hi=1.5),
        "exp": unary(T.exp),
        "log": unary(T.log, lo=0.2, hi=2.0),
        "sigmoid": unary(T.sigmoid, lo=-3, hi=3),
        "log_sigmoid": unary(T.log_sigmoid, lo=-3, hi=3),
        "tanh": unary(T.tanh),
        "gelu": unary(T.gelu, lo=-3, hi=3),
        "relu": unary(T.relu, kinks=(0.0,)),
        "smooth_l1": unary(lambda x: T.smooth_l1(x, 1.0), lo=-2, hi=2, kinks=(-1.0, 1.0)),
        "matmul": matmul,
        "linear": linear,
        "softmax": softmax,
        "log_softmax": log_softmax,
        "layernorm": layernorm,
        "concat": concat,
        "stack": stack,
        "reshape/transpose": reshape_transpose,
        "getitem": getitem,
        "sum/mean": reductions,
        "embedding": embedding,
        "l2_normalize": l2n,
        "cosine_similarity": cosine,
    }


def _bridge_case(rng: np.random.Generator):
    layer = BridgeLayer(1, 2, 3, 4, 8, 2, 2, rng, np.float64)
    layer.w.data[:] = rng.uniform(-0.5, 0.5, size=layer.w.shape)
    levels = _t(rng, 2, 2, 3, 4)
    h = _t(rng, 2, 5, 8)
    valid = np.array([[True, True, False], [True, True, True]])
    w = rng.standard_normal((2, 5, 8))
    params = [layer.w, layer.proj.weight, layer.cross.q.weight, layer.cross.k.weight, layer.fc1.weight, layer.fc2.bias]
    return (lambda: T.sum_(layer(h, layer.text_features(levels), valid) * w)), [levels, h, *params]


def _loss_cases() -> dict[str, Callable]:
    weights = LossWeights()

    def clc_case(rng):
        v, t = _t(rng, 4, 3), _t(rng, 4, 3)
        return (lambda: clc(T.l2_normalize(v), T.l2_normalize(t), 0.5)), [v, t]

    def focal_case(rng):
        z = _t(rng, 3, 6, lo=-2, hi=2)
        m = rng.random((3, 6)) < 0.4
        return (lambda: focal_loss_from_logits(z, m, 2.0, 0.25)), [z]

    def focal_prob_case(rng):
        p = _t(rng, 3, 6, lo=0.1, hi=0.9)
        m = rng.random((3, 6)) < 0.4
        return (lambda: focal_loss(p, m, 2.0, 0.25)), [p]

    def dice_case(rng):
        p = _t(rng, 3, 6, lo=0.05, hi=0.95)
        m = rng.random((3, 6)) < 0.4
        return (lambda: dice_loss(p, m, 1.0)), [p]

    def rtcc_case(rng):
        head = RTCCHead(4, rng, np.float64, 5.0)
        t, v = _t(rng, 2, 4), _t(rng, 2, 6, 4)
        m = rng.random((2, 6)) < 0.4
        return (lambda: rtcc_from_logits(head.logits(t, v), m, weights)), [t, v, head.fc1.weight, head.log_scale]

    def box_case(rng):
        # overlapping boxes with coordinate gaps far from the SmoothL1 kink
        gt = rng.uniform(0.35, 0.65, size=(3, 4))
        gt[:, 2:] = rng.uniform(0.2, 0.4, size=(3, 2))
        pred = Tensor(gt + rng.uniform(-0.08, 0.08, size=(3, 4)), requires_grad=True, dtype=np.float64)
        return (lambda: box_loss(pred, gt, weights)), [pred]

    def giou_case(rng):
        a = Tensor(np.array([[0.5, 0.5, 0.4, 0.3], [0.3, 0.6, 0.2, 0.2]]) + rng.uniform(-0.02, 0.02, (2, 4)),
                   requires_grad=True, dtype=np.float64)
        b = Tensor(np.array([[0.55, 0.45, 0.3, 0.5], [0.7, 0.3, 0.2, 0.3]]), requires_grad=True, dtype=np.float64)
        return (lambda: T.sum_(giou(a, b)[0])), [a, b]

    return {"clc": clc_case, "focal": focal_case, "focal_prob": focal_prob_case, "dice": dice_case,
            "rtcc": rtcc_case, "box_loss": box_case, "giou": giou_case}


def tiny_model_config() -> ModelConfig:
    return ModelConfig(image_height=16, image_width=16, patch_size=8, visual_layers=2, visual_width=8,
                       visual_heads=2, text_layers=2, text_width=8, text_heads=2, ground_layers=1, ground_width=8,
                       ground_heads=2, mlp_ratio=2, visual_taps=(1, 2), bridge_layers=(2,), bridge_heads=2,
                       bridge_ffn_ratio=1, max_text_len=6, lora_rank=2, hilora_groups=2, clc_dim=4,
                       dtype="float64")


def _end_to_end_case(rng: np.random.Generator):
    from .data import EOS, SOS, TOKEN_ID

    cfg = tiny_model_config()
    model = HiVG(cfg, seed=int(rng.integers(1 << 30)))
    for layer in model.visual.lora_targets() + model.text.lora_targets():
        f = layer.attach_fresh(cfg.lora_rank, cfg.lora_alpha, 1, rng)
        f.B.data[:] = rng.normal(0, 0.1, f.B.shape)
    for b in model.visual.bridges.values():
        b.w.data[:] = rng.uniform(-0.3, 0.3, b.w.shape)
    pixels = rng.random((2, 3, 16, 16))
    tokens = np.zeros((2, 6), dtype=np.int64)
    tokens[:, 0] = TOKEN_ID[SOS]
    tokens[0, 1:3] = [4, 10]
    tokens[0, 3] = TOKEN_ID[EOS]
    tokens[1, 1:4] = [5, 7, 11]
    tokens[1, 4] = TOKEN_ID[EOS]
    gt = np.array([[0.4, 0.5, 0.3, 0.4], [0.6, 0.4, 0.4, 0.3]])
    masks = np.array([[1, 0, 1, 0], [0, 1, 0, 0]])
    weights = LossWeights(tau=0.5)

    def f():
        out = model(pixels, tokens)
        return (box_loss(out.box, gt, weights) + clc(out.clc_v, out.clc_t, weights.tau)
                + rtcc_from_logits(out.rtcc_logits, masks, weights))

    vis = model.visual.lora_targets()[0].factors[0]
    txt = model.text.lora_targets()[-1].factors[0]
    bridge = next(iter(model.visual.bridges.values()))
    params = [model.reg_token, model.perceiver.weight, model.box_head[2].weight, vis.A, vis.B, txt.A,
              bridge.w, bridge.proj.weight, model.rtcc_head.log_scale]
    return f, params


def run_gradcheck(seed: int = 0, trials: int = 20, h: float = 1e-5, tol: float = GRAD_TOL) -> list[CheckResult]:
    """FD-vs-analytic gradients for every primitive (``trials`` random shapes each), bridge, losses, and a tiny model."""
    rng = np.random.default_rng(seed)
    results = []
    groups: list[tuple[str, Callable, int]] = [(k, v, trials) for k, v in _primitive_cases().items()]
    groups.append(("bridge_forward", _bridge_case, 3))
    groups += [(f"loss:{k}", v, 5) for k, v in _loss_cases().items()]
    groups.append(("end_to_end", _end_to_end_case, 1))
    for name, make, n in groups:
        worst = 0.0
        for _ in range(n):
            f, inputs = make(rng)
            worst = max(worst, T.gradcheck(f, inputs, h))
        results.append(CheckResult(name, worst, tol, bool(worst < tol)))
    return results


# ---------------------------------------------------------------------------
# HiLoRA merge suite
# ---------------------------------------------------------------------------
def _random_stack(rng: np.random.Generator, dtype) -> tuple[list[AdaptedLinear], HiLoraSchedule, int]:
    groups = int(rng.integers(1, 4))
    total = groups * int(rng.integers(1, 4))
    d, k = (int(v) for v in rng.integers(4, 17, size=2))
    rank = int(rng.integers(1, min(d, k)))
    layers = []
    for l in range(1, total + 1):
        for _ in range(int(rng.integers(1, 3))):
            layers.append(AdaptedLinear(k, d, l, rng, dtype))
    return layers, HiLoraSchedule(total, groups), rank


def run_merge_check(seed: int = 0, configs: int = 50, inputs: int = 100) -> list[CheckResult]:
    """Fresh-factor identity, merge equivalence, freeze semantics and parameter accounting."""
    rng = np.random.default_rng(seed)
    worst_merge = 0.0
    identity_ok = freeze_ok = count_ok = True
    details = []
    for c in range(configs):
        layers, sched, rank = _random_stack(rng, np.float32)
        alpha = float(rng.uniform(0.5, 32))
        for _ in range(sched.groups):
            k = layers[0].in_features
            x = Tensor(rng.standard_normal((inputs, k)).astype(np.float32))
            for l in layers:
                merge_stage(l)
            before = [l(x).data.copy() for l in layers]
            sched = advance_stage(layers, sched, rng, rank, alpha)
            after_fresh = [l(x).data for l in layers]
            if not all(np.array_equal(a, b) for a, b in zip(before, after_fresh)):
                identity_ok = False
                details.append(f"config {c}: fresh factor changed output")
            # give every live factor a trained-looking update (|delta W| about 0.05 of |W0|)
            for l in layers:
                for f in l.factors:
                    std = 0.05 / (f.scaling * np.sqrt(f.rank))
                    f.B.data[:] = rng.normal(0, std, f.B.shape).astype(np.float32)
            pre = [l(x).data.copy() for l in layers]
            # freeze semantics: one backward reaches only live factors in covered layers
            loss = None
            for l in layers:
                term = T.sum_(l(Tensor(x.data)) * Tensor(rng.standard_normal((inputs, l.out_features)).astype(np.float32)))
                loss = term if loss is None else loss + term
            for l in layers:
                l.weight.grad = None
            T.backward(loss)
            for l in layers:
                if l.weight.grad is not None or l.weight.requires_grad:
                    freeze_ok = False
                covered = sched.covers(l.layer_index)
                if covered != bool(l.factors):
                    freeze_ok = False
                for f in l.factors:
                    if f.A.grad is None or f.B.grad is None:
                        freeze_ok = False
                    f.A.grad = f.B.grad = None
            if lora_parameter_count(layers) != closed_form_parameter_count(layers, sched, rank):
                count_ok = False
            snapshot = [(l.weight.data.copy(), list(l.factors)) for l in layers]
            for l in layers:
                merge_stage(l)
            post = [l(x).data for l in layers]
            for a, b in zip(pre, post):
                worst_merge = max(worst_merge, float(np.max(np.abs(a - b))))
            # restore live factors so the next advance merges them as the schedule expects
            for l, (w, fs) in zip(layers, snapshot):
                l.weight.data = w
                l.factors = fs
    return [
        CheckResult("fresh_factor_identity", 0.0 if identity_ok else 1.0, 0.0, identity_ok, "; ".join(details[:3])),
        CheckResult("merge_equivalence", worst_merge, MERGE_TOL_32, worst_merge < MERGE_TOL_32),
        CheckResult("freeze_semantics", 0.0 if freeze_ok else 1.0, 0.0, freeze_ok),
        CheckResult("parameter_count", 0.0 if count_ok else 1.0, 0.0, count_ok),
    ]
