"""Training objectives: box regression, image-text contrast, region-text contrast."""
from __future__ import annotations

import math
import warnings
from typing import Mapping

import numpy as np

from . import tensor as T
from .config import LossWeights
from .module import Linear, Module
from .tensor import Tensor


class TrainingError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# Contrastive learning constraint
# ---------------------------------------------------------------------------
def _diag_nll(logits: Tensor) -> Tensor:
    n = logits.shape[0]
    logp = T.log_softmax(logits, axis=1)
    idx = np.arange(n)
    return 0.0 - T.mean(logp[idx, idx])  # subtraction keeps an exact zero positive


def clc(v: Tensor, t: Tensor, tau: float) -> Tensor:
    """Symmetric in-batch InfoNCE over L2-normalised image/text embeddings ``[N, D]``."""
    n = v.shape[0]
    if n == 0:
        raise ValueError("clc needs at least one pair")
    if t.shape != v.shape:
        raise ValueError(f"clc embeddings disagree: {v.shape} vs {t.shape}")
    sim = T.scale(T.matmul(t, T.transpose(v, (1, 0))), 1.0 / tau)  # sim[i, j] = <t_i, v_j> / tau
    t2i = _diag_nll(sim)
    i2t = _diag_nll(T.transpose(sim, (1, 0)))
    return T.scale(t2i + i2t, 0.5)


# ---------------------------------------------------------------------------
# Region-text contrastive constraint
# ---------------------------------------------------------------------------
def make_patch_mask(box, grid: tuple[int, int]) -> np.ndarray:
    """1 for each patch whose centre lies inside the (cx, cy, w, h) box, row-major."""
    cx, cy, w, h = (float(v) for v in box)
    gh, gw = grid
    if w <= 0 or h <= 0:
        warnings.warn(f"degenerate box {box}; patch mask is empty", stacklevel=2)
        return np.zeros(gh * gw)
    ys = (np.arange(gh) + 0.5) / gh
    xs = (np.arange(gw) + 0.5) / gw
    iny = (ys >= cy - h / 2) & (ys <= cy + h / 2)
    inx = (xs >= cx - w / 2) & (xs <= cx + w / 2)
    return (iny[:, None] & inx[None, :]).astype(np.float64).reshape(-1)


def focal_loss_from_logits(logits: Tensor, targets: np.ndarray, gamma: float = 2.0,
                           alpha: float | None = 0.25) -> Tensor:
    """Mean sigmoid focal loss; ``alpha=None`` disables class weighting."""
    m = targets.astype(logits.dtype)
    log_p = T.log_sigmoid(logits)
    log_1mp = T.log_sigmoid(-logits)
    ce = -(log_p * m + log_1mp * (1 - m))
    loss = ce
    if gamma:
        p = T.sigmoid(logits)
        p_t = p * m + (1 - p) * (1 - m)
        loss = loss * T.power(1 - p_t, gamma)
    if alpha is not None:
        loss = loss * Tensor((alpha * m + (1 - alpha) * (1 - m)).astype(logits.dtype))
    return T.mean(loss)


def focal_loss(probs: Tensor, targets: np.ndarray, gamma: float = 2.0, alpha: float | None = 0.25,
               eps: float = 1e-12) -> Tensor:
    """Focal loss on probabilities (clamped to ``[eps, 1 - eps]`` before the log)."""
    m = targets.astype(probs.dtype)
    p = T.clip(probs, eps, 1 - eps)
    p_t = p * m + (1 - p) * (1 - m)
    loss = -T.log(p_t)
    if gamma:
        loss = loss * T.power(1 - p_t, gamma)
    if alpha is not None:
        loss = loss * Tensor((alpha * m + (1 - alpha) * (1 - m)).astype(probs.dtype))
    return T.mean(loss)


def dice_loss(probs: Tensor, targets: np.ndarray, eps: float = 1.0) -> Tensor:
    """``1 - (2 sum(s m) + eps) / (sum s^2 + sum m^2 + eps)`` per row, averaged over rows."""
    m = targets.astype(probs.dtype)
    inter = T.sum_(probs * m, axis=-1)
    denom = T.sum_(probs * probs, axis=-1) + (m * m).sum(axis=-1)
    return T.mean(1 - (2 * inter + eps) / (denom + eps))


class RTCCHead(Module):
    """Visual-token MLP and learnable logit scale for region-text similarities."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32, init_scale: float = 10.0):
        self.fc1 = Linear(dim, dim, rng, dtype)
        self.fc2 = Linear(dim, dim, rng, dtype)
        self.log_scale = Tensor(np.array(math.log(init_scale), dtype=dtype), requires_grad=True)

    def logits(self, t_eos: Tensor, v_tokens: Tensor) -> Tensor:
        """``scale * cos(t_eos, MLP(v_i))`` for every visual token: ``[B, L_v]``."""
        proj = self.fc2(T.relu(self.fc1(v_tokens)))
        t = T.reshape(t_eos, (t_eos.shape[0], 1, t_eos.shape[-1]))
        cos = T.cosine_similarity(proj, t, axis=-1)
        return cos * T.exp(self.log_scale)

    def similarities(self, t_eos: Tensor, v_tokens: Tensor) -> Tensor:
        return T.sigmoid(self.logits(t_eos, v_tokens))


def rtcc_from_logits(logits: Tensor, mask: np.ndarray, weights: LossWeights) -> Tensor:
    focal = focal_loss_from_logits(logits, mask, weights.focal_gamma, weights.focal_alpha)
    dice = dice_loss(T.sigmoid(logits), mask, weights.dice_eps)
    return weights.focal * focal + weights.dice * dice


def rtcc(t_eos_g: Tensor, v_tokens_g: Tensor, mask: np.ndarray, head: RTCCHead, weights: LossWeights) -> Tensor:
    return rtcc_from_logits(head.logits(t_eos_g, v_tokens_g), mask, weights)


# ---------------------------------------------------------------------------
# Boxes
# ---------------------------------------------------------------------------
def cxcywh_to_xyxy(b: Tensor) -> Tensor:
    cx, cy, w, h = (b[..., i] for i in range(4))
    return T.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def giou(pred: Tensor, gt: Tensor) -> tuple[Tensor, Tensor]:
    """(GIoU, IoU) for cxcywh boxes along the last axis."""
    p, g = cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt)
    area_p = (p[..., 2] - p[..., 0]) * (p[..., 3] - p[..., 1])
    area_g = (g[..., 2] - g[..., 0]) * (g[..., 3] - g[..., 1])
    iw = T.relu(T.minimum(p[..., 2], g[..., 2]) - T.maximum(p[..., 0], g[..., 0]))
    ih = T.relu(T.minimum(p[..., 3], g[..., 3]) - T.maximum(p[..., 1], g[..., 1]))
    inter = iw * ih
    union = area_p + area_g - inter
    iou = inter / union
    cw = T.maximum(p[..., 2], g[..., 2]) - T.minimum(p[..., 0], g[..., 0])
    ch = T.maximum(p[..., 3], g[..., 3]) - T.minimum(p[..., 1], g[..., 1])
    hull = cw * ch
    return iou - (hull - union) / hull, iou


def box_iou_np(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """IoU of cxcywh boxes, numpy only (used for evaluation)."""
    p = np.concatenate([pred[..., :2] - pred[..., 2:] / 2, pred[..., :2] + pred[..., 2:] / 2], axis=-1)
    g = np.concatenate([gt[..., :2] - gt[..., 2:] / 2, gt[..., :2] + gt[..., 2:] / 2], axis=-1)
    iw = np.clip(np.minimum(p[..., 2], g[..., 2]) - np.maximum(p[..., 0], g[..., 0]), 0, None)
    ih = np.clip(np.minimum(p[..., 3], g[..., 3]) - np.maximum(p[..., 1], g[..., 1]), 0, None)
    inter = iw * ih
    union = pred[..., 2] * pred[..., 3] + gt[..., 2] * gt[..., 3] - inter
    return inter / union


def box_loss(pred: Tensor, gt, weights: LossWeights) -> Tensor:
    """``l1 * SmoothL1 + giou * (1 - GIoU)``; SmoothL1 summed over coordinates, both averaged over the batch."""
    gt = T.as_tensor(gt, dtype=pred.dtype)
    l1 = T.mean(T.sum_(T.smooth_l1(pred - gt, weights.smooth_l1_beta), axis=-1))
    g, _ = giou(pred, gt)
    return weights.l1 * l1 + weights.giou * T.mean(1 - g)


# ---------------------------------------------------------------------------
# Total
# ---------------------------------------------------------------------------
def total_loss(parts: Mapping[str, Tensor]) -> Tensor:
    total = None
    for name, part in parts.items():
        if not np.all(np.isfinite(part.data)):
            raise TrainingError(f"loss component {name!r} is not finite")
        total = part if total is None else total + part
    if total is None:
        return Tensor(np.zeros(()))
    return total
