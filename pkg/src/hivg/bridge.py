"""Multi-layer adaptive cross-modal bridge.

Each bridged visual block owns a sample-agnostic weight tensor ``w`` of shape
``[n, L_l, H_l]`` that residually rescales the ``n`` tapped text levels
(``w * f + f``), a projection of the per-token concatenated levels into the
visual width, and a cross-attention + FFN whose output is added to the
block's residual stream right after self-attention.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import MultiHeadAttention, key_padding_bias
from .module import LayerNorm, Linear, Module
from .tensor import Tensor


class BridgeShapeError(ValueError):
    pass


def calibrate_text(levels: Tensor, w: Tensor) -> Tensor:
    """``w * f + f`` per level; ``levels`` is ``[n, L, H]`` or ``[B, n, L, H]``."""
    if levels.shape[-3:] != w.shape:
        raise BridgeShapeError(f"text levels {levels.shape} do not match sample-agnostic weights {w.shape}")
    return levels * w + levels


def project_text(calibrated: Tensor, proj: Linear) -> Tensor:
    """Concatenate the levels per token along the hidden axis, then project."""
    if calibrated.ndim == 3:
        n, L, H = calibrated.shape
        flat = T.reshape(T.transpose(calibrated, (1, 0, 2)), (L, n * H))
    else:
        b, n, L, H = calibrated.shape
        flat = T.reshape(T.transpose(calibrated, (0, 2, 1, 3)), (b, L, n * H))
    return proj(flat)


class BridgeLayer(Module):
    def __init__(self, index: int, n_levels: int, text_len: int, text_width: int, visual_width: int,
                 heads: int, ffn_ratio: int, rng: np.random.Generator, dtype=np.float32):
        self.index = index
        self.w = Tensor(np.zeros((n_levels, text_len, text_width), dtype=dtype), requires_grad=True)
        self.proj = Linear(n_levels * text_width, visual_width, rng, dtype, bias=False)
        self.ln = LayerNorm(visual_width, dtype)
        self.cross = MultiHeadAttention(visual_width, heads, lambda i, o: Linear(i, o, rng, dtype))
        self.fc1 = Linear(visual_width, visual_width * ffn_ratio, rng, dtype)
        self.fc2 = Linear(visual_width * ffn_ratio, visual_width, rng, dtype)

    @property
    def visual_width(self) -> int:
        return self.fc2.out_features

    def text_features(self, levels: Tensor) -> Tensor:
        return project_text(calibrate_text(levels, self.w), self.proj)

    def forward(self, h_sa: Tensor, text_ml: Tensor, text_valid: np.ndarray | None = None) -> Tensor:
        """Semantic-aware visual features ``FFN(CrossAttn(LN(h_sa), text))``."""
        if h_sa.shape[-1] != self.visual_width or text_ml.shape[-1] != self.visual_width:
            raise BridgeShapeError(
                f"bridge width {self.visual_width} does not match h_sa {h_sa.shape} / text {text_ml.shape}"
            )
        bias = None if text_valid is None else key_padding_bias(text_valid, h_sa.dtype)
        attended = self.cross(self.ln(h_sa), context=text_ml, bias=bias)
        return self.fc2(T.gelu(self.fc1(attended)))


def bridge_forward(layer: BridgeLayer, h_sa: Tensor, text_ml: Tensor, text_valid: np.ndarray | None = None) -> Tensor:
    return layer.forward(h_sa, text_ml, text_valid)
