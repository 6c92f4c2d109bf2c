"""Attention, feed-forward and pre-norm transformer blocks."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .hilora import AdaptedLinear
from .module import LayerNorm, Linear, Module
from .tensor import Tensor

NEG_INF = -1e9


def key_padding_bias(valid: np.ndarray, dtype) -> np.ndarray:
    """Additive attention bias of shape [B, 1, 1, Tk] from a boolean key mask."""
    return np.where(valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def causal_bias(n: int, dtype) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF), k=1).astype(dtype)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_h) + bias) v over [B, h, T, d_h] inputs."""
    dh = q.shape[-1]
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
    if bias is not None:
        scores = scores + Tensor(bias)
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v), weights


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, make_linear: Callable[[int, int], Module], kv_dim: int | None = None,
                 make_out: Callable[[int, int], Module] | None = None):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.q = make_linear(dim, dim)
        self.k = make_linear(kv_dim, dim)
        self.v = make_linear(kv_dim, dim)
        self.out = (make_out or make_linear)(dim, dim)
        self.last_weights: np.ndarray | None = None

    def forward(self, x: Tensor, context: Tensor | None = None, bias: np.ndarray | None = None) -> Tensor:
        context = x if context is None else context
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(context), self.heads)
        v = _split_heads(self.v(context), self.heads)
        out, weights = scaled_dot_attention(q, k, v, bias)
        self.last_weights = weights.data
        return self.out(_merge_heads(out))


class MLP(Module):
    def __init__(self, dim: int, hidden: int, make_linear: Callable[[int, int], Module], activation=T.gelu):
        self.fc1 = make_linear(dim, hidden)
        self.fc2 = make_linear(hidden, dim)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.activation(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block.

    With ``adapted=True`` the Q/K/V and feed-forward projections are frozen
    :class:`AdaptedLinear` layers and everything else is frozen too; with
    ``adapted=False`` every weight is a trainable Xavier-initialised linear.
    ``inject`` (a callable on the post-attention state) lets the cross-modal
    bridge add its output to the residual stream before the feed-forward
    sublayer. ``residual_scale`` multiplies the initial attention-output and
    second feed-forward weights.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int, layer_index: int, rng: np.random.Generator,
                 dtype=np.float32, adapted: bool = True, residual_scale: float = 1.0):
        self.layer_index = layer_index
        self.adapted = adapted
        if adapted:
            def lora_linear(i, o):
                return AdaptedLinear(i, o, layer_index, rng, dtype)

            def frozen_linear(i, o):
                return Linear(i, o, rng, dtype, init="lecun").set_trainable(False)
        else:
            def lora_linear(i, o):
                return Linear(i, o, rng, dtype)

            frozen_linear = lora_linear
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, lora_linear, make_out=frozen_linear)
        self.ln2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, dim * mlp_ratio, lora_linear)
        if adapted:
            self.ln1.set_trainable(False)
            self.ln2.set_trainable(False)
        if residual_scale != 1.0:
            for lin in (self.attn.out, self.mlp.fc2):
                lin.weight.data *= lin.weight.dtype.type(residual_scale)

    def forward(self, x: Tensor, bias: np.ndarray | None = None,
                inject: Callable[[Tensor], Tensor] | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), bias=bias)
        if inject is not None:
            x = x + inject(x)
        return x + self.mlp(self.ln2(x))
