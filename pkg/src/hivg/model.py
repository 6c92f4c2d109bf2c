"""Visual grounding network: two frozen encoders, bridge, grounding encoder, heads.

Grounding encoder input layout (length ``2 + L_v + L_l``)::

    [REG, CLS, g_v^1 .. g_v^{L_v}, g_l^1 .. g_l^{L_l}]

``g_v`` (and CLS) come from the multi-level visual perceiver; ``g_l`` is a
linear projection of the final text layer only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bridge import BridgeLayer
from .config import ModelConfig
from .data import EOS, TOKEN_ID, DataError
from .hilora import AdaptedLinear, collect_targets
from .layers import Block, causal_bias, key_padding_bias
from .losses import RTCCHead
from .module import LayerNorm, Linear, Module
from .tensor import Tensor


class ModelConfigError(ValueError):
    pass


class TokenError(DataError):
    pass


def _frozen(shape, rng: np.random.Generator, dtype, std: float) -> Tensor:
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=False)


def _depth_scale(depth: int) -> float:
    # 1/sqrt(2 * depth) on residual outputs keeps the frozen random stacks close to their
    # input embedding, so image and token content survives to the deep taps
    return (2 * depth) ** -0.5


def sincos_2d(grid: tuple[int, int], dim: int) -> np.ndarray:
    """Fixed 2D sine-cosine table ``[gh*gw, dim]``; half the channels encode y, half x."""
    gh, gw = grid
    if dim % 4:
        raise ModelConfigError(f"sin-cos position table needs dim divisible by 4, got {dim}")
    q = dim // 4
    freqs = 1.0 / (100.0 ** (np.arange(q) / q))
    ys, xs = np.meshgrid(np.arange(gh) + 0.5, np.arange(gw) + 0.5, indexing="ij")
    ay = (ys.reshape(-1, 1) / gh) * 2 * np.pi * freqs
    ax = (xs.reshape(-1, 1) / gw) * 2 * np.pi * freqs
    return np.concatenate([np.sin(ay), np.cos(ay), np.sin(ax), np.cos(ax)], axis=1)


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, (H/P)(W/P), P*P*C], patches row-major."""
    b, c, h, w = pixels.shape
    x = pixels.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 3, 5, 1).reshape(b, (h // patch) * (w // patch), patch * patch * c)


class VisualEncoder(Module):
    """Frozen ViT whose blocks listed in ``bridge_layers`` host a cross-modal bridge."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, bridge_rng: np.random.Generator):
        dt = cfg.np_dtype
        d = cfg.visual_width
        p = cfg.patch_size
        self.cfg = cfg
        self.patch_embed = Linear(3 * p * p, d, rng, dt, bias=False, init="lecun").set_trainable(False)
        # CLIP-style init scale width^-0.5 keeps image content visible next to position
        self.cls = _frozen((d,), rng, dt, d ** -0.5)
        pos = _frozen((cfg.num_patches + 1, d), rng, dt, d ** -0.5)
        # stand-in for pretrained structure: a smooth patch-position table at the same scale
        pos.data[1:] = (sincos_2d(cfg.grid, d) * d ** -0.5 * np.sqrt(2.0)).astype(dt)
        self.pos = pos
        self.ln_pre = LayerNorm(d, dt).set_trainable(False)
        self.blocks = [Block(d, cfg.visual_heads, cfg.mlp_ratio, i + 1, rng, dt, adapted=True,
                             residual_scale=_depth_scale(cfg.visual_layers))
                       for i in range(cfg.visual_layers)]
        self.ln_post = LayerNorm(d, dt).set_trainable(False)
        n_levels = len(cfg.text_tap_layers)
        self.bridges = {
            str(c): BridgeLayer(c, n_levels, cfg.max_text_len, cfg.text_width, d, cfg.bridge_heads,
                                cfg.bridge_ffn_ratio, bridge_rng, dt)
            for c in cfg.bridge_layers
        }

    def lora_targets(self) -> list[AdaptedLinear]:
        return collect_targets(self.blocks)

    def embed(self, pixels: np.ndarray) -> Tensor:
        cfg = self.cfg
        if pixels.shape[1:] != (3, cfg.image_height, cfg.image_width):
            raise ModelConfigError(
                f"pixels {pixels.shape[1:]} do not match configured (3, {cfg.image_height}, {cfg.image_width})"
            )
        patches = Tensor(patchify(pixels.astype(cfg.np_dtype, copy=False), cfg.patch_size))
        x = self.patch_embed(patches)
        b = pixels.shape[0]
        cls = T.reshape(self.cls, (1, 1, -1)) * Tensor(np.ones((b, 1, 1), dtype=cfg.np_dtype))
        x = T.concat([cls, x], axis=1) + self.pos
        return self.ln_pre(x)

    def forward(self, pixels: np.ndarray, text_levels: Tensor | None = None,
                text_valid: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Returns (tapped [B, m, L_v+1, H_v], final CLS [B, H_v])."""
        x = self.embed(pixels)
        taps = {}
        use_bridge = text_levels is not None and bool(self.bridges)
        for block in self.blocks:
            bridge = self.bridges.get(str(block.layer_index)) if use_bridge else None
            inject = None
            if bridge is not None:
                text_ml = bridge.text_features(text_levels)

                def inject(h, bridge=bridge, text_ml=text_ml):
                    return bridge(h, text_ml, text_valid)
            x = block(x, inject=inject)
            if block.layer_index in self.cfg.visual_taps:
                taps[block.layer_index] = x
        tapped = T.stack([taps[l] for l in self.cfg.visual_taps], axis=1)
        cls = self.ln_post(x[:, 0])
        return tapped, cls


class TextEncoder(Module):
    """Frozen causal transformer over the closed vocabulary."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        d = cfg.text_width
        self.cfg = cfg
        self.tok = _frozen((cfg.vocab_size, d), rng, dt, 1.0)
        self.pos = _frozen((cfg.max_text_len, d), rng, dt, 0.5)
        self.blocks = [Block(d, cfg.text_heads, cfg.mlp_ratio, i + 1, rng, dt, adapted=True,
                             residual_scale=_depth_scale(cfg.text_layers))
                       for i in range(cfg.text_layers)]
        self.ln_final = LayerNorm(d, dt).set_trainable(False)

    def lora_targets(self) -> list[AdaptedLinear]:
        return collect_targets(self.blocks)

    def forward(self, tokens: np.ndarray) -> tuple[Tensor, Tensor, Tensor, np.ndarray, np.ndarray]:
        """Returns (levels [B, n, L, H], eos [B, H], last [B, L, H], eos positions, valid mask)."""
        cfg = self.cfg
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != cfg.max_text_len:
            raise TokenError(f"tokens must be [B, {cfg.max_text_len}], got {tokens.shape}")
        eos_hits = tokens == TOKEN_ID[EOS]
        if not np.all(eos_hits.sum(axis=1) == 1):
            raise TokenError("every token row needs exactly one EOS")
        eos_pos = eos_hits.argmax(axis=1)
        valid = np.arange(cfg.max_text_len)[None, :] <= eos_pos[:, None]
        bias = causal_bias(cfg.max_text_len, cfg.np_dtype)[None, None] + key_padding_bias(valid, cfg.np_dtype)
        x = T.embedding(self.tok, tokens) + self.pos
        levels = {}
        for block in self.blocks:
            x = block(x, bias=bias)
            if block.layer_index in cfg.text_tap_layers:
                levels[block.layer_index] = x
        last = self.ln_final(x)
        eos = last[np.arange(len(tokens)), eos_pos]
        stacked = T.stack([levels[l] for l in cfg.text_tap_layers], axis=1)
        return stacked, eos, last, eos_pos, valid


@dataclass
class ModelOutput:
    box: Tensor  # [B, 4] cxcywh in [0, 1]
    reg_out: Tensor  # [B, H_g]
    t_eos_g: Tensor  # [B, H_g]
    v_tokens_g: Tensor  # [B, L_v, H_g]
    rtcc_logits: Tensor  # [B, L_v]
    clc_v: Tensor  # [B, D] unit norm
    clc_t: Tensor  # [B, D] unit norm


class HiVG(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = int(seed)
        dt = cfg.np_dtype
        ss = np.random.SeedSequence(seed)
        r_vis, r_txt, r_bridge, r_ground, r_lora = (np.random.default_rng(s) for s in ss.spawn(5))
        self.lora_rng = r_lora
        m = len(cfg.visual_taps)
        g = cfg.ground_width
        self.visual = VisualEncoder(cfg, r_vis, r_bridge)
        self.text = TextEncoder(cfg, r_txt)
        # trainable grounding side, Xavier-initialised
        self.perceiver = Linear(m * cfg.visual_width, g, r_ground, dt, bias=False)
        self.text_proj = Linear(cfg.text_width, g, r_ground, dt)
        self.reg_token = Tensor(np.zeros(g, dtype=dt), requires_grad=True)
        gpos = r_ground.standard_normal((cfg.grounding_len, g)) * 0.02
        gpos[2:2 + cfg.num_patches] = sincos_2d(cfg.grid, g)
        self.ground_pos = Tensor(gpos.astype(dt), requires_grad=True)
        self.ground_blocks = [Block(g, cfg.ground_heads, cfg.mlp_ratio, i + 1, r_ground, dt, adapted=False)
                              for i in range(cfg.ground_layers)]
        self.ground_ln = LayerNorm(g, dt)
        self.box_head = [Linear(g, g, r_ground, dt), Linear(g, g, r_ground, dt), Linear(g, 4, r_ground, dt)]
        self.clc_v_proj = Linear(cfg.visual_width, cfg.clc_dim, r_ground, dt, bias=False)
        self.clc_t_proj = Linear(cfg.text_width, cfg.clc_dim, r_ground, dt, bias=False)
        self.rtcc_head = RTCCHead(g, r_ground, dt, cfg.rtcc_init_scale)

    # -- parameter groups -------------------------------------------------
    def grounding_modules(self) -> list[Module]:
        return [self.perceiver, self.text_proj, *self.ground_blocks, self.ground_ln, *self.box_head,
                self.clc_v_proj, self.clc_t_proj, self.rtcc_head]

    def grounding_parameters(self) -> list[Tensor]:
        out = [self.reg_token, self.ground_pos]
        for mod in self.grounding_modules():
            out.extend(mod.parameters())
        return out

    def bridge_parameters(self) -> list[Tensor]:
        return [p for b in self.visual.bridges.values() for p in b.parameters()]

    def lora_parameters(self) -> list[Tensor]:
        return [p for l in self.visual.lora_targets() + self.text.lora_targets() for f in l.factors
                for p in (f.A, f.B)]

    # -- forward pieces ---------------------------------------------------
    def perceive_multilevel(self, tapped: Tensor) -> Tensor:
        """[B, m, L_v+1, H_v] -> [B, L_v+1, H_g] via per-token concat and W_mvp."""
        b, m, n, h = tapped.shape
        flat = T.reshape(T.transpose(tapped, (0, 2, 1, 3)), (b, n, m * h))
        return self.perceiver(flat)

    def grounding_sequence(self, g_v: Tensor, g_l: Tensor, text_valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """``[REG, CLS, patches, text] + pos`` and its key-padding bias."""
        cfg = self.cfg
        b = g_v.shape[0]
        if g_v.shape[1] != cfg.num_patches + 1 or g_l.shape[1] != cfg.max_text_len:
            raise ModelConfigError(
                f"grounding inputs {g_v.shape}/{g_l.shape} do not fit sequence length {cfg.grounding_len}"
            )
        reg = T.reshape(self.reg_token, (1, 1, -1)) * Tensor(np.ones((b, 1, 1), dtype=cfg.np_dtype))
        x = T.concat([reg, g_v, g_l], axis=1) + self.ground_pos
        valid = np.concatenate([np.ones((b, 2 + cfg.num_patches), dtype=bool), text_valid], axis=1)
        return x, key_padding_bias(valid, cfg.np_dtype)

    def ground(self, g_v: Tensor, g_l: Tensor, text_valid: np.ndarray, eos_pos: np.ndarray):
        """Run the grounding encoder; returns (reg_out, t_eos_g, v_tokens_g)."""
        cfg = self.cfg
        b = g_v.shape[0]
        x, bias = self.grounding_sequence(g_v, g_l, text_valid)
        for block in self.ground_blocks:
            x = block(x, bias=bias)
        x = self.ground_ln(x)
        reg_out = x[:, 0]
        v_tokens = x[:, 2:2 + cfg.num_patches]
        t_eos = x[np.arange(b), 2 + cfg.num_patches + eos_pos]
        return reg_out, t_eos, v_tokens

    def predict_box(self, reg_out: Tensor) -> Tensor:
        h = T.relu(self.box_head[0](reg_out))
        h = T.relu(self.box_head[1](h))
        return T.sigmoid(self.box_head[2](h))

    def forward(self, pixels: np.ndarray, tokens: np.ndarray) -> ModelOutput:
        levels, eos, last, eos_pos, valid = self.text(tokens)
        tapped, cls = self.visual(pixels, levels, valid)
        g_all = self.perceive_multilevel(tapped)
        g_l = self.text_proj(last)
        reg_out, t_eos_g, v_tokens_g = self.ground(g_all, g_l, valid, eos_pos)
        return ModelOutput(
            box=self.predict_box(reg_out),
            reg_out=reg_out,
            t_eos_g=t_eos_g,
            v_tokens_g=v_tokens_g,
            rtcc_logits=self.rtcc_head.logits(t_eos_g, v_tokens_g),
            clc_v=T.l2_normalize(self.clc_v_proj(cls)),
            clc_t=T.l2_normalize(self.clc_t_proj(eos)),
        )

    def predict(self, pixels: np.ndarray, tokens: np.ndarray, batch_size: int = 128) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(tokens), batch_size):
                out.append(self.forward(pixels[i:i + batch_size], tokens[i:i + batch_size]).box.data)
        return np.concatenate(out).astype(np.float64)


def encode_image(model: HiVG, pixels: np.ndarray, tokens: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    if tokens is None:
        return model.visual(pixels)
    levels, _, _, _, valid = model.text(tokens)
    return model.visual(pixels, levels, valid)


def encode_text(model: HiVG, tokens: np.ndarray) -> tuple[Tensor, Tensor]:
    levels, eos, *_ = model.text(tokens)
    return levels, eos
