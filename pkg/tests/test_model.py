import dataclasses

import numpy as np
import pytest

from hivg import tensor as T
from hivg.checks import tiny_model_config
from hivg.config import ModelConfig
from hivg.data import EOS, SOS, TOKEN_ID, DataError, generate, build_arrays, tokenize
from hivg.model import HiVG, ModelConfigError, TokenError, encode_image, encode_text, patchify, sincos_2d
from hivg.tensor import Tensor


def small_config(**kw):
    base = dict(image_height=32, image_width=32, patch_size=8, visual_layers=6, visual_width=16, visual_heads=2,
                text_layers=3, text_width=8, text_heads=2, ground_layers=1, ground_width=16, ground_heads=2,
                mlp_ratio=2, visual_taps=(1, 2, 4, 6), bridge_layers=(2, 4, 6), bridge_heads=2,
                max_text_len=8, lora_rank=2, clc_dim=4, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def tokens_for(*queries, max_len=8):
    return np.stack([tokenize(q, max_len) for q in queries])


@pytest.fixture(scope="module")
def model():
    return HiVG(small_config(), seed=0)


@pytest.fixture(scope="module")
def pixels():
    return np.random.default_rng(0).random((2, 3, 32, 32))


class TestVisual:
    def test_sequence_length(self, model, pixels):
        assert model.visual.embed(pixels).shape == (2, 17, 16)

    def test_patchify_row_major(self):
        img = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
        p = patchify(img, 2)
        assert p.shape == (1, 4, 8)
        # second patch is the top-right 2x2 block, channels last
        np.testing.assert_array_equal(p[0, 1, ::2], [2, 3, 6, 7])

    def test_taps(self, model, pixels):
        tapped, cls = model.visual(pixels)
        assert tapped.shape == (2, 4, 17, 16) and cls.shape == (2, 16)

    def test_no_bridge_layers_is_bit_identical(self, pixels):
        plain = HiVG(small_config(bridge_layers=()), seed=3)
        bridged = HiVG(small_config(), seed=3)
        tok = tokens_for("the red circle", "the small blue square")
        a, _ = encode_image(plain, pixels, tok)
        b, _ = encode_image(bridged, pixels)
        c, _ = encode_image(bridged, pixels, tok)
        assert np.array_equal(a.data, b.data)
        # zero-init bridges still inject a text-dependent term
        assert not np.array_equal(a.data, c.data)

    def test_bridge_only_touches_later_layers(self, model, pixels):
        tok = tokens_for("the red circle", "the small blue square")
        a, _ = encode_image(model, pixels)
        b, _ = encode_image(model, pixels, tok)
        assert np.array_equal(a.data[:, 0], b.data[:, 0])
        assert not np.array_equal(a.data[:, 1], b.data[:, 1])

    def test_wrong_image_size(self, model):
        with pytest.raises(ModelConfigError, match="pixels"):
            model.visual(np.zeros((1, 3, 16, 16)))

    def test_sincos_table(self):
        table = sincos_2d((2, 3), 8)
        assert table.shape == (6, 8) and np.all(np.abs(table) <= 1)
        assert len({tuple(r) for r in np.round(table, 9)}) == 6
        with pytest.raises(ModelConfigError, match="divisible"):
            sincos_2d((2, 2), 6)


class TestText:
    def test_levels_cover_every_layer(self, model):
        levels, eos = encode_text(model, tokens_for("the red circle"))
        assert levels.shape == (1, 3, 8, 8) and eos.shape == (1, 8)

    def test_padding_is_invisible(self, model):
        tok = tokens_for("the red circle")
        levels, eos, last, eos_pos, valid = model.text(tok)
        tok2 = tok.copy()
        # scribble over the padding; EOS stays the only terminator
        tok2[0, eos_pos[0] + 1:] = TOKEN_ID["square"]
        levels2, eos2, last2, *_ = model.text(tok2)
        n = eos_pos[0] + 1
        np.testing.assert_array_equal(levels.data[:, :, :n], levels2.data[:, :, :n])
        np.testing.assert_array_equal(eos.data, eos2.data)
        assert valid[0].sum() == n

    def test_deterministic(self, model):
        tok = tokens_for("the large green triangle", "the large green triangle")
        levels, eos, *_ = model.text(tok)
        assert np.array_equal(eos.data[0], eos.data[1])

    def test_token_errors(self, model):
        bad = tokens_for("the red circle")
        bad[0, bad[0] == TOKEN_ID[EOS]] = TOKEN_ID["red"]
        with pytest.raises(TokenError, match="EOS"):
            model.text(bad)
        with pytest.raises(TokenError, match="tokens must be"):
            model.text(np.zeros((1, 3), dtype=int))
        assert issubclass(TokenError, DataError)


class TestPerceiver:
    def test_identity_single_level(self):
        cfg = small_config(visual_taps=(6,))
        m = HiVG(cfg, seed=0)
        m.perceiver.weight.data = np.eye(16)
        x = Tensor(np.random.default_rng(1).random((2, 1, 17, 16)))
        np.testing.assert_array_equal(m.perceive_multilevel(x).data, x.data[:, 0])

    def test_concat_matmul_oracle(self, model):
        x = np.random.default_rng(2).random((2, 4, 17, 16))
        flat = np.concatenate([x[:, i] for i in range(4)], axis=-1)
        out = model.perceive_multilevel(Tensor(x)).data
        np.testing.assert_array_equal(out, flat @ model.perceiver.weight.data.T)

    @pytest.mark.parametrize("taps", [(1,), (2, 5), (1, 2, 4, 6)])
    def test_output_width(self, taps):
        m = HiVG(small_config(visual_taps=taps, ground_width=12), seed=0)
        x = Tensor(np.ones((1, len(taps), 17, 16)))
        assert m.perceive_multilevel(x).shape == (1, 17, 12)


class TestGrounding:
    def _inputs(self, model, pixels, tok):
        levels, eos, last, eos_pos, valid = model.text(tok)
        tapped, _ = model.visual(pixels, levels, valid)
        return model.perceive_multilevel(tapped), model.text_proj(last), valid, eos_pos

    def test_layout_and_length(self, model, pixels):
        g_v, g_l, valid, _ = self._inputs(model, pixels, tokens_for("the red circle", "the blue square"))
        x, bias = model.grounding_sequence(g_v, g_l, valid)
        assert x.shape[1] == 2 + 16 + 8 == model.cfg.grounding_len
        pos = model.ground_pos.data
        np.testing.assert_array_equal(x.data[:, 0], np.broadcast_to(model.reg_token.data + pos[0], (2, 16)))
        np.testing.assert_array_equal(x.data[:, 1:18], g_v.data + pos[1:18])
        np.testing.assert_array_equal(x.data[:, 18:], g_l.data + pos[18:])
        assert bias.shape == (2, 1, 1, 26)

    def test_padding_gets_zero_attention(self, model, pixels):
        tok = tokens_for("the red circle", "the small blue square")
        g_v, g_l, valid, eos_pos = self._inputs(model, pixels, tok)
        model.ground(g_v, g_l, valid, eos_pos)
        w = model.ground_blocks[0].attn.last_weights
        pad = ~np.concatenate([np.ones((2, 18), bool), valid], axis=1)
        assert pad.any()
        for b in range(2):
            assert np.all(w[b][..., pad[b]] == 0)

    def test_reg_depends_on_image(self, model, pixels):
        tok = tokens_for("the red circle", "the red circle")
        out = model(pixels, tok)
        assert not np.allclose(out.reg_out.data[0], out.reg_out.data[1])

    def test_length_mismatch(self, model):
        with pytest.raises(ModelConfigError, match="sequence length"):
            model.grounding_sequence(Tensor(np.ones((1, 5, 16))), Tensor(np.ones((1, 8, 16))), np.ones((1, 8), bool))


class TestBoxHead:
    def test_outputs_in_unit_interval(self, model, pixels):
        out = model(pixels, tokens_for("the red circle", "the blue square"))
        assert out.box.shape == (2, 4)
        assert np.all((out.box.data >= 0) & (out.box.data <= 1))

    def test_zero_weights_give_half(self):
        m = HiVG(small_config(), seed=0)
        for lin in m.box_head:
            lin.weight.data[:] = 0
            lin.bias.data[:] = 0
        box = m.predict_box(Tensor(np.random.default_rng(0).random((3, 16))))
        np.testing.assert_array_equal(box.data, 0.5)

    def test_gradient_reaches_reg_out(self, model):
        reg = Tensor(np.random.default_rng(4).standard_normal((2, 16)), requires_grad=True)
        w = np.random.default_rng(5).standard_normal((2, 4))
        assert T.gradcheck(lambda: T.sum_(model.predict_box(reg) * w), [reg]) < 1e-5


class TestModel:
    def test_output_shapes(self, model, pixels):
        out = model(pixels, tokens_for("the red circle", "the blue square"))
        assert out.rtcc_logits.shape == (2, 16) and out.v_tokens_g.shape == (2, 16, 16)
        np.testing.assert_allclose(np.linalg.norm(out.clc_v.data, axis=1), 1)
        np.testing.assert_allclose(np.linalg.norm(out.clc_t.data, axis=1), 1)

    def test_same_seed_same_weights(self):
        a, b = HiVG(small_config(), seed=7), HiVG(small_config(), seed=7)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data)

    def test_frozen_encoders(self, model):
        trainable = {n for n, p in model.named_parameters() if p.requires_grad}
        assert not any(n.startswith("text.") for n in trainable)
        assert all(n.startswith("visual.bridges.") for n in trainable if n.startswith("visual."))

    def test_residual_scale_only_touches_output_weights(self):
        from hivg.layers import Block

        a = Block(16, 2, 4, 1, np.random.default_rng(0), np.float64, residual_scale=1.0)
        b = Block(16, 2, 4, 1, np.random.default_rng(0), np.float64, residual_scale=0.25)
        for name, p in a.named_parameters():
            q = dict(b.named_parameters())[name]
            scaled = name in ("attn.out.weight", "mlp.fc2.weight")
            np.testing.assert_array_equal(q.data, p.data * 0.25 if scaled else p.data)

    def test_predict_batches_match(self, model, pixels):
        tok = tokens_for("the red circle", "the blue square")
        np.testing.assert_allclose(model.predict(pixels, tok, batch_size=1), model.predict(pixels, tok))

    def test_desk_config_on_real_scenes(self):
        cfg = ModelConfig()
        m = HiVG(cfg, seed=0)
        arr = build_arrays(generate(0, 2, "relational"), 64, 64, 8)
        out = m(arr.pixels, arr.tokens)
        assert out.box.shape == (2, 4) and out.box.dtype == np.float32
        assert cfg.grounding_len == 2 + 64 + 16
