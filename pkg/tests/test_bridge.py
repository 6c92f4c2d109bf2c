import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hivg import tensor as T
from hivg.bridge import BridgeLayer, BridgeShapeError, bridge_forward, calibrate_text, project_text
from hivg.layers import Block
from hivg.module import Linear
from hivg.tensor import Tensor


def make_bridge(rng, n=2, L=3, Ht=4, Hv=8, heads=2, dtype=np.float64):
    return BridgeLayer(2, n, L, Ht, Hv, heads, 2, rng, dtype)


class TestCalibrate:
    def test_zero_weights_identity(self, rng):
        f = Tensor(rng.standard_normal((2, 3, 4)).astype(np.float32))
        out = calibrate_text(f, Tensor(np.zeros((2, 3, 4), dtype=np.float32)))
        assert np.array_equal(out.data, f.data)

    def test_unit_weights_double(self, rng):
        f = Tensor(rng.standard_normal((2, 3, 4)))
        np.testing.assert_array_equal(calibrate_text(f, Tensor(np.ones((2, 3, 4)))).data, 2 * f.data)

    @given(arrays(np.float64, (5, 2, 3, 4), elements=st.floats(-5, 5)),
           arrays(np.float64, (2, 3, 4), elements=st.floats(-5, 5)))
    def test_residual_is_elementwise_product(self, f, w):
        out = calibrate_text(Tensor(f), Tensor(w)).data
        np.testing.assert_allclose(out - f, w * f, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(BridgeShapeError, match="sample-agnostic"):
            calibrate_text(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((2, 3, 5))))


class TestProject:
    def test_single_level_identity(self, rng):
        proj = Linear(4, 4, rng, np.float64, bias=False)
        proj.weight.data = np.eye(4)
        f = rng.standard_normal((1, 3, 4))
        np.testing.assert_array_equal(project_text(Tensor(f), proj).data, f[0])

    def test_selector_picks_first_level(self, rng):
        proj = Linear(8, 4, rng, np.float64, bias=False)
        proj.weight.data = np.hstack([np.eye(4), np.zeros((4, 4))])
        f = rng.standard_normal((2, 3, 4))
        np.testing.assert_array_equal(project_text(Tensor(f), proj).data, f[0])

    def test_against_concat_matmul(self, rng):
        proj = Linear(12, 5, rng, np.float64, bias=False)
        f = rng.standard_normal((2, 3, 6, 4))
        flat = np.concatenate([f[:, i] for i in range(3)], axis=-1)
        np.testing.assert_array_equal(project_text(Tensor(f), proj).data, flat @ proj.weight.data.T)


class TestBridgeLayer:
    def test_zeroed_ffn_output_reduces_block(self, rng):
        block = Block(8, 2, 2, 1, rng, np.float64, adapted=False)
        bridge = make_bridge(rng)
        bridge.fc2.weight.data[:] = 0
        bridge.fc2.bias.data[:] = 0
        x = Tensor(rng.standard_normal((2, 5, 8)))
        text = bridge.text_features(Tensor(rng.standard_normal((2, 2, 3, 4))))
        assert np.all(bridge(x, text).data == 0)
        plain = block(x).data
        bridged = block(x, inject=lambda h: bridge(h, text)).data
        assert np.array_equal(plain, bridged)

    def test_single_key_attention_broadcasts_value(self, rng):
        bridge = BridgeLayer(1, 1, 1, 4, 8, 1, 2, rng, np.float64)
        h = Tensor(rng.standard_normal((1, 5, 8)))
        text = bridge.text_features(Tensor(rng.standard_normal((1, 1, 1, 4))))
        bridge(h, text)
        np.testing.assert_array_equal(bridge.cross.last_weights, 1.0)
        # every query position receives exactly the one text value
        value = bridge.cross.v(text).data
        attended = bridge.cross(bridge.ln(h), context=text).data
        expected = bridge.cross.out(Tensor(np.broadcast_to(value, (1, 5, 8)))).data
        np.testing.assert_allclose(attended, expected, atol=1e-12)

    def test_attention_matches_explicit_oracle(self, rng):
        bridge = make_bridge(rng, heads=2)
        h = Tensor(rng.standard_normal((2, 5, 8)))
        text = bridge.text_features(Tensor(rng.standard_normal((2, 2, 3, 4))))
        out = bridge(h, text).data
        w = bridge.cross.last_weights
        np.testing.assert_allclose(w.sum(-1), 1, atol=1e-12)

        hn = bridge.ln(h).data
        q = hn @ bridge.cross.q.weight.data.T + bridge.cross.q.bias.data
        k = text.data @ bridge.cross.k.weight.data.T + bridge.cross.k.bias.data
        v = text.data @ bridge.cross.v.weight.data.T + bridge.cross.v.bias.data
        heads = []
        for i in range(2):
            s = slice(4 * i, 4 * i + 4)
            sc = q[..., s] @ np.swapaxes(k[..., s], -1, -2) / 2.0
            sc = np.exp(sc - sc.max(-1, keepdims=True))
            sc /= sc.sum(-1, keepdims=True)
            heads.append(sc @ v[..., s])
        att = np.concatenate(heads, -1) @ bridge.cross.out.weight.data.T + bridge.cross.out.bias.data
        ffn = T.gelu(Tensor(att @ bridge.fc1.weight.data.T + bridge.fc1.bias.data)).data
        oracle = ffn @ bridge.fc2.weight.data.T + bridge.fc2.bias.data
        assert np.max(np.abs(out - oracle)) < 1e-6

    def test_padded_text_gets_zero_weight(self, rng):
        bridge = make_bridge(rng)
        h = Tensor(rng.standard_normal((1, 5, 8)))
        text = bridge.text_features(Tensor(rng.standard_normal((1, 2, 3, 4))))
        valid = np.array([[True, True, False]])
        bridge_forward(bridge, h, text, valid)
        assert np.all(bridge.cross.last_weights[..., 2] == 0)

    def test_width_mismatch(self, rng):
        bridge = make_bridge(rng)
        with pytest.raises(BridgeShapeError, match="width"):
            bridge(Tensor(np.ones((1, 2, 6))), Tensor(np.ones((1, 3, 8))))

    def test_sample_agnostic_weights_start_at_zero_and_train(self, rng):
        bridge = make_bridge(rng)
        assert np.all(bridge.w.data == 0) and bridge.w.requires_grad
        levels = Tensor(rng.standard_normal((2, 2, 3, 4)))
        h = Tensor(rng.standard_normal((2, 5, 8)))
        T.backward(T.sum_(bridge(h, bridge.text_features(levels)) ** 2))
        assert bridge.w.grad is not None and np.any(bridge.w.grad != 0)

    def test_gradients_match_finite_differences(self, rng):
        bridge = make_bridge(rng)
        bridge.w.data = rng.standard_normal(bridge.w.shape) * 0.3
        levels = Tensor(rng.standard_normal((2, 2, 3, 4)))
        h = Tensor(rng.standard_normal((2, 5, 8)), requires_grad=True)
        weights = rng.standard_normal((2, 5, 8))

        def f():
            return T.sum_(bridge(h, bridge.text_features(levels)) * weights)

        assert T.gradcheck(f, [h, bridge.w, bridge.proj.weight, bridge.cross.q.weight]) < 1e-4
