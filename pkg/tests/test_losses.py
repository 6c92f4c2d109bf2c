import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hivg import tensor as T
from hivg.config import LossWeights
from hivg.losses import (RTCCHead, TrainingError, box_iou_np, box_loss, clc, dice_loss, focal_loss,
                         focal_loss_from_logits, giou, make_patch_mask, rtcc, total_loss)
from hivg.tensor import Tensor


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_boxes(rng, n):
    c = rng.uniform(0.1, 0.9, (n, 2))
    wh = rng.uniform(0.05, 0.6, (n, 2))
    return np.concatenate([c, wh], axis=1)


class TestCLC:
    def test_single_pair_is_zero(self, rng):
        v = Tensor(unit_rows(rng, 1, 4))
        assert clc(v, Tensor(unit_rows(rng, 1, 4)), 0.07).item() == 0.0

    def test_orthonormal_closed_form(self):
        eye = Tensor(np.eye(2))
        expected = -math.log(math.e / (math.e + 1))
        assert clc(eye, eye, 1.0).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.3133, abs=1e-4)

    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 6))
    def test_permutation_invariant(self, seed, n):
        rng = np.random.default_rng(seed)
        v, t = unit_rows(rng, n, 5), unit_rows(rng, n, 5)
        perm = rng.permutation(n)
        a = clc(Tensor(v), Tensor(t), 0.07).item()
        b = clc(Tensor(v[perm]), Tensor(t[perm]), 0.07).item()
        assert a == pytest.approx(b, rel=1e-10)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError, match="at least one"):
            clc(Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))), 0.07)
        with pytest.raises(ValueError, match="disagree"):
            clc(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), 0.07)


def rasterised_mask(box, grid, per_patch=129):
    """Rasterise the box at full resolution and read the pixel under each patch centre.

    With an odd number of pixels per patch, every patch centre is a pixel centre.
    """
    cx, cy, w, h = box
    gh, gw = grid
    ys = (np.arange(gh * per_patch) + 0.5) / (gh * per_patch)
    xs = (np.arange(gw * per_patch) + 0.5) / (gw * per_patch)
    raster = (np.abs(ys - cy) <= h / 2)[:, None] & (np.abs(xs - cx) <= w / 2)[None, :]
    mid = per_patch // 2
    return raster[mid::per_patch, mid::per_patch].astype(float).reshape(-1)


class TestPatchMask:
    def test_full_image(self):
        assert np.all(make_patch_mask((0.5, 0.5, 1.0, 1.0), (8, 8)) == 1)

    def test_single_patch(self):
        m = make_patch_mask((2.5 / 8, 5.5 / 8, 0.05, 0.05), (8, 8))
        assert m.sum() == 1 and m[5 * 8 + 2] == 1

    def test_against_rasterisation(self, rng):
        for box in random_boxes(rng, 100):
            np.testing.assert_array_equal(make_patch_mask(box, (8, 8)), rasterised_mask(box, (8, 8)))

    def test_degenerate_box_warns(self):
        with pytest.warns(UserWarning, match="degenerate"):
            assert make_patch_mask((0.5, 0.5, 0.0, 0.2), (4, 4)).sum() == 0


class TestFocalDice:
    def test_perfect_prediction(self):
        m = np.array([[1.0, 0, 1, 0]])
        s = Tensor(m.copy())
        assert dice_loss(s, m).item() == 0.0
        assert focal_loss(s, m).item() < 1e-20

    def test_half_probability_dice(self):
        L = 64
        m = np.zeros((1, L))
        m[0, : L // 2] = 1
        value = dice_loss(Tensor(np.full((1, L), 0.5)), m, eps=1.0).item()
        assert value == pytest.approx(1 - (L / 2 + 1) / (3 * L / 4 + 1), abs=1e-12)
        assert value == pytest.approx(1 / 3, abs=0.01)

    def test_gamma_zero_is_bce(self, rng):
        p = rng.uniform(0.01, 0.99, (3, 10))
        m = (rng.random((3, 10)) > 0.5).astype(float)
        bce = -np.mean(m * np.log(p) + (1 - m) * np.log(1 - p))
        assert abs(focal_loss(Tensor(p), m, gamma=0.0, alpha=None).item() - bce) < 1e-10
        logits = np.log(p / (1 - p))
        assert abs(focal_loss_from_logits(Tensor(logits), m, gamma=0.0, alpha=None).item() - bce) < 1e-10

    @given(st.integers(0, 2 ** 31 - 1))
    def test_logit_and_probability_forms_agree(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(0, 3, (2, 16))
        m = (rng.random((2, 16)) > 0.7).astype(float)
        a = focal_loss_from_logits(Tensor(z), m).item()
        b = focal_loss(T.sigmoid(Tensor(z)), m).item()
        assert a == pytest.approx(b, rel=1e-8, abs=1e-12)

    def test_rtcc_combines_weighted_terms(self, rng):
        w = LossWeights()
        head = RTCCHead(8, rng, np.float64)
        t, v = Tensor(rng.standard_normal((2, 8))), Tensor(rng.standard_normal((2, 5, 8)))
        m = (rng.random((2, 5)) > 0.5).astype(float)
        logits = head.logits(t, v)
        expected = 20 * focal_loss_from_logits(logits, m).item() + 2 * dice_loss(T.sigmoid(logits), m).item()
        assert rtcc(t, v, m, head, w).item() == pytest.approx(expected, rel=1e-12)
        assert np.all(np.abs(logits.data) <= 10 + 1e-9)


def mc_giou(a, b, n=1_000_000, seed=0):
    rng = np.random.default_rng(seed)
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    hx0, hy0, hx1, hy1 = min(ax0, bx0), min(ay0, by0), max(ax1, bx1), max(ay1, by1)
    pts = rng.uniform((hx0, hy0), (hx1, hy1), size=(n, 2))
    ina = (pts[:, 0] >= ax0) & (pts[:, 0] <= ax1) & (pts[:, 1] >= ay0) & (pts[:, 1] <= ay1)
    inb = (pts[:, 0] >= bx0) & (pts[:, 0] <= bx1) & (pts[:, 1] >= by0) & (pts[:, 1] <= by1)
    hull = (hx1 - hx0) * (hy1 - hy0)
    inter = (ina & inb).mean() * hull
    union = (ina | inb).mean() * hull
    return inter / union - (hull - union) / hull


class TestBoxLoss:
    def test_perfect_prediction(self, rng):
        b = random_boxes(rng, 4)
        assert box_loss(Tensor(b), b, LossWeights()).item() == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_hand_geometry(self):
        g, iou = giou(Tensor([0.25, 0.25, 0.5, 0.5]), Tensor([0.75, 0.75, 0.5, 0.5]))
        assert iou.item() == 0.0
        assert g.item() == pytest.approx(-0.5, abs=1e-12)

    def test_monte_carlo_oracle(self, rng):
        a, b = random_boxes(rng, 50), random_boxes(rng, 50)
        g, _ = giou(Tensor(a), Tensor(b))
        for i in range(50):
            assert abs(g.data[i] - mc_giou(a[i], b[i], seed=i)) < 2e-3

    def test_numpy_iou_matches(self, rng):
        a, b = random_boxes(rng, 20), random_boxes(rng, 20)
        np.testing.assert_allclose(box_iou_np(a, b), giou(Tensor(a), Tensor(b))[1].data, atol=1e-12)

    @given(st.integers(0, 2 ** 31 - 1))
    def test_giou_bounds(self, seed):
        rng = np.random.default_rng(seed)
        g, iou = giou(Tensor(random_boxes(rng, 8)), Tensor(random_boxes(rng, 8)))
        assert np.all(g.data <= iou.data + 1e-12)
        assert np.all(g.data >= -1) and np.all((iou.data >= 0) & (iou.data <= 1))

    def test_smooth_l1_beta(self):
        pred, gt = Tensor([[0.5, 0.5, 0.2, 0.2]]), np.array([[0.5, 0.5, 0.2, 0.2]])
        pred.data[0, 0] = 0.9
        w = LossWeights(giou=0.0)
        assert box_loss(pred, gt, w).item() == pytest.approx(2 * 0.5 * 0.4 ** 2)
        narrow = LossWeights(giou=0.0, smooth_l1_beta=0.1)
        assert box_loss(pred, gt, narrow).item() == pytest.approx(2 * (0.4 - 0.05))

    def test_box_gradient(self, rng):
        pred = Tensor(random_boxes(rng, 3), requires_grad=True)
        gt = random_boxes(rng, 3)
        assert T.gradcheck(lambda: box_loss(pred, gt, LossWeights()), [pred]) < 1e-4


class TestTotal:
    def test_zero_parts(self):
        assert total_loss({"a": Tensor(0.0), "b": Tensor(0.0)}).item() == 0.0

    def test_additive(self):
        parts = {"a": Tensor(1.25), "b": Tensor(2.5), "c": Tensor(-0.75)}
        assert total_loss(parts).item() == 1.25 + 2.5 - 0.75

    def test_gradient_is_sum_of_parts(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)

        def f():
            return total_loss({"a": T.sum_(x * x), "b": T.sum_(T.exp(x)), "c": T.sum_(T.tanh(x))})

        assert T.gradcheck(f, [x]) < 1e-6
        T.backward(f())
        x.grad = None
        T.backward(f())
        np.testing.assert_allclose(x.grad, 2 * x.data + np.exp(x.data) + 1 - np.tanh(x.data) ** 2)

    def test_non_finite_component_raises(self):
        with pytest.raises(TrainingError, match="'b'"):
            total_loss({"a": Tensor(1.0), "b": Tensor(float("nan"))})
