import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s3seg import losses as L
from s3seg import model as M
from s3seg import tensor as T
from s3seg.affine import AffineParams, affine_grid, warp_labels
from s3seg.tensor import ContractError, ShapeError, Tensor


def probs(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestSelfLabelCE:
    def test_uniform_is_log_k(self, rng):
        S = probs(np.full((1, 4, 5, 6), 0.25))
        y = rng.integers(0, 4, size=(5, 6))
        assert abs(float(L.self_label_ce(S, y).data) - math.log(4)) < 1e-10

    def test_agreement_limit(self):
        S = np.full((1, 2, 3, 3), 1e-12)
        S[0, 0] = 1 - 1e-12
        assert float(L.self_label_ce(probs(S), np.zeros((3, 3), int)).data) < 1e-11

    def test_hand_value(self):
        S = np.array([[0.9, 0.2], [0.1, 0.8]]).reshape(1, 2, 2, 1)
        y = np.array([[0], [1]])
        assert abs(float(L.self_label_ce(probs(S), y).data) - 0.164252033486018) < 1e-12

    def test_zero_probability_is_clamped(self):
        S = np.zeros((1, 2, 1, 1))
        S[0, 0] = 1.0
        val = float(L.self_label_ce(probs(S), np.ones((1, 1), int)).data)
        assert val == pytest.approx(-math.log(1e-12))

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            L.self_label_ce(probs(np.full((1, 2, 2, 2), 0.5)), np.full((2, 2), 2))

    def test_label_shape(self):
        with pytest.raises(ShapeError):
            L.self_label_ce(probs(np.full((1, 2, 2, 2), 0.5)), np.zeros((3, 2), int))


class TestSobel:
    def test_constant_gives_zero(self):
        e = L.sobel_edges(Tensor(np.full((1, 2, 5, 5), 0.7)))
        for m in (e.ex, e.ey, e.exy):
            assert np.all(m.data == 0)

    def test_ramp(self):
        ramp = np.tile(np.arange(7.0), (6, 1))[None, None]
        e = L.sobel_edges(Tensor(ramp))
        assert np.all(e.ex.data[0, 0, 1:-1, 1:-1] == 8)
        assert np.all(e.ey.data[0, 0, 1:-1, 1:-1] == 0)
        assert e.ex.shape == (1, 1, 6, 7)
        assert np.all(e.ex.data[0, 0, 0] == 0)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            L.sobel_edges(Tensor(np.zeros((1, 1, 2, 5))))


def brute_spatial(S):
    n, k, h, w = S.shape
    kernels = [L.SOBEL_X, L.SOBEL_Y, L.SOBEL_XY]
    maps = np.zeros((3, n, k, h, w))
    for m, kern in enumerate(kernels):
        for b in range(n):
            for c in range(k):
                for i in range(1, h - 1):
                    for j in range(1, w - 1):
                        maps[m, b, c, i, j] = np.sum(S[b, c, i - 1:i + 2, j - 1:j + 2] * kern)
    ex, ey, exy = maps
    return (np.abs(ex - ey) + np.abs(ex - exy) + np.abs(ey - exy)).sum() / (n * h * w * k)


class TestSpatial:
    def test_constant_is_exactly_zero(self):
        assert float(L.spatial_consistency(Tensor(np.full((1, 3, 6, 6), 1 / 3))).data) == 0.0

    def test_vertical_step(self):
        S = np.zeros((1, 1, 3, 3))
        S[..., 2] = 1.5
        e = L.sobel_edges(Tensor(S))
        assert e.ex.data[0, 0, 1, 1] == 4 * 1.5
        assert e.ey.data[0, 0, 1, 1] == 0
        val = float(L.spatial_consistency(Tensor(S)).data)
        assert val == pytest.approx(brute_spatial(S), abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(3, 7), st.integers(3, 7), st.integers(1, 3))
    def test_matches_brute_force(self, seed, h, w, k):
        S = np.random.default_rng(seed).random((1, k, h, w))
        assert float(L.spatial_consistency(Tensor(S)).data) == pytest.approx(brute_spatial(S), rel=1e-12)

    def test_nonnegative(self, rng):
        assert float(L.spatial_consistency(Tensor(rng.normal(size=(1, 2, 6, 6)))).data) >= 0


class TestAffineConsistency:
    def test_uniform_is_log_two(self, rng):
        S = probs(np.full((1, 2, 4, 4), 0.5))
        y = rng.integers(0, 2, size=(4, 4))
        valid = rng.random((4, 4)) > 0.3
        valid[0, 0] = True
        assert abs(float(L.affine_consistency(S, y, valid).data) - math.log(2)) < 1e-12

    def test_identity_with_cloned_head_equals_ce(self):
        cfg = M.ModelConfig(channels=8, n_blocks=1, n_clusters=5, seed=3)
        params = M.init_params(cfg)
        for key in [k for k in params if k.startswith("head.main")]:
            params[key.replace("main", "aux")].data = params[key].data.copy()
        x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 24, 24)))
        feats, S = M.forward(x, params, cfg)
        y = S.data.argmax(axis=1)[0]
        grid, mask = affine_grid(AffineParams(), 24, 24)
        S_aux = M.surrogate_forward(feats, grid, params)
        at = float(L.affine_consistency(S_aux, warp_labels(y, grid, mask), mask).data)
        assert abs(at - float(L.self_label_ce(S, y).data)) < 1e-10

    def test_invalid_pixels_ignored(self):
        S = np.full((1, 2, 1, 2), 0.5)
        S[0, :, 0, 1] = [1e-30, 1.0]
        y = np.array([[0, 0]])
        val = L.affine_consistency(probs(S), y, np.array([[True, False]]))
        assert float(val.data) == pytest.approx(math.log(2))

    def test_sentinel_labels_allowed_when_masked(self):
        val = L.affine_consistency(probs(np.full((1, 2, 1, 2), 0.5)), np.array([[1, -1]]),
                                   np.array([[True, False]]))
        assert float(val.data) == pytest.approx(math.log(2))

    def test_empty_mask(self):
        with pytest.raises(L.DegenerateTransformError):
            L.affine_consistency(probs(np.full((1, 2, 2, 2), 0.5)), np.zeros((2, 2), int),
                                 np.zeros((2, 2), bool))


class TestJoint:
    one = Tensor(np.array(1.0))

    def test_skin(self):
        assert abs(float(L.joint(self.one, self.one, self.one, L.SKIN).data) - 1.8) < 1e-12

    def test_lung(self):
        two = Tensor(np.array(2.0))
        assert abs(float(L.joint(two, self.one, self.one, L.LUNG).data) - 3.1) < 1e-12

    def test_ce_only(self):
        ce = Tensor(np.array(0.731))
        out = L.joint(ce, self.one, self.one, L.LossWeights(1, 0, 0))
        assert float(out.data) == 0.731

    def test_gradient_routes_by_weight(self):
        a, b, c = (Tensor(np.array(v), requires_grad=True) for v in (1.0, 2.0, 3.0))
        T.backward(L.joint(a, b, c, L.LUNG))
        assert (a.grad, b.grad, c.grad) == (1.0, 0.5, 0.6)

    @pytest.mark.parametrize("w", [(-1, 0, 0), (0, 0, 0), (1, -0.1, 0)])
    def test_bad_weights(self, w):
        with pytest.raises(L.ConfigError):
            L.LossWeights(*w)

    def test_default_is_skin(self):
        assert L.LossWeights() == L.SKIN == L.LossWeights(1.2, 0.3, 0.3)
        assert L.LUNG.as_tuple() == (1.0, 0.5, 0.6)
