import numpy as np
import pytest

from s3seg import losses as L
from s3seg import model as M
from s3seg import tensor as T
from s3seg.affine import AffineRanges
from s3seg.trainer import (NonFiniteGradientError, OptimConfig, TrainHistory, ablation_presets,
                           run_ablation, sgd_step, train_single_image)

TINY = M.ModelConfig(channels=8, n_blocks=1, n_clusters=4, seed=0)


def image(seed=0, size=20):
    return np.random.default_rng(seed).normal(size=(1, 3, size, size))


class TestSGD:
    def test_two_steps_by_hand(self):
        p = {"w": T.Tensor(np.array([1.0]), requires_grad=True)}
        v = {}
        cfg = OptimConfig(lr=0.36, momentum=0.9)
        p["w"].grad = np.array([1.0])
        sgd_step(p, v, cfg)
        assert p["w"].data[0] == pytest.approx(1 - 0.36)
        p["w"].grad = np.array([1.0])
        sgd_step(p, v, cfg)
        assert v["w"][0] == pytest.approx(1.9)
        assert p["w"].data[0] == pytest.approx(1 - 0.36 - 0.36 * 1.9)
        assert p["w"].grad is None

    def test_offset_branch_scaled(self):
        p = {"deform.offset.w": T.Tensor(np.zeros(1), requires_grad=True),
             "x": T.Tensor(np.zeros(1), requires_grad=True)}
        for t in p.values():
            t.grad = np.ones(1)
        sgd_step(p, {}, OptimConfig(lr=1.0, offset_lr_scale=0.25))
        assert p["deform.offset.w"].data[0] == -0.25 and p["x"].data[0] == -1.0

    def test_missing_grad_counts_as_zero(self):
        p = {"w": T.Tensor(np.array([2.0]), requires_grad=True)}
        sgd_step(p, {}, OptimConfig())
        assert p["w"].data[0] == 2.0

    def test_non_finite(self):
        p = {"w": T.Tensor(np.array([2.0]), requires_grad=True)}
        p["w"].grad = np.array([np.nan])
        with pytest.raises(NonFiniteGradientError):
            sgd_step(p, {}, OptimConfig())
        assert p["w"].data[0] == 2.0

    @pytest.mark.parametrize("kw", [dict(lr=0), dict(momentum=1.0), dict(max_iters=0), dict(offset_lr_scale=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            OptimConfig(**kw)

    def test_defaults(self):
        c = OptimConfig()
        assert (c.lr, c.momentum, c.max_iters, c.min_clusters) == (0.36, 0.9, 50, None)


class TestTraining:
    def test_history_and_shapes(self):
        labels, params, hist = train_single_image(image(), TINY, OptimConfig(max_iters=3))
        assert labels.shape == (20, 20) and labels.dtype.kind == "i"
        assert len(hist) == 3 and hist.surrogate_calls == 3 and hist.sobel_calls == 3
        for r in hist.records:
            w = L.SKIN
            assert r.joint == pytest.approx(w.ce * r.ce + w.affine * r.affine + w.spatial * r.spatial)
            assert 1 <= r.n_clusters <= 4
        assert all(np.all(np.isfinite(p.data)) for p in params.values())

    def test_deterministic(self):
        a = train_single_image(image(), TINY, OptimConfig(max_iters=3))
        b = train_single_image(image(), TINY, OptimConfig(max_iters=3))
        assert np.array_equal(a[0], b[0])
        assert a[2].to_csv() == b[2].to_csv()

    def test_seed_changes_transforms(self):
        h1 = train_single_image(image(), TINY, OptimConfig(max_iters=2, seed=1))[2]
        h2 = train_single_image(image(), TINY, OptimConfig(max_iters=2, seed=2))[2]
        assert h1.records[0].transform != h2.records[0].transform

    def test_skipped_terms(self):
        _, _, hist = train_single_image(image(), TINY, OptimConfig(max_iters=2), L.LossWeights(1, 0, 0))
        assert hist.surrogate_calls == 0 and hist.sobel_calls == 0
        assert all(r.affine == 0 and r.spatial == 0 and r.joint == r.ce for r in hist.records)

    def test_callback_sees_pseudo_labels(self):
        seen = []
        train_single_image(image(), TINY, OptimConfig(max_iters=2), callback=lambda i, y: seen.append((i, y.shape)))
        assert seen == [(0, (20, 20)), (1, (20, 20))]

    def test_early_stop(self):
        _, _, hist = train_single_image(image(), TINY, OptimConfig(max_iters=5, min_clusters=100))
        assert len(hist) == 1

    def test_ce_decreases_on_fixed_labels(self):
        # the self-labelling term alone should sharpen the prediction
        _, _, hist = train_single_image(image(3), TINY, OptimConfig(max_iters=8), L.LossWeights(1, 0, 0))
        assert hist.records[-1].ce < hist.records[0].ce

    def test_identity_ranges(self):
        _, _, hist = train_single_image(image(), TINY, OptimConfig(max_iters=2), ranges=AffineRanges.identity())
        assert all(r.transform.rotation == 0 and r.transform.scale == 1 for r in hist.records)


class TestHistoryCSV:
    def test_round_trip(self):
        _, _, hist = train_single_image(image(), TINY, OptimConfig(max_iters=2))
        text = hist.to_csv()
        assert text.splitlines()[0] == "iteration,L_ce,L_AT,L_S,L_joint,unique_clusters"
        back = TrainHistory.from_csv(text)
        assert [(r.ce, r.joint, r.n_clusters) for r in back.records] == \
            [(r.ce, r.joint, r.n_clusters) for r in hist.records]


class TestAblation:
    def test_presets(self):
        rows = ablation_presets(L.SKIN)
        assert [w.as_tuple() for w in rows] == [(1.2, 0, 0), (1.2, 0.3, 0), (1.2, 0, 0.3), (1.2, 0.3, 0.3)]

    def test_surrogate_counter(self):
        gt = np.zeros((20, 20), bool)
        gt[5:15, 5:15] = True
        rows = run_ablation(image(), ablation_presets(L.LUNG), TINY, OptimConfig(max_iters=2), gt=gt)
        assert [r.history.surrogate_calls for r in rows] == [0, 2, 0, 2]
        assert all(0 <= r.metrics.dsc <= 100 for r in rows)

    def test_identical_initialisation(self):
        rows = run_ablation(image(), [L.LossWeights(1, 0, 0)] * 2, TINY, OptimConfig(max_iters=2))
        assert np.array_equal(rows[0].labels, rows[1].labels)
