import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from s3seg import metrics as Me
from s3seg.metrics import EvaluationError


def masks(shape=(16, 16)):
    return arrays(bool, shape).filter(lambda m: m.any())


class TestBestOverlap:
    def test_exact_partition(self, rng):
        gt = rng.random((8, 8)) > 0.5
        gt[0, 0] = True
        assert np.array_equal(Me.best_overlap_cluster(np.where(gt, 3, 7), gt), gt)

    def test_tie_goes_to_smaller_id(self):
        pred = np.array([4] * 5 + [9] * 9 + [2] * 9 + [1] * 3)
        gt = np.array([True] * 23 + [False] * 3)
        assert Me.chosen_cluster(pred, gt) == 2

    def test_empty_gt(self):
        with pytest.raises(EvaluationError):
            Me.best_overlap_cluster(np.zeros((3, 3), int), np.zeros((3, 3), bool))

    def test_shape_mismatch(self):
        with pytest.raises(EvaluationError):
            Me.best_overlap_cluster(np.zeros((3, 3), int), np.ones((3, 4), bool))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.int64, (8, 8), elements=st.integers(0, 4)), masks((8, 8)))
    def test_is_a_predicted_cluster(self, pred, gt):
        fg = Me.best_overlap_cluster(pred, gt)
        assert fg.any() and len(np.unique(pred[fg])) == 1


class TestDSC:
    def test_identical(self):
        m = np.eye(4, dtype=bool)
        assert Me.dsc(m, m) == 100.0

    def test_hand_value(self):
        p = np.zeros((1, 3), bool)
        g = np.zeros((1, 3), bool)
        p[0, :2] = True
        g[0, 1:] = True
        assert Me.dsc(p, g) == 50.0

    def test_disjoint_and_empty(self):
        a = np.array([[True, False]])
        assert Me.dsc(a, ~a) == 0.0
        assert Me.dsc(np.zeros((2, 2)), np.zeros((2, 2))) == 100.0

    @settings(max_examples=50, deadline=None)
    @given(arrays(bool, (6, 6)), arrays(bool, (6, 6)))
    def test_symmetric_and_bounded(self, p, g):
        assert Me.dsc(p, g) == Me.dsc(g, p)
        assert 0 <= Me.dsc(p, g) <= 100


class TestXOR:
    def test_values(self):
        g = np.zeros((4, 5), bool)
        g.ravel()[:10] = True
        p = g.copy()
        p.ravel()[10:13] = True
        assert Me.xor_metric(g, g) == 0.0
        assert Me.xor_metric(p, g) == 30.0
        assert Me.xor_metric(np.zeros_like(g), g) == 100.0

    def test_empty_gt(self):
        with pytest.raises(EvaluationError):
            Me.xor_metric(np.ones((2, 2)), np.zeros((2, 2)))


class TestHM:
    def test_identical(self):
        m = np.zeros((6, 6), bool)
        m[1:4, 2:5] = True
        assert Me.hm_distance(m, m) == 0.0

    def test_singletons_offset_3_4(self):
        a = np.zeros((10, 10), bool)
        b = np.zeros((10, 10), bool)
        a[1, 1] = b[4, 5] = True
        assert Me.hm_distance(a, b) == 5.0

    def test_border_counts_as_outside(self):
        full = np.ones((5, 5), bool)
        assert Me.boundary(full).sum() == 16

    def test_empty(self):
        with pytest.raises(EvaluationError):
            Me.hm_distance(np.zeros((3, 3)), np.ones((3, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.tuples(st.integers(0, 9), st.integers(0, 9)), st.tuples(st.integers(0, 9), st.integers(0, 9)))
    def test_singletons_are_euclidean(self, a, b):
        p = np.zeros((10, 10), bool)
        g = np.zeros((10, 10), bool)
        p[a] = g[b] = True
        assert Me.hm_distance(p, g) == math.dist(a, b) == Me.hm_distance(g, p)


def test_brute_force_agreement_100_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        pred = rng.integers(0, 4, size=(16, 16))
        gt = rng.random((16, 16)) < rng.uniform(0.1, 0.7)
        gt[rng.integers(16), rng.integers(16)] = True
        cid = oracles.best_overlap(pred, gt)
        assert Me.chosen_cluster(pred, gt) == cid
        fg = pred == cid
        assert np.array_equal(Me.best_overlap_cluster(pred, gt), fg)
        assert Me.dsc(fg, gt) == oracles.dice(fg, gt)
        assert Me.xor_metric(fg, gt) == oracles.xor(fg, gt)
        assert Me.hm_distance(fg, gt) == oracles.hausdorff(fg, gt)


class TestReport:
    def _img(self, i, d, h=1.0, x=2.0):
        return Me.ImageMetrics(f"im{i}", d, h, x, 1)

    def test_mean(self):
        r = Me.aggregate([self._img(0, 80.0), self._img(1, 90.0)])
        assert r.dsc == 85.0

    def test_single_is_itself(self):
        r = Me.aggregate([self._img(0, 73.25, 4.5, 12.0)])
        assert (r.dsc, r.hm, r.xor) == (73.25, 4.5, 12.0)

    def test_empty(self):
        with pytest.raises(EvaluationError):
            Me.aggregate([])

    def test_nan_hm_skipped(self):
        r = Me.aggregate([self._img(0, 0.0, float("nan"), 100.0), self._img(1, 90.0, 3.0, 10.0)])
        assert r.hm == 3.0 and r.dsc == 45.0

    def test_single_cluster_covering_gt(self):
        m = Me.evaluate("x", np.zeros((4, 4), int), np.ones((4, 4), bool))
        assert m.dsc == 100.0 and m.xor == 0.0

    def test_records_round_trip(self):
        r = Me.aggregate([self._img(0, 1 / 3), self._img(1, 2 / 3)], {"seed": 5, "config": "abc"})
        lines = [json.loads(s) for s in r.records().splitlines()]
        assert [d["type"] for d in lines] == ["image", "image", "aggregate"]
        assert lines[0]["dsc"] == 1 / 3
        assert lines[-1]["seed"] == 5 and lines[-1]["n"] == 2

    def test_table_four_significant_digits(self):
        r = Me.aggregate([self._img(0, 88.123456, 20.4321, 22.0)])
        row = r.table().splitlines()[1].split()
        assert row[1:] == ["88.12", "20.43", "22"]
