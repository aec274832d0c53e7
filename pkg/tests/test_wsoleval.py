"""Localization metrics against hand values and naive re-implementations."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import flood_boxes, naive_iou, naive_maxboxacc, naive_pxap, random_instance

from minmaxcam.exceptions import InvalidArgumentError
from minmaxcam.wsoleval import (
    BBox,
    bg_proportion,
    extract_boxes,
    feature_dispersion,
    iou,
    max_box_acc,
    pxap,
    threshold_grid,
    tight_box,
    topk_correct,
    topk_loc_from,
)


# --- box extraction ---------------------------------------------------------

class TestExtractBoxes:
    def test_empty(self):
        assert extract_boxes(np.zeros((5, 5)), 0.5) == []

    def test_rectangle(self):
        h = np.zeros((10, 10))
        h[2:5, 3:7] = 1
        assert extract_boxes(h, 0.5) == [BBox(3, 2, 7, 5)]

    def test_connectivity(self):
        h = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert len(extract_boxes(h, 0.5, connectivity=8)) == 1
        assert len(extract_boxes(h, 0.5, connectivity=4)) == 2
        with pytest.raises(InvalidArgumentError):
            extract_boxes(h, 0.5, connectivity=6)

    def test_threshold_is_inclusive(self):
        assert extract_boxes(np.full((2, 2), 0.3), 0.3) == [BBox(0, 0, 2, 2)]

    def test_largest_only(self):
        h = np.zeros((8, 8))
        h[0, 0] = 1
        h[4:8, 4:8] = 1
        assert extract_boxes(h, 0.5, largest_only=True) == [BBox(4, 4, 8, 8)]

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("conn", [4, 8])
    def test_matches_flood_fill(self, seed, conn):
        h = np.random.default_rng(seed).random((12, 12))
        for tau in (0.3, 0.6, 0.9):
            got = sorted(b.as_tuple() for b in extract_boxes(h, tau, conn))
            assert got == sorted(flood_boxes(h, tau, conn))


class TestIou:
    def test_values(self):
        a = BBox(0, 0, 10, 10)
        assert iou(a, a) == 1.0
        assert iou(a, BBox(10, 0, 20, 10)) == 0.0
        assert iou(a, BBox(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 12), min_size=8, max_size=8))
    def test_matches_pixel_count(self, v):
        a = (min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]) + 1, max(v[2], v[3]) + 1)
        b = (min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]) + 1, max(v[6], v[7]) + 1)
        got = iou(BBox(*a), BBox(*b))
        assert got == pytest.approx(naive_iou(a, b), abs=1e-12)
        assert got == pytest.approx(iou(BBox(*b), BBox(*a)), abs=0)

    def test_tight_box(self):
        m = np.zeros((6, 6), bool)
        m[1, 2] = m[4, 3] = True
        assert tight_box(m) == BBox(2, 1, 4, 5)


# --- MaxBoxAcc --------------------------------------------------------------

class TestMaxBoxAcc:
    def test_hit(self):
        h = np.zeros((10, 10))
        h[2:8, 2:8] = 1.0
        res = max_box_acc([h], [[(2, 2, 8, 8)]])
        assert res.maxboxacc[0.5] == 1.0

    def test_all_zero(self):
        res = max_box_acc([np.zeros((8, 8))] * 3, [[(0, 0, 4, 4)]] * 3)
        assert all(v == 0.0 for v in res.maxboxacc.values())
        assert res.maxboxacc_v2 == 0.0

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            max_box_acc([np.zeros((4, 4))], [])

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        maps, gts, _ = random_instance(rng, 4, 16)
        grid = threshold_grid(20)
        res = max_box_acc(maps, gts, grid=grid)
        for d in (0.3, 0.5, 0.7):
            assert abs(res.maxboxacc[d] - naive_maxboxacc(maps, gts, d, grid)) <= 1e-9
        assert res.maxboxacc_v2 == pytest.approx(np.mean(list(res.maxboxacc.values())), abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_monotone_in_delta_and_bounded(self, seed):
        maps, gts, _ = random_instance(np.random.default_rng(seed), 6, 16)
        res = max_box_acc(maps, gts)
        for t in range(len(res.thresholds)):
            assert res.curves[0.3][t] >= res.curves[0.5][t] >= res.curves[0.7][t]
        assert 0.0 <= res.maxboxacc[0.7] <= res.maxboxacc[0.5] <= res.maxboxacc[0.3] <= 1.0

    @pytest.mark.parametrize("seed", range(3))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        maps, gts, masks = random_instance(rng, 6, 12)
        perm = rng.permutation(6)
        a = max_box_acc(maps, gts)
        b = max_box_acc([maps[i] for i in perm], [gts[i] for i in perm])
        assert a.maxboxacc == b.maxboxacc
        assert pxap(maps, masks) == pytest.approx(
            pxap([maps[i] for i in perm], [masks[i] for i in perm]), abs=1e-15
        )

    @pytest.mark.parametrize("seed", range(3))
    def test_squaring_with_value_grid(self, seed):
        # a monotone transform preserves every binarization when the grid
        # follows the image values, so the best accuracy is unchanged
        maps, gts, _ = random_instance(np.random.default_rng(seed), 1, 10)
        h = maps[0]
        vals = np.unique(h)
        a = max_box_acc([h], gts, grid=vals).maxboxacc
        b = max_box_acc([h**2], gts, grid=vals**2).maxboxacc
        assert a == b

    def test_report_formats(self):
        maps, gts, _ = random_instance(np.random.default_rng(0), 3, 8)
        res = max_box_acc(maps, gts)
        d = res.to_dict()
        assert {"maxboxacc_030", "maxboxacc_050", "maxboxacc_070", "maxboxacc_v2", "pxap", "best_tau_per_delta"} <= set(d)
        lines = res.curves_csv().splitlines()
        assert lines[0] == "tau,acc_0.30,acc_0.50,acc_0.70" and len(lines) == 101


# --- PxAP -------------------------------------------------------------------

class TestPxap:
    def test_perfect(self):
        m = np.random.default_rng(0).random((8, 8)) < 0.4
        assert pxap([m.astype(float)], [m]) == 1.0

    @pytest.mark.parametrize("p_pixels", [8, 20, 50])
    def test_uniform_map(self, p_pixels):
        m = np.zeros(64, bool)
        m[:p_pixels] = True
        got = pxap([np.full((8, 8), 0.5)], [m.reshape(8, 8)])
        assert got == pytest.approx(p_pixels / 64, abs=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        maps, _, masks = random_instance(rng, 5, 8)
        for m in masks:
            m[0, 0] = True
        grid = threshold_grid(100)
        assert abs(pxap(maps, masks, grid) - naive_pxap(maps, masks, grid)) <= 1e-9

    def test_unsorted_grid(self):
        maps, _, masks = random_instance(np.random.default_rng(3), 3, 8)
        grid = threshold_grid(10)
        assert pxap(maps, masks, grid[::-1]) == pxap(maps, masks, grid)

    def test_per_image_variant(self):
        maps, _, masks = random_instance(np.random.default_rng(4), 3, 8)
        want = np.mean([pxap([h], [m]) for h, m in zip(maps, masks)])
        assert pxap(maps, masks, per_image=True) == pytest.approx(want, abs=1e-15)

    def test_errors(self):
        with pytest.raises(InvalidArgumentError):
            pxap([np.ones((4, 4))], [np.zeros((4, 4), bool)])
        with pytest.raises(InvalidArgumentError):
            pxap([np.ones((4, 4))], [np.ones((4, 5), bool)])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_range(self, seed):
        maps, _, masks = random_instance(np.random.default_rng(seed), 2, 6)
        masks[0][0, 0] = True
        assert 0.0 <= pxap(maps, masks) <= 1.0 + 1e-12


# --- top-k and diagnostics --------------------------------------------------

class TestTopk:
    def _setup(self):
        h = np.zeros((8, 8))
        h[2:6, 2:6] = 1.0
        maps = [h] * 4
        gts = [[(2, 2, 6, 6)]] * 4
        labels = np.array([0, 1, 2, 3])
        return maps, gts, labels

    def test_perfect(self):
        maps, gts, labels = self._setup()
        logits = np.eye(6)[labels]
        assert topk_loc_from(maps, gts, labels, logits, 1, 0.5) == 1.0

    def test_never_correct(self):
        maps, gts, labels = self._setup()
        logits = np.zeros((4, 6))
        logits[:, 5] = 1.0
        assert topk_loc_from(maps, gts, labels, logits, 1, 0.5) == 0.0

    def test_top5_dominates_top1(self):
        rng = np.random.default_rng(0)
        maps, gts, _ = random_instance(rng, 20, 10)
        labels = rng.integers(0, 8, 20)
        logits = rng.normal(size=(20, 8))
        for tau in (0.3, 0.6):
            assert topk_loc_from(maps, gts, labels, logits, 5, tau) >= topk_loc_from(maps, gts, labels, logits, 1, tau)

    def test_tie_breaking(self):
        assert topk_correct(np.array([[1.0, 1.0]]), np.array([0]), 1).tolist() == [True]


class TestBgProportion:
    def test_values(self):
        assert bg_proportion(BBox(2, 2, 4, 4), BBox(0, 0, 10, 10)) == 0.0
        assert bg_proportion(BBox(0, 0, 2, 2), BBox(5, 5, 9, 9)) == 1.0
        assert bg_proportion(BBox(0, 0, 10, 10), BBox(0, 0, 5, 10)) == 0.5

    def test_mask_region(self):
        m = np.zeros((10, 10), bool)
        m[:, :5] = True
        assert bg_proportion(BBox(0, 0, 10, 10), m) == 0.5


class TestFeatureDispersion:
    def test_identical(self):
        f = np.ones((6, 3))
        assert feature_dispersion(f, [0, 0, 0, 1, 1, 1]) == (0.0, 0.0)

    def test_symmetric_pair(self):
        assert feature_dispersion(np.array([[0.0], [2.0]]), [0, 0]) == (0.0, 0.0)

    def test_three_points(self):
        mean, spread = feature_dispersion(np.array([[0.0], [0.0], [3.0]]), [0, 0, 0])
        assert mean == pytest.approx(math.sqrt(2 / 9), abs=1e-12)
        assert mean == pytest.approx(0.4714, abs=5e-5)
        assert spread == 0.0

    def test_singleton_class(self):
        with pytest.raises(InvalidArgumentError):
            feature_dispersion(np.zeros((3, 2)), [0, 0, 1])
