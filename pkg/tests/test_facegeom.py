import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facekd import facegeom as FG
from facekd.engine import ContractError, Tensor, tsum


def grid7():
    return FG.CellGrid(7, 112, 112)


class TestEuclideanDistance:
    def test_identity(self):
        assert FG.euclidean_distance((3, 3), (3, 3)) == 0.0

    def test_diagonal(self):
        assert FG.euclidean_distance((0, 0), (3, 3)) == pytest.approx(
            math.sqrt(18), abs=1e-12
        )

    def test_axis(self):
        assert FG.euclidean_distance((6, 3), (3, 3)) == 3.0


class TestSaliencyCount:
    def test_direct_count(self):
        grid = FG.CellGrid(2, 32, 32)
        lm = FG.LandmarkSet(np.array([[10, 10], [12, 14]]), np.zeros((5, 2)))
        assert FG.saliency_count(lm, grid, 0) == 2

    def test_empty(self):
        grid = FG.CellGrid(2, 32, 32)
        lm = FG.LandmarkSet(np.zeros((0, 2)), np.zeros((5, 2)))
        for cell in range(grid.num_cells):
            assert FG.saliency_count(lm, grid, cell) == 0

    def test_half_open_boundary(self):
        grid = FG.CellGrid(2, 32, 32)
        lm = FG.LandmarkSet(np.array([[16.0, 8.0]]), np.zeros((5, 2)))
        assert FG.saliency_count(lm, grid, 0) == 0
        assert FG.saliency_count(lm, grid, 1) == 1

    def test_counts_total_equals_landmarks(self):
        rng = np.random.default_rng(0)
        grid = grid7()
        for _ in range(50):
            pts = rng.uniform(0, 112, size=(26, 2))
            lm = FG.LandmarkSet(pts, np.zeros((5, 2)))
            assert grid.landmark_counts(lm).sum() == 26


class TestSaliencyDistance:
    def grid_with_counts(self, counts):
        # place `counts[i]` landmarks at cell i's centroid
        grid = FG.CellGrid(int(math.isqrt(len(counts))), 112, 112)
        pts = []
        for i, c in enumerate(counts):
            pts.extend([grid.centroids[i]] * c)
        return grid, FG.LandmarkSet(np.array(pts).reshape(-1, 2), np.zeros((5, 2)))

    def test_hand(self):
        counts = [0] * 9
        counts[1] = 3
        counts[4] = 7  # anchor of a 3x3 grid
        counts[2] = 10
        grid, lm = self.grid_with_counts(counts)
        assert FG.saliency_distance(1, grid.anchor, lm, grid) == pytest.approx(0.4)

    def test_identity(self):
        grid, lm = self.grid_with_counts([1, 2, 3, 4, 5, 6, 7, 8, 9])
        assert FG.saliency_distance(grid.anchor, grid.anchor, lm, grid) == 0.0

    def test_extremal(self):
        counts = [0] * 9
        counts[0] = 10
        grid, lm = self.grid_with_counts(counts)
        assert FG.saliency_distance(0, grid.anchor, lm, grid) == 1.0

    def test_all_empty_warns_zero(self):
        grid = grid7()
        lm = FG.LandmarkSet(np.zeros((0, 2)), np.zeros((5, 2)))
        with pytest.warns(UserWarning):
            assert FG.saliency_distance(0, grid.anchor, lm, grid) == 0.0

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(1)
        grid = grid7()
        for _ in range(200):
            pts = rng.uniform(0, 112, size=(26, 2))
            lm = FG.LandmarkSet(pts, np.zeros((5, 2)))
            i, j = rng.integers(0, grid.num_cells, size=2)
            dij = FG.saliency_distance(i, j, lm, grid)
            dji = FG.saliency_distance(j, i, lm, grid)
            assert dij == dji
            assert 0.0 <= dij <= 1.0


class TestRelativeDistance:
    def test_345_triangle(self):
        d = FG.relative_distance_vector((0, 0), np.array([[3, 4]] * 5))
        assert d[0] == 5.0

    def test_coincident_zero(self):
        d = FG.relative_distance_vector((3, 4), np.array([[3, 4]] + [[0, 0]] * 4))
        assert d[0] == 0.0

    def test_all_coincident_zero_vector(self):
        d = FG.relative_distance_vector((3, 4), np.array([[3, 4]] * 5))
        assert np.array_equal(d, np.zeros(5))

    def test_identical_vectors(self):
        grid = grid7()
        kp = np.array([[10, 10], [90, 10], [56, 50], [30, 90], [80, 90]])
        assert FG.relative_distance(grid.anchor, grid.anchor, kp, grid) == \
            pytest.approx(0.0, abs=1e-12)

    def test_scale_invariance(self):
        # cosine of (d, 2d) is 1 regardless of the vectors
        v = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        cos = np.dot(v, 2 * v) / (np.linalg.norm(v) * np.linalg.norm(2 * v))
        assert abs(1.0 - cos) < 1e-12

    def test_orthogonal_is_one(self):
        a = np.array([1.0, 0, 0, 0, 0])
        b = np.array([0, 1.0, 0, 0, 0])
        cos = np.dot(a, b)
        assert 1.0 - cos == 1.0

    def test_zero_vector_warns(self):
        grid = FG.CellGrid(3, 30, 30)
        # every keypoint on the centroid of cell 0
        kp = np.tile(grid.centroids[0], (5, 1))
        with pytest.warns(UserWarning):
            assert FG.relative_distance(0, grid.anchor, kp, grid) == 0.0


class TestCombinedDistance:
    def test_gamma_zero_bit_equal_euclidean(self):
        grid = grid7()
        rng = np.random.default_rng(2)
        lm = FG.LandmarkSet(rng.uniform(0, 112, (26, 2)),
                            rng.uniform(0, 112, (5, 2)))
        for i in range(grid.num_cells):
            d0 = FG.combined_distance(i, grid.anchor, grid, FG.MODE_SD, 0.0, lm)
            de = FG.euclidean_distance(grid.grid_coords(i),
                                       grid.grid_coords(grid.anchor))
            assert d0 == de  # bitwise

    def test_hand(self):
        grid = FG.CellGrid(3, 30, 30)
        # D̃=4.2426, D_face=0.4, γ=10 → 8.2426 is exercised directly
        assert math.sqrt(18) + 10 * 0.4 == pytest.approx(8.2426, abs=1e-4)

    def test_anchor_is_zero(self):
        grid = grid7()
        rng = np.random.default_rng(3)
        lm = FG.LandmarkSet(rng.uniform(0, 112, (26, 2)),
                            rng.uniform(0, 112, (5, 2)))
        for mode in FG.FACIAL_MODES:
            d = FG.combined_distance(grid.anchor, grid.anchor, grid, mode, 5.0, lm)
            assert d == 0.0


class TestPEIndex:
    DMAX = 40.0

    def test_linear_region(self):
        assert FG.pe_index(2.0, 4, 16, self.DMAX) == 2

    def test_boundary(self):
        assert FG.pe_index(4.0, 4, 16, self.DMAX) == 4

    def test_clipped(self):
        assert FG.pe_index(self.DMAX, 4, 16, self.DMAX) == 16
        assert FG.pe_index(self.DMAX * 10, 4, 16, self.DMAX) == 16

    def test_negative_rejected(self):
        with pytest.raises(ContractError):
            FG.pe_index(-0.1, 4, 16, self.DMAX)

    def test_monotone_sweep(self):
        d = np.linspace(0.0, 50.0, 10000)
        idx = FG.pe_index_array(d, 4, 16, self.DMAX)
        assert np.all(np.diff(idx) >= 0)
        assert idx.min() >= 0 and idx.max() <= 16

    def test_array_matches_scalar(self):
        d = np.linspace(0.0, 50.0, 500)
        idx = FG.pe_index_array(d, 4, 16, self.DMAX)
        for dv, iv in zip(d, idx):
            assert FG.pe_index(float(dv), 4, 16, self.DMAX) == iv

    @given(st.floats(min_value=0.0, max_value=1e6),
           st.floats(min_value=0.0, max_value=1e6))
    @settings(max_examples=200, deadline=None)
    def test_monotone_property(self, a, b):
        lo, hi = sorted((a, b))
        assert FG.pe_index(lo, 4, 16, self.DMAX) <= FG.pe_index(hi, 4, 16, self.DMAX)


class TestPELookup:
    def make(self, mode=FG.MODE_NONE):
        grid = grid7()
        buckets = FG.PEBuckets.create(grid, mode=mode)
        buckets.table.data[:] = np.arange(buckets.table.shape[0])[:, None] * 0.1
        return grid, buckets

    def test_equal_distance_equal_value(self):
        grid, buckets = self.make()
        # cells one step left and right of the anchor
        v1 = FG.pe_lookup(buckets, grid, grid.anchor - 1, grid.anchor)
        v2 = FG.pe_lookup(buckets, grid, grid.anchor + 1, grid.anchor)
        assert np.array_equal(v1.data, v2.data)

    def test_anchor_is_bucket_zero(self):
        grid, buckets = self.make()
        v = FG.pe_lookup(buckets, grid, grid.anchor, grid.anchor)
        assert v.data.ravel()[0] == buckets.table.data[0, 0]

    def test_gradient_is_occupancy_counts(self):
        grid, buckets = self.make()
        idx = buckets.indices_for_grid(grid)
        # independent occupancy count oracle
        expected = np.zeros(buckets.table.shape[0])
        for b in idx:
            expected[b] += 1.0
        total = tsum(FG.pe_bias_batch(buckets, grid, [None]))
        total.backward()
        assert np.array_equal(buckets.table.grad.ravel(), expected)

    def test_batch_shapes(self):
        grid, buckets = self.make(FG.MODE_SD)
        rng = np.random.default_rng(4)
        lms = [FG.LandmarkSet(rng.uniform(0, 112, (26, 2)),
                              rng.uniform(0, 112, (5, 2))) for _ in range(3)]
        bias = FG.pe_bias_batch(buckets, grid, lms)
        assert bias.shape == (3, grid.num_cells, 1)


class TestLandmarkIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        recs = [
            (f"img{i}", FG.LandmarkSet(rng.uniform(0, 32, (26, 2)),
                                       rng.uniform(0, 32, (5, 2))))
            for i in range(4)
        ]
        path = tmp_path / "landmarks.jsonl"
        FG.write_landmark_file(path, recs)
        loaded = FG.read_landmark_file(path)
        assert set(loaded) == {r[0] for r in recs}
        for rid, lm in recs:
            assert np.array_equal(loaded[rid].dense, lm.dense)
            assert np.array_equal(loaded[rid].sparse, lm.sparse)

    def test_flip_swaps_eyes(self):
        lm = FG.LandmarkSet(
            np.array([[1.0, 1.0]]),
            np.array([[8, 10], [24, 10], [16, 16], [10, 24], [22, 24]]),
        )
        flipped = lm.flipped_horizontal(32)
        assert np.array_equal(flipped.sparse[0], [31 - 24, 10])
        assert np.array_equal(flipped.sparse[1], [31 - 8, 10])

    def test_validate_bounds(self):
        lm = FG.LandmarkSet(np.array([[40.0, 1.0]]), np.zeros((5, 2)))
        with pytest.raises(ContractError):
            lm.validate(32, 32)
