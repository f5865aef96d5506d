"""Metric behaviour: rasterized overlap and pooled closest-point distances."""

import numpy as np
import pytest

from tractfield import (
    DomainError,
    Tract,
    VolumeGrid,
    hausdorff,
    spatial_overlap,
    voxelize,
)

from conftest import brute_force_hausdorff, make_mask


def two_point_tract(points, step=1.0):
    return Tract([np.asarray(points, dtype=float)], step)


class TestVoxelize:
    def test_axis_line_marks_crossed_voxels(self):
        mask = make_mask(np.zeros((5, 3, 3), dtype=np.uint8))
        tract = two_point_tract([(0.0, 0, 0), (2.0, 0, 0)])
        out = voxelize(tract, mask)
        expected = np.zeros((5, 3, 3), dtype=bool)
        expected[0:3, 0, 0] = True
        assert np.array_equal(out.foreground, expected)

    def test_points_outside_grid_ignored(self):
        mask = make_mask(np.zeros((5, 3, 3), dtype=np.uint8))
        tract = two_point_tract([(0.0, 0, 0), (8.0, 0, 0)], step=4.0)
        out = voxelize(tract, mask)
        assert out.foreground[:, 0, 0].all()
        assert int(out.foreground.sum()) == 5

    def test_empty_tract_gives_empty_mask(self):
        mask = make_mask(np.zeros((4, 4, 4), dtype=np.uint8))
        out = voxelize(Tract([], 0.5), mask)
        assert int(out.foreground.sum()) == 0

    def test_far_away_tract_gives_empty_mask(self):
        mask = make_mask(np.zeros((4, 4, 4), dtype=np.uint8))
        out = voxelize(two_point_tract([(50.0, 50, 50), (51.0, 51, 51)], 2.0), mask)
        assert int(out.foreground.sum()) == 0

    def test_duplicate_streamlines_idempotent(self):
        mask = make_mask(np.zeros((6, 6, 6), dtype=np.uint8))
        line = np.array([[1.0, 1.0, 1.0], [4.0, 3.0, 2.0]])
        once = voxelize(Tract([line], 4.0), mask)
        twice = voxelize(Tract([line, line.copy()], 4.0), mask)
        assert np.array_equal(once.foreground, twice.foreground)

    def test_mask_and_grid_references_agree(self):
        mask = make_mask(np.zeros((5, 5, 5), dtype=np.uint8))
        tract = two_point_tract([(0.0, 0, 0), (4.0, 4.0, 4.0)], step=4.0)
        via_mask = voxelize(tract, mask)
        via_grid = voxelize(tract, mask.grid)
        assert np.array_equal(via_mask.foreground, via_grid.foreground)

    def test_output_inherits_reference_geometry(self):
        grid = VolumeGrid(
            (4, 5, 6), (0.5, 1.0, 2.0), (-1.0, 3.0, 0.0), np.zeros((4, 5, 6), np.uint8)
        )
        out = voxelize(two_point_tract([(-1.0, 3.0, 0.0), (0.0, 3.0, 0.0)]), grid)
        assert out.grid.dims == grid.dims
        assert out.grid.spacing == grid.spacing
        assert out.grid.origin == grid.origin

    def test_respects_spacing_and_origin(self):
        grid = VolumeGrid(
            (5, 3, 3), (0.5, 0.5, 0.5), (10.0, 0.0, 0.0), np.zeros((5, 3, 3), np.uint8)
        )
        out = voxelize(two_point_tract([(10.0, 0, 0), (11.0, 0, 0)]), grid)
        assert np.flatnonzero(out.foreground[:, 0, 0]).tolist() == [0, 1, 2]
        assert int(out.foreground.sum()) == 3

    def test_diagonal_matches_dense_sampling_oracle(self):
        # a corner-to-corner diagonal must not skip voxels; a 1e4-point
        # sampling of the same segment decides which voxels count
        mask = make_mask(np.zeros((10, 10, 10), dtype=np.uint8))
        p0 = np.zeros(3)
        p1 = np.full(3, 9.0)
        out = voxelize(Tract([np.stack([p0, p1])], 8.0), mask)
        t = np.linspace(0.0, 1.0, 10_000)[:, None]
        samples = p0 + t * (p1 - p0)
        oracle = len(np.unique(np.floor(samples + 0.5).astype(int), axis=0))
        assert abs(int(out.foreground.sum()) - oracle) <= 2


class TestSpatialOverlap:
    def _mask_pair(self, build_a, build_b, dims=(10, 10, 10)):
        a = np.zeros(dims, dtype=np.uint8)
        b = np.zeros(dims, dtype=np.uint8)
        build_a(a)
        build_b(b)
        return make_mask(a), make_mask(b)

    def test_half_overlap_scores_fifty(self):
        def first_hundred(arr):
            arr.reshape(-1)[:100] = 1

        def shifted_hundred(arr):
            arr.reshape(-1)[50:150] = 1

        a, b = self._mask_pair(first_hundred, shifted_hundred)
        assert spatial_overlap(a, b) == 50.0

    def test_identical_masks_score_hundred(self, rng):
        data = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
        a = make_mask(data)
        b = make_mask(data.copy())
        assert spatial_overlap(a, b) == 100.0

    def test_disjoint_masks_score_zero(self):
        def left(arr):
            arr[:3] = 1

        def right(arr):
            arr[7:] = 1

        a, b = self._mask_pair(left, right)
        assert spatial_overlap(a, b) == 0.0

    def test_both_empty_scores_zero(self):
        a, b = self._mask_pair(lambda arr: None, lambda arr: None)
        assert spatial_overlap(a, b) == 0.0

    def test_one_empty_scores_zero(self):
        def some(arr):
            arr[2:4, 2:4, 2:4] = 1

        a, b = self._mask_pair(some, lambda arr: None)
        assert spatial_overlap(a, b) == 0.0

    def test_exact_dice_ratio(self):
        def single(arr):
            arr[0, 0, 0] = 1

        def pair(arr):
            arr[0, 0, 0] = 1
            arr[1, 0, 0] = 1

        a, b = self._mask_pair(single, pair)
        assert spatial_overlap(a, b) == pytest.approx(200.0 / 3.0, abs=1e-12)

    def test_symmetric(self, rng):
        a = make_mask((rng.random((6, 6, 6)) < 0.4).astype(np.uint8))
        b = make_mask((rng.random((6, 6, 6)) < 0.4).astype(np.uint8))
        assert spatial_overlap(a, b) == spatial_overlap(b, a)

    def test_bounded_by_zero_and_hundred(self, rng):
        for _ in range(10):
            a = make_mask((rng.random((5, 5, 5)) < 0.5).astype(np.uint8))
            b = make_mask((rng.random((5, 5, 5)) < 0.5).astype(np.uint8))
            score = spatial_overlap(a, b)
            assert 0.0 <= score <= 100.0

    def test_mismatched_geometry_raises(self):
        a = make_mask(np.ones((4, 4, 4), dtype=np.uint8))
        b = make_mask(np.ones((4, 4, 4), dtype=np.uint8), origin=(1.0, 0.0, 0.0))
        with pytest.raises(DomainError, match="different grids"):
            spatial_overlap(a, b)
        c = make_mask(np.ones((4, 4, 5), dtype=np.uint8))
        with pytest.raises(DomainError, match="different grids"):
            spatial_overlap(a, c)


class TestHausdorff:
    def _random_tract(self, rng, n=200):
        points = rng.uniform(0.0, 10.0, (n, 3))
        return Tract([points], step=20.0)

    def test_single_point_pair(self):
        a = two_point_tract([(0.0, 0, 0), (0.0, 0, 0)])
        b = two_point_tract([(3.0, 4.0, 0), (3.0, 4.0, 0)])
        assert hausdorff(a, b) == (5.0, 5.0)

    def test_identical_tracts_zero(self, rng):
        a = self._random_tract(rng)
        hd, ahd = hausdorff(a, a)
        assert hd == 0.0 and ahd == 0.0

    def test_matches_brute_force_oracle(self, rng):
        from tractfield import pooled_points

        for _ in range(5):
            a = self._random_tract(rng)
            b = self._random_tract(rng)
            expected = brute_force_hausdorff(pooled_points(a), pooled_points(b))
            assert hausdorff(a, b) == expected

    def test_pools_across_streamlines(self, rng):
        points = rng.uniform(0.0, 10.0, (40, 3))
        split = Tract([points[:25], points[25:]], step=20.0)
        joined = Tract([points], step=20.0)
        other = self._random_tract(rng, n=60)
        assert hausdorff(split, other) == hausdorff(joined, other)

    def test_symmetric(self, rng):
        a = self._random_tract(rng, n=80)
        b = self._random_tract(rng, n=120)
        assert hausdorff(a, b) == hausdorff(b, a)

    def test_translation_invariant(self, rng):
        a = self._random_tract(rng, n=50)
        b = self._random_tract(rng, n=50)
        shift = np.array([12.5, -3.25, 7.75])
        a2 = Tract([line + shift for line in a.streamlines], a.step)
        b2 = Tract([line + shift for line in b.streamlines], b.step)
        before = hausdorff(a, b)
        after = hausdorff(a2, b2)
        assert abs(before[0] - after[0]) <= 1e-9
        assert abs(before[1] - after[1]) <= 1e-9

    def test_max_dominates_average(self, rng):
        for _ in range(5):
            hd, ahd = hausdorff(self._random_tract(rng), self._random_tract(rng))
            assert hd >= ahd >= 0.0

    def test_empty_tract_raises(self):
        full = two_point_tract([(0.0, 0, 0), (1.0, 0, 0)])
        with pytest.raises(DomainError, match="nonempty"):
            hausdorff(Tract([], 1.0), full)
        with pytest.raises(DomainError, match="nonempty"):
            hausdorff(full, Tract([], 1.0))
