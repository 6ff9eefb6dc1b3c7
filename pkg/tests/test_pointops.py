from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuselab.pointops import (EncoderError, SamplingError, encode_point_cloud, farthest_point_sample, fps_batch,
                              group_index_array, group_neighbors, pad_cloud)
from fuselab.tensorops import ParamStore


def greedy_oracle(points, k, start):
    """Exhaustive greedy FPS: maximize the distance to the chosen set, lowest index on ties."""
    chosen = [start]
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i in range(len(points)):
            if i in chosen:
                continue
            d = min(float(((points[i] - points[c]) ** 2).sum()) for c in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


class TestFarthestPointSample:
    def test_all_points_in_greedy_order(self, rng):
        pts = rng.normal(size=(7, 3))
        idx = farthest_point_sample(pts, 7, 2)
        assert sorted(idx) == list(range(7))
        assert list(idx) == greedy_oracle(pts, 7, 2)

    def test_collinear_endpoints(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
        assert set(farthest_point_sample(pts, 2, 0)) == {0, 3}

    def test_exhaustive_small_clouds(self):
        rng = np.random.default_rng(0)
        for n in range(1, 11):
            pts = rng.normal(size=(n, 3))
            for k, s in itertools.product(range(1, n + 1), range(n)):
                assert list(farthest_point_sample(pts, k, s)) == greedy_oracle(pts, k, s)

    def test_duplicate_points_tie_break(self):
        pts = np.zeros((4, 3))
        assert list(farthest_point_sample(pts, 4, 1)) == [1, 0, 2, 3]

    @pytest.mark.parametrize("k,start", [(0, 0), (5, 0), (2, 4)])
    def test_bad_arguments(self, k, start):
        with pytest.raises(SamplingError):
            farthest_point_sample(np.zeros((4, 3)), k, start)

    def test_batch_matches_single(self, rng):
        pts = rng.normal(size=(3, 20, 3))
        start = np.array([0, 5, 19])
        out = fps_batch(pts, 6, start)
        for b in range(3):
            np.testing.assert_array_equal(out[b], farthest_point_sample(pts[b], 6, start[b]))

    @given(st.integers(2, 30), st.integers(1, 6), st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_indices_unique(self, n, k, seed):
        pts = np.random.default_rng(seed).normal(size=(n, 3))
        idx = farthest_point_sample(pts, min(k, n), 0)
        assert len(set(idx.tolist())) == len(idx)


class TestGrouping:
    def test_saturated_radius_gives_nearest(self, rng):
        pts = rng.normal(size=(30, 3))
        groups = group_neighbors(pts, [0, 4], radius=100.0, max_pts=5)
        for s, g in zip([0, 4], groups):
            d = np.linalg.norm(pts - pts[s], axis=1)
            assert set(g) == set(np.argsort(d)[:5])

    def test_tiny_radius_gives_seed(self, rng):
        pts = rng.normal(size=(30, 3))
        groups = group_neighbors(pts, [3, 7], radius=1e-12, max_pts=5)
        assert [g.tolist() for g in groups] == [[3], [7]]

    def test_distance_filter_oracle(self, rng):
        pts = rng.normal(size=(50, 3))
        seeds = [0, 10, 20]
        groups = group_neighbors(pts, seeds, radius=0.8, max_pts=50)
        for s, g in zip(seeds, groups):
            ref = {i for i in range(50) if np.linalg.norm(pts[i] - pts[s]) < 0.8}
            assert set(g.tolist()) == ref

    def test_fixed_size_groups_pad_with_nearest(self, rng):
        pts = rng.normal(size=(1, 40, 3))
        idx = group_index_array(pts, np.array([[0, 1]]), 0.5, 8)
        assert idx.shape == (1, 2, 8)
        for j, s in enumerate([0, 1]):
            ref = set(group_neighbors(pts[0], [s], 0.5, 8)[0].tolist())
            assert set(idx[0, j].tolist()) == ref

    def test_nonpositive_radius(self):
        with pytest.raises(ValueError):
            group_neighbors(np.zeros((3, 3)), [0], 0.0, 2)


class TestEncoder:
    def test_desk_shapes(self, profile, rng):
        tokens, glob = encode_point_cloud(rng.normal(size=(256, 3)), ParamStore(0), "depth", profile)
        assert tokens.shape == (1, 16, 3 + 64)
        assert glob.shape == (1, 64)

    def test_repeated_point(self, profile):
        pts = np.tile([0.2, 0.1, 1.0], (64, 1))
        tokens, _ = encode_point_cloud(pts, ParamStore(0), "radar", profile)
        t = tokens.data[0]
        np.testing.assert_allclose(t[:, :3], profile.to_net(pts[:16]), atol=1e-12)
        np.testing.assert_allclose(t - t[0], 0.0, atol=1e-12)

    def test_translation_shifts_only_xyz(self, profile, rng):
        pts = rng.normal(scale=0.3, size=(128, 3))
        p = ParamStore(0)
        a, _ = encode_point_cloud(pts, p, "depth", profile)
        b, _ = encode_point_cloud(pts + np.array([0.5, -0.2, 0.1]), p, "depth", profile)
        shift = np.array([0.5, -0.2, 0.1]) / profile.length_unit
        np.testing.assert_allclose(b.data[0, :, :3] - a.data[0, :, :3], np.tile(shift, (16, 1)), atol=1e-9)
        np.testing.assert_allclose(b.data[0, :, 3:], a.data[0, :, 3:], atol=1e-9)

    def test_small_cloud_is_padded(self, profile, rng):
        tokens, _ = encode_point_cloud(rng.normal(size=(5, 3)), ParamStore(0), "radar", profile)
        assert tokens.shape == (1, 16, 67)

    def test_empty_cloud(self, profile):
        with pytest.raises(EncoderError):
            encode_point_cloud(np.zeros((0, 3)), ParamStore(0), "radar", profile)

    def test_branches_do_not_share_weights(self, profile, rng):
        p = ParamStore(0)
        pts = rng.normal(size=(64, 3))
        encode_point_cloud(pts, p, "depth", profile)
        encode_point_cloud(pts, p, "radar", profile)
        assert {k.split(".")[0] for k in p.keys()} == {"depth", "radar"}

    def test_pad_cloud_repeats_members(self, rng):
        pts = rng.normal(size=(3, 3))
        out = pad_cloud(pts, 8, rng)
        assert out.shape == (8, 3)
        assert all(any(np.array_equal(r, q) for q in pts) for r in out)
