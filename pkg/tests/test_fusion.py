import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvsuq import fusion, geom
from mvsuq.errors import FrameMismatch, InsufficientViews, KBelowTwo

from .conftest import look_at


def brute_subset(values, eps):
    """Largest consistent subset by exhaustive enumeration over sorted positions."""
    vals = sorted(values)
    for size in range(len(vals), 0, -1):
        for pos in itertools.combinations(range(len(vals)), size):
            sub = [vals[i] for i in pos]
            med = float(np.median(sub))
            tol = eps * med
            if all(abs(v - med) <= tol for v in sub):
                return pos, sub
    return (), []


class TestConsistentSubset:
    def test_examples(self):
        assert fusion.consistent_subset([10.0, 10.05, 10.08, 12.0], 0.01) == [10.0, 10.05, 10.08]
        assert fusion.consistent_subset([5.0, None, float("nan")], 0.01) == [5.0]
        assert fusion.consistent_subset([], 0.01) == []
        assert len(fusion.consistent_subset([1.0, 2.0, 3.0], 0.01)) == 1

    def test_reference_examples(self):
        assert fusion.consistent_subset([10.0, 10.05, 10.02], 0.01) == [10.0, 10.02, 10.05]
        assert fusion.consistent_subset([10.0, 10.05, 30.0], 0.01) == [10.0, 10.05]
        assert fusion.consistent_subset([50.0, 50.2, 49.9, 80.0], 0.01) == [49.9, 50.0, 50.2]

    def test_tie_prefers_lowest_positions(self):
        assert fusion.consistent_subset([1.0, 1.0, 5.0, 5.0], 0.01) == [1.0, 1.0]

    @given(st.lists(st.floats(9.0, 11.0), min_size=1, max_size=7), st.sampled_from([0.005, 0.01, 0.03, 0.1]))
    def test_matches_brute_force(self, values, eps):
        _, sub = brute_subset(values, eps)
        assert fusion.consistent_subset(values, eps) == sub


def base_view(i=0):
    c = np.array([0.0, 0.0, 100.0])
    return geom.CameraView(i, 64, 64, 80.0, 80.0, 32.0, 32.0, look_at(c, (0, 0, 0)), c)


def scene_maps(seed, n=5, nan_frac=0.2):
    """Six views: a 64x64 base and five neighbour depth maps around a noisy plane."""
    rng = np.random.default_rng(seed)
    base = base_view()
    truth = 100.0 + rng.normal(0, 0.5, (64, 64))
    maps, centers = [], {}
    for j in range(1, n + 1):
        scale = np.where(rng.random((64, 64)) < 0.7, 1 + rng.normal(0, 0.004, (64, 64)),
                         1 + rng.normal(0, 0.05, (64, 64)))
        d = truth * scale
        d[rng.random((64, 64)) < nan_frac] = np.nan
        e = rng.uniform(0, 300, (64, 64))
        maps.append(fusion.DepthMap(0, j, d, e))
        ang = 2 * np.pi * j / n
        centers[j] = np.array([30 * np.cos(ang), 30 * np.sin(ang), 100.0])
    return base, maps, centers


def brute_fuse(base, maps, centers, k, eps):
    out = {}
    for r in range(base.height):
        for c in range(base.width):
            entries = [(m.depth[r, c], j) for j, m in enumerate(maps) if np.isfinite(m.depth[r, c])]
            if len(entries) < k:
                continue
            entries.sort(key=lambda t: t[0])
            pos, sub = brute_subset([z for z, _ in entries], eps)
            if len(sub) < k:
                continue
            depth = float(np.median(sub))
            used = [entries[p][1] for p in pos]
            X = base.back_project(np.array([[c, r]], float), np.array([depth]))[0]
            angs = [geom.intersection_angle(X, base.center, centers[maps[j].neighbor_id]) for j in used]
            out[r, c] = (depth, len(sub) + 1, float(np.median(angs)),
                         float(np.median([maps[j].dim_energy[r, c] for j in used])), X)
    return out


class TestFuseImage:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_brute_force_oracle(self, seed):
        base, maps, centers = scene_maps(seed)
        fmap, cloud = fusion.fuse_image(base, maps, k=2, eps_rel=0.01, neighbor_centers=centers)
        oracle = brute_fuse(base, maps, centers, 2, 0.01)
        got = {(int(r), int(c)): i for i, (r, c) in enumerate(cloud.source_pixel)}
        assert set(got) == set(oracle)
        for key, i in got.items():
            depth, rays, angle, energy, X = oracle[key]
            assert fmap.depth[key] == depth
            assert cloud.num_rays[i] == rays
            assert cloud.median_angle[i] == pytest.approx(angle, rel=1e-12)
            assert cloud.energy[i] == energy
            np.testing.assert_allclose(cloud.positions[i], X, rtol=1e-12)
        assert cloud.num_rays.min() >= 3 and cloud.num_rays.max() <= len(maps) + 1

    def test_order_invariance(self):
        base, maps, centers = scene_maps(3)
        _, a = fusion.fuse_image(base, maps, 2, 0.01, centers)
        _, b = fusion.fuse_image(base, maps[::-1], 2, 0.01, centers)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.num_rays, b.num_rays)
        assert np.array_equal(a.energy, b.energy)
        assert np.allclose(a.median_angle, b.median_angle, rtol=1e-12)
        assert [sorted(r[r >= 0]) for r in a.pair_ids] == [sorted(r[r >= 0]) for r in b.pair_ids]

    def test_hand_pixel(self):
        base = base_view()
        maps = [fusion.DepthMap(0, j, np.full((64, 64), z), np.full((64, 64), 10.0 * j))
                for j, z in enumerate((50.0, 50.2, 49.9, 80.0), start=1)]
        fmap, cloud = fusion.fuse_image(base, maps, 2, 0.01)
        assert fmap.depth[5, 7] == 50.0 and (cloud.num_rays == 4).all()
        assert (cloud.energy == 20.0).all()  # median of energies 10, 20, 30
        assert sorted(cloud.pair_ids[0][cloud.pair_ids[0] >= 0]) == [1, 2, 3]

    def test_unanimous(self):
        base = base_view()
        maps = [fusion.DepthMap(0, j, np.full((64, 64), 42.0), np.zeros((64, 64))) for j in range(1, 11)]
        fmap, cloud = fusion.fuse_image(base, maps, 2, 0.01)
        assert (fmap.depth == 42.0).all() and (cloud.num_rays == 11).all()

    def test_k_too_small(self):
        base, maps, centers = scene_maps(0)
        with pytest.raises(KBelowTwo):
            fusion.fuse_image(base, maps, k=1)

    def test_fewer_maps_than_k(self):
        base, maps, _ = scene_maps(0)
        fmap, cloud = fusion.fuse_image(base, maps[:1], k=2)
        assert len(cloud) == 0 and np.isnan(fmap.depth).all()

    def test_higher_k_is_subset(self):
        base, maps, centers = scene_maps(4)
        _, c2 = fusion.fuse_image(base, maps, 2, 0.01, centers)
        _, c4 = fusion.fuse_image(base, maps, 4, 0.01, centers)
        p2 = {tuple(p) for p in c2.source_pixel}
        assert {tuple(p) for p in c4.source_pixel} <= p2
        assert c4.num_rays.min() >= 5


class TestMergeAndNeighbors:
    def test_merge_orders_by_image(self):
        base, maps, centers = scene_maps(5)
        _, a = fusion.fuse_image(base, maps, 2, 0.01, centers)
        merged = fusion.merge_clouds([a, a.subset(np.arange(3))])
        assert len(merged) == len(a) + 3

    def test_merge_frame_mismatch(self):
        base, maps, centers = scene_maps(5)
        _, a = fusion.fuse_image(base, maps, 2, 0.01, centers)
        b = fusion.PointCloud(a.positions, a.source_image, a.source_pixel, a.num_rays, a.median_angle,
                              a.energy, a.pair_ids, frame="other")
        with pytest.raises(FrameMismatch):
            fusion.merge_clouds([a, b])

    def test_single_view_insufficient(self):
        with pytest.raises(InsufficientViews):
            fusion.select_neighbors([base_view()], 0, n=10, k=2)

    def test_usable_levels(self):
        assert fusion.usable_levels(1000, 4) == 4
        assert fusion.usable_levels(100, 4) == 2
        assert fusion.usable_levels(40, 4) == 1
