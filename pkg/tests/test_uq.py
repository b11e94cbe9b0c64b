import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvsuq import fusion, geom, uq
from mvsuq.errors import DegenerateSamples, EmptyTable, NonPositiveDepth, NoSamples


def view(i=0, c=(0.0, 0.0, 0.0)):
    return geom.CameraView(i, 1000, 1000, 1000.0, 1000.0, 500.0, 500.0, np.eye(3), np.asarray(c, float))


class TestReprojection:
    def test_three_four_five(self):
        # (1, 2, 10) projects to (600, 700)
        assert uq.reprojection_error((1, 2, 10), view(), (603, 704)) == 5.0

    def test_vectorised_matches_scalar(self, rng):
        pts = np.column_stack([rng.uniform(-3, 3, (20, 2)), rng.uniform(5, 50, 20)])
        corr = rng.uniform(0, 1000, (20, 2))
        got = uq.reprojection_errors(pts, view(), corr)
        exp = [uq.reprojection_error(p, view(), c) for p, c in zip(pts, corr)]
        np.testing.assert_allclose(got, exp, rtol=1e-12)

    def test_behind_camera(self):
        with pytest.raises(NonPositiveDepth):
            uq.reprojection_errors(np.array([[0.0, 0.0, -1.0]]), view(), np.zeros((1, 2)))


class TestGammaFit:
    @pytest.mark.parametrize("k,theta", [(2.0, 0.5), (1.0, 1.0), (0.6, 3.0)])
    def test_recovers_parameters(self, k, theta):
        x = np.random.default_rng(11).gamma(k, theta, 100_000)
        m = uq.fit_gamma(x)
        assert m.shape == pytest.approx(k, rel=0.02)
        assert m.scale == pytest.approx(theta, rel=0.02)

    @given(st.integers(0, 10_000), st.floats(0.3, 5.0))
    def test_moment_identity(self, seed, k):
        x = np.random.default_rng(seed).gamma(k, 1.3, 500)
        m = uq.fit_gamma(x)
        fitted = np.maximum(x, uq.ZERO_CLAMP)  # the identity holds for the samples as fitted
        assert abs(m.mean - fitted.mean()) <= 1e-9 * fitted.mean()

    def test_scale_equivariance(self, rng):
        x = rng.gamma(1.7, 0.8, 2000)
        a, b = uq.fit_gamma(x), uq.fit_gamma(4.0 * x)
        assert b.shape == pytest.approx(a.shape, rel=1e-9)
        assert b.scale == pytest.approx(4.0 * a.scale, rel=1e-9)

    def test_permutation_invariance(self, rng):
        x = rng.gamma(2.3, 0.4, 3001)
        assert uq.fit_gamma(x) == uq.fit_gamma(rng.permutation(x))

    def test_zero_clamp_counted(self):
        m = uq.fit_gamma([0.0, 0.5, 1.0, 2.0])
        assert m.clamped == 1 and m.shape > 0

    def test_degenerate(self):
        with pytest.raises(DegenerateSamples):
            uq.fit_gamma([0.7] * 10)
        with pytest.raises(DegenerateSamples):
            uq.fit_gamma([0.7])
        with pytest.raises(NoSamples):
            uq.fit_gamma([])
        with pytest.raises(ValueError):
            uq.fit_gamma([1.0, -1.0])


class TestTable:
    def test_undersized_bins_merge_right(self, rng):
        energy = np.concatenate([rng.uniform(0, 10, 50), rng.uniform(10, 20, 300), rng.uniform(20, 30, 40)])
        err = rng.gamma(2, 0.5, len(energy))
        t = uq.build_uq_table(energy, err, bin_size=10, min_samples=200)
        assert [(m.e_lo, m.e_hi) for m in t.models] == [(0.0, 30.0)]
        assert t.models[0].merged and t.models[0].sample_count == 390

    def test_regular_bins(self, rng):
        energy = np.repeat([5.0, 15.0, 25.0], 300)
        err = rng.gamma(2, 0.5, 900)
        t = uq.build_uq_table(energy, err, bin_size=10, min_samples=200)
        assert [(m.e_lo, m.e_hi, m.merged) for m in t.models] == [
            (0.0, 10.0, False), (10.0, 20.0, False), (20.0, 30.0, False)]
        for m, sl in zip(t.models, (slice(0, 300), slice(300, 600), slice(600, 900))):
            assert m.mean == pytest.approx(err[sl].mean(), rel=1e-9)

    def test_remainder_merges_left(self, rng):
        energy = np.concatenate([np.full(300, 5.0), np.full(50, 15.0)])
        t = uq.build_uq_table(energy, rng.gamma(2, 0.5, 350), bin_size=10, min_samples=200)
        assert [(m.e_lo, m.e_hi) for m in t.models] == [(0.0, 20.0)]

    def test_infer_edges(self):
        models = (uq.GammaModel(2.0, 0.5, 0.0, 10.0), uq.GammaModel(2.0, 1.0, 10.0, 20.0))
        t = uq.UqTable(10.0, 1, models)
        assert uq.infer_error(10.0, t) == (models[1], False)
        assert uq.infer_error(9.999, t) == (models[0], False)
        assert uq.infer_error(-5.0, t) == (models[0], True)
        assert uq.infer_error(20.0, t) == (models[1], True)
        with pytest.raises(EmptyTable):
            uq.infer_error(1.0, uq.UqTable(10.0, 1, ()))


def test_annotate_median_over_pairs():
    models = tuple(uq.GammaModel(1.0, mu, 10.0 * i, 10.0 * (i + 1)) for i, mu in enumerate((0.5, 0.7, 2.0)))
    t = uq.UqTable(10.0, 1, models)
    cloud = fusion.PointCloud(np.array([[0.0, 0.0, 5.0]]), np.array([0]), np.array([[1, 1]]), np.array([4]),
                              np.array([10.0]), np.array([15.0]), np.array([[1, 2, 3]], np.int32))
    maps = {}
    for j, e in zip((1, 2, 3), (25.0, 5.0, 15.0)):
        maps[(0, j)] = fusion.DepthMap(0, j, np.full((3, 3), 5.0), np.full((3, 3), e))
    out = uq.annotate_cloud(cloud, t, maps)
    assert out.extra["predicted_error_mean_px"][0] == pytest.approx(0.7)
    assert out.extra["uq_flag"][0] == 0.0
    assert "predicted_error_mean_px" not in cloud.extra
    single = uq.annotate_cloud(cloud, t)
    assert single.extra["predicted_error_mean_px"][0] == pytest.approx(0.7)


def test_collect_samples_exact_correspondence():
    base, nb = view(0), view(1, (1.0, 0.0, 0.0))
    X = base.back_project(np.array([[510.0, 490.0]]), np.array([10.0]))
    cloud = fusion.PointCloud(X, np.array([0]), np.array([[490, 510]]), np.array([6]), np.array([5.0]),
                              np.array([3.0]), np.array([[1]], np.int32))
    depth = np.full((1000, 1000), np.nan)
    depth[490, 510] = 10.0
    maps = {(0, 1): fusion.DepthMap(0, 1, depth, np.full((1000, 1000), 3.0))}
    s = uq.collect_samples(cloud, [0], {0: base, 1: nb}, maps)
    assert len(s) == 1 and s.error_px[0] == pytest.approx(0.0, abs=1e-9) and s.energy[0] == 3.0
    depth[490, 510] = 12.0
    s = uq.collect_samples(cloud, [0], {0: base, 1: nb}, maps)
    assert s.error_px[0] == pytest.approx(1000.0 * (1 / 10.0 - 1 / 12.0), rel=1e-9)
