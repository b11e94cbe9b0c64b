import numpy as np
import pytest

from mvsuq import geom, synth
from mvsuq.errors import InvalidSpec

TINY = synth.SceneSpec(n_nadir=2, n_oblique=2, oblique_heads=2, width=64, height=48,
                       footprint=(-30.0, 30.0, -24.0, 24.0), focal=100.0, supersample=1)


@pytest.fixture(scope="module")
def tiny():
    sc = synth.generate_scene(5, TINY)
    return sc, synth.render_scene(sc)


def test_deterministic(tiny):
    sc, (views, depths) = tiny
    views2, depths2 = synth.render_scene(synth.generate_scene(5, TINY))
    for a, b in zip(views, views2):
        assert np.array_equal(a.raster, b.raster)
    assert all(np.array_equal(a, b, equal_nan=True) for a, b in zip(depths, depths2))


def test_gt_depth_lies_on_surface(tiny):
    sc, (views, depths) = tiny
    for v, d in zip(views, depths):
        rows, cols = np.nonzero(np.isfinite(d))
        X = v.back_project(np.stack([cols, rows], axis=1).astype(float), d[rows, cols])
        np.testing.assert_allclose(X[:, 2], sc.height_at(X[:, 0], X[:, 1]), atol=1e-6)


def test_plane_ray_cast_exact():
    sc = synth.generate_scene(0, synth.SceneSpec(surface="plane", base_z=2.0, n_nadir=1, n_oblique=0))
    dirs = np.array([[0.0, 0.0, -1.0], [0.3, -0.2, -1.0], [0.0, 0.0, 1.0]])
    t = synth.cast_rays(sc, (0.0, 0.0, 100.0), dirs)
    assert t[0] == pytest.approx(98.0) and t[1] == pytest.approx(98.0) and np.isnan(t[2])


def test_view_kinds(tiny):
    sc, _ = tiny
    kinds = [geom.classify_view(v).kind for v in sc.views]
    assert kinds.count(geom.ViewKind.NADIR) == 2 and kinds.count(geom.ViewKind.OBLIQUE) == 2
    assert all(v.depth_prior is not None for v in sc.views)


def test_reference_within_footprint(tiny):
    sc, _ = tiny
    ref = sc.reference_cloud()
    x0, x1, y0, y1 = TINY.footprint
    assert ref.positions[:, 0].min() >= x0 and ref.positions[:, 0].max() <= x1 + 1e-9
    assert ref.positions[:, 1].min() >= y0 and ref.positions[:, 1].max() <= y1 + 1e-9


def test_textureless_regions_flat():
    spec = synth.SceneSpec(textureless_fraction=0.3, n_nadir=1, n_oblique=0)
    sc = synth.generate_scene(2, spec)
    assert (sc.contrast == 0).mean() == pytest.approx(0.3, abs=0.01)


def test_spec_round_trip_and_validation():
    assert synth.SceneSpec.from_dict(TINY.to_dict()) == TINY
    with pytest.raises(InvalidSpec):
        synth.generate_scene(0, synth.SceneSpec(surface="dome"))
    with pytest.raises(InvalidSpec):
        synth.generate_scene(0, synth.SceneSpec(n_nadir=0, n_oblique=0))
