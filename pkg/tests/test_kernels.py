import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvsuq import kernels
from mvsuq.stereo import DIRECTIONS_8

pytestmark = pytest.mark.skipif(kernels.numba_backend is None, reason="numba unavailable")


def both(name, *args):
    a = getattr(kernels.numpy_backend, name)(*args)
    b = getattr(kernels.numba_backend, name)(*args)
    return a, b


def assert_same(a, b):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            assert_same(x, y)
        return
    assert a.dtype == b.dtype and a.shape == b.shape
    assert a.tobytes() == b.tobytes()


@given(st.integers(0, 10_000))
def test_census_identical(seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 6, (15, 21)).astype(np.int32)
    valid = rng.random((15, 21)) > 0.05
    assert_same(*both("census", img, valid, 7, 9))


@given(st.integers(0, 10_000))
def test_hamming_identical(seed):
    rng = np.random.default_rng(seed)
    H, W = 9, 17
    bl = rng.integers(0, 2**62, (H, W), dtype=np.uint64)
    br = rng.integers(0, 2**62, (H, W), dtype=np.uint64)
    okl, okr = rng.random((H, W)) > 0.1, rng.random((H, W)) > 0.1
    off = rng.integers(-3, 6, (H, W)).astype(np.int32)
    assert_same(*both("hamming_cost", bl, okl, br, okr, off, 6, 62))


@given(st.integers(0, 10_000), st.booleans())
def test_sgm_identical(seed, adaptive):
    rng = np.random.default_rng(seed)
    H, W, D = 8, 11, 6
    cost = rng.integers(0, 63, (H, W, D)).astype(np.uint16)
    off = rng.integers(0, 3, (H, W)).astype(np.int32)
    guide = rng.integers(0, 256, (H, W)).astype(np.int32)
    dirs = np.asarray(DIRECTIONS_8, np.int64)
    assert_same(*both("sgm", cost, off, guide, 8, 32, adaptive, dirs))


@given(st.integers(0, 10_000), st.sampled_from([0.001, 0.01, 0.05]))
def test_consistent_subsets_identical(seed, eps):
    rng = np.random.default_rng(seed)
    P, M = 50, 6
    vals = np.sort(100 * (1 + rng.normal(0, 2 * eps, (P, M))), axis=1)
    counts = rng.integers(0, M + 1, P).astype(np.int64)
    for i, c in enumerate(counts):
        vals[i, c:] = np.inf
    assert_same(*both("consistent_subsets", vals, counts, eps))


def test_active_backend_respects_env():
    import os
    disabled = os.environ.get("MVSUQ_DISABLE_NUMBA", "0") not in ("", "0")
    assert kernels.ACTIVE == ("numpy" if disabled else "numba")
