"""Hot inner loops with two interchangeable backends.

The numba backend is used when numba imports cleanly and the environment
variable ``MVSUQ_DISABLE_NUMBA`` is unset (or ``0``). Setting it to ``1`` routes
every call through the pure-numpy implementations, which produce bit-identical
results.
"""

import os

from . import _numpy as numpy_backend

try:
    from . import _numba as numba_backend
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba_backend = None

_disabled = os.environ.get("MVSUQ_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")
USE_NUMBA = numba_backend is not None and not _disabled

BACKENDS = {"numpy": numpy_backend}
if numba_backend is not None:
    BACKENDS["numba"] = numba_backend

ACTIVE = "numba" if USE_NUMBA else "numpy"


def get_backend(name=None):
    """Return the kernel module for ``name`` (default: the active backend)."""
    return BACKENDS[name or ACTIVE]


def census(img, valid, win_h, win_w, backend=None):
    return get_backend(backend).census(img, valid, win_h, win_w)


def hamming_cost(bits_l, ok_l, bits_r, ok_r, offset, ndisp, sentinel, backend=None):
    return get_backend(backend).hamming_cost(bits_l, ok_l, bits_r, ok_r, offset, ndisp, sentinel)


def sgm(cost, offset, guide, p1, p2, adaptive, dirs, backend=None):
    return get_backend(backend).sgm(cost, offset, guide, p1, p2, adaptive, dirs)


def consistent_subsets(values, counts, eps, backend=None):
    return get_backend(backend).consistent_subsets(values, counts, eps)
