"""Depth-map-fusion multi-view stereo with per-point reliability metrics.

Modules: :mod:`~mvsuq.geom` (cameras, triangulation, rectification),
:mod:`~mvsuq.stereo` (census cost and SGM), :mod:`~mvsuq.fusion`
(k-of-n depth-map fusion), :mod:`~mvsuq.evaluate` (reference-based accuracy),
:mod:`~mvsuq.uq` (Gamma error models) and :mod:`~mvsuq.pipeline` (orchestration).
"""

__version__ = "0.1.0"
