"""Pipeline configuration with a lossless JSON round trip."""

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import InputError, KBelowTwo
from .fusion import StereoSettings
from .stereo import SgmParams


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of a pipeline run.

    Defaults mirror the owning modules. Energy bins for reports and the UQ
    table default to 1000 cost units; small synthetic scenes usually need a
    narrower width because their per-pixel energies are far lower.
    """

    n_neighbors: int = 10
    k_consistency: int = 2
    eps_rel: float = 0.01
    census_window: tuple = (9, 7)
    lambda_p1: int = 8
    lambda_p2: int = 32
    path_count: int = 8
    pyramid_levels: int = 4
    adaptive_p2: bool = True
    subpixel: bool = True
    search_band: int = 4
    d_range_margin: int = 2
    neighbor_rays: int = 256
    tilt_threshold_deg: float = 20.0
    ray_edges: tuple = tuple(range(3, 12))
    angle_edges: tuple = tuple(float(a) for a in range(0, 55, 5))
    energy_bin_size: float = 1000.0
    error_threshold_m: float = 0.5
    icp: bool = True
    icp_max_iters: int = 50
    icp_conv_tol: float = 1e-6
    icp_trim: float = 0.1
    icp_min_rays: int = 6
    icp_max_points: int = 20000
    report_max_pair_points: int = 5000
    uq_bin_size: float = 1000.0
    uq_min_samples: int = 200
    min_rays: int = 6
    self_gate_px: float = 1.0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("census_window", "ray_edges", "angle_edges"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if self.n_neighbors < 1:
            raise InputError("n_neighbors must be >= 1")
        if self.k_consistency < 2:
            raise KBelowTwo(f"k must be >= 2, got {self.k_consistency}")
        if self.k_consistency > self.n_neighbors:
            raise InputError("k_consistency cannot exceed n_neighbors")
        if not self.eps_rel > 0:
            raise InputError("eps_rel must be positive")
        if self.energy_bin_size <= 0 or self.uq_bin_size <= 0:
            raise InputError("bin sizes must be positive")
        if self.min_rays < 3:
            raise InputError("min_rays must be >= 3")
        if self.error_threshold_m <= 0:
            raise InputError("error threshold must be positive")
        self.sgm_params()

    def sgm_params(self):
        return SgmParams(self.lambda_p1, self.lambda_p2, self.path_count, self.pyramid_levels,
                         self.adaptive_p2, self.subpixel)

    def stereo_settings(self):
        return StereoSettings(self.sgm_params(), self.census_window, self.search_band, self.d_range_margin)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return PipelineConfig.from_dict(d)

    def to_dict(self):
        d = asdict(self)
        for name in ("census_window", "ray_edges", "angle_edges"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown config keys: {unknown}")
        return cls(**data)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())
