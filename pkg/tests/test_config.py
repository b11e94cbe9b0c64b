import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvsuq.config import PipelineConfig
from mvsuq.errors import InputError, KBelowTwo


def test_defaults_round_trip():
    cfg = PipelineConfig()
    assert PipelineConfig.from_json(cfg.to_json()) == cfg


@given(st.integers(2, 12), st.floats(1e-4, 0.5), st.integers(0, 20), st.integers(0, 40),
       st.floats(1.0, 5000.0), st.booleans())
def test_round_trip(n, eps, p1, extra_p2, bin_size, icp):
    cfg = PipelineConfig(n_neighbors=n, k_consistency=2, eps_rel=eps, lambda_p1=p1, lambda_p2=p1 + extra_p2,
                         uq_bin_size=bin_size, icp=icp, extra={"note": "x"})
    assert PipelineConfig.from_json(cfg.to_json()) == cfg
    assert PipelineConfig.from_json(cfg.to_json()).to_json() == cfg.to_json()


def test_load_file(tmp_path):
    cfg = PipelineConfig(seed=9)
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert PipelineConfig.load(tmp_path / "c.json") == cfg


def test_validation():
    with pytest.raises(KBelowTwo):
        PipelineConfig(k_consistency=1)
    with pytest.raises(InputError):
        PipelineConfig(lambda_p1=40, lambda_p2=10)
    with pytest.raises(InputError):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(InputError):
        PipelineConfig(n_neighbors=2, k_consistency=3)


def test_replace():
    cfg = PipelineConfig().replace(uq_bin_size=20.0)
    assert cfg.uq_bin_size == 20.0 and cfg.sgm_params().lambda_p2 == 32
