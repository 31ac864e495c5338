import json

import pytest

from cascade_sgg.config import (
    REPORT_DIR_ENV,
    STANDING_DEVIATIONS,
    RunConfig,
    config_to_dict,
    deviations,
    load_config,
    set_dotted,
)
from cascade_sgg.evaluation import ConfigError


def _write(tmp_path, doc, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def test_defaults():
    cfg = load_config(env={})
    assert cfg.data.split == [0.6, 0.2, 0.2]
    assert cfg.ppg.k1 == 10_000
    assert cfg.rpcm.iterations == 4
    assert cfg.eval.ks == [1500, 2000]
    assert cfg.eval.iou_threshold == 0.5
    assert cfg.eval.tasks == ["PredCls", "SGCls", "SGDet"]
    assert deviations(cfg) == list(STANDING_DEVIATIONS)


def test_file_values_and_nested_sections(tmp_path):
    p = _write(tmp_path, {"name": "x", "seed": 7, "rpcm": {"iterations": 2, "tau": 0.2}, "eval": {"ks": [20]}})
    cfg = load_config(p, env={})
    assert (cfg.name, cfg.seed, cfg.rpcm.iterations, cfg.rpcm.tau) == ("x", 7, 2, 0.2)
    assert cfg.rpcm.gamma1 == 1.0
    devs = deviations(cfg)
    assert "rpcm.iterations=2 (reference 4)" in devs
    assert "eval.ks=[20] (reference [1500, 2000])" in devs


def test_int_accepted_where_float_expected(tmp_path):
    cfg = load_config(_write(tmp_path, {"rpcm": {"tau": 1}}), env={})
    assert isinstance(cfg.rpcm.tau, float)


@pytest.mark.parametrize("doc, fragment", [
    ({"rpcm": {"iterationz": 3}}, "rpcm.iterationz"),
    ({"bogus": 1}, "bogus"),
    ({"rpcm": {"iterations": "4"}}, "integer"),
    ({"rpcm": {"iterations": True}}, "integer"),
    ({"rpcm": {"background": 1}}, "true/false"),
    ({"rpcm": 3}, "expected an object"),
    ({"data": {"split": [0.5, 0.2, 0.2]}}, "data.split"),
    ({"data": {"split": [0.8, 0.2]}}, "data.split"),
    ({"eval": {"tasks": ["PredCls", "Detect"]}}, "Detect"),
    ({"eval": {"predictor": "magic"}}, "predictor"),
    ({"rpcm": {"pair_mode": "all"}}, "pair_mode"),
    ({"rpcm": {"tau": 0}}, "tau"),
    ({"rpcm": {"k": 0}}, "rpcm.k"),
    ({"rpcm": {"k": 2.5}}, "rpcm.k"),
    ({"ppg": {"d_z": "big"}}, "ppg.d_z"),
    ({"rpcm": {"bg_ratio": -1}}, "bg_ratio"),
    ({"ppg": {"epochs": -1}}, "ppg.epochs"),
    ({"vocabulary": "missing.vocab"}, "missing.vocab"),
])
def test_rejected_configs(tmp_path, doc, fragment):
    with pytest.raises(ConfigError, match=fragment.replace(".", r"\.")):
        load_config(_write(tmp_path, doc), env={})


def test_optional_ints_accept_null_and_positive(tmp_path):
    cfg = load_config(_write(tmp_path, {"rpcm": {"k": 3, "bg_ratio": None}, "ppg": {"d_z": None}}), env={})
    assert (cfg.rpcm.k, cfg.rpcm.bg_ratio, cfg.ppg.d_z) == (3, None, None)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json", env={})
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  \"seed\": 1,\n}")
    with pytest.raises(ConfigError, match="line 3"):
        load_config(bad, env={})


def test_dotted_overrides():
    cfg = load_config(overrides=["rpcm.iterations=1", "eval.ks=[5,20]", "name=alt", "rpcm.bg_ratio=null"], env={})
    assert (cfg.rpcm.iterations, cfg.eval.ks, cfg.name, cfg.rpcm.bg_ratio) == (1, [5, 20], "alt", None)
    cfg = RunConfig()
    with pytest.raises(ConfigError, match="unknown config key"):
        set_dotted(cfg, "rpcm.nope=1")
    with pytest.raises(ConfigError, match="section"):
        set_dotted(cfg, "rpcm=1")
    with pytest.raises(ConfigError, match="key=value"):
        set_dotted(cfg, "rpcm.iterations")
    with pytest.raises(ConfigError):
        load_config(overrides=["rpcm.iterations=0"], env={})


def test_overrides_apply_after_file(tmp_path):
    p = _write(tmp_path, {"rpcm": {"iterations": 2}})
    assert load_config(p, ["rpcm.iterations=5"], env={}).rpcm.iterations == 5


def test_report_dir_from_environment(tmp_path):
    cfg = load_config(env={REPORT_DIR_ENV: str(tmp_path / "r")})
    assert cfg.paths.report_dir == str(tmp_path / "r")
    assert load_config(env={}).paths.report_dir == "reports"


def test_round_trip_through_dict(tmp_path):
    cfg = load_config(overrides=["seed=3", "rpcm.k=2"], env={})
    again = load_config(_write(tmp_path, config_to_dict(cfg)), env={})
    assert config_to_dict(again) == config_to_dict(cfg)


def test_relative_file_references_resolve_next_to_config(tmp_path):
    (tmp_path / "v.vocab").write_text("")
    cfg = load_config(_write(tmp_path, {"vocabulary": "v.vocab"}), env={})
    assert cfg.vocabulary == str((tmp_path / "v.vocab").resolve())
