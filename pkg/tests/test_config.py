import pytest

from cfag.config import ABLATION_PRESETS, ConfigError, ExperimentConfig, apply_override
from cfag.model import PAMode


def _cfg(**extra):
    return ExperimentConfig.from_dict({"seed": 1, "data": {"dir": "d"}, **extra})


def test_defaults_and_derived_seeds():
    cfg = _cfg()
    assert (cfg.split_seed, cfg.train_seed, cfg.cap_seed) == (1, 2, 3)
    assert cfg.cutoffs == [10, 20]
    assert cfg.hyper_params().pa_mode is PAMode.FULL
    assert cfg.data_paths()["ug"].name == "ug.tsv"


@pytest.mark.parametrize("bad", [
    {"sed": 1},
    {"model": {"dd": 3}},
    {"train": {"patiense": 3}},
    {"data": {"path": "x"}},
])
def test_unknown_keys_rejected(bad):
    with pytest.raises(ConfigError, match="unknown key"):
        ExperimentConfig.from_dict({"seed": 1, **bad})


@pytest.mark.parametrize("bad", [
    {"seed": None},
    {"seed": "abc"},
    {"seed": 1, "model": {"d": 5}},
    {"seed": 1, "model": {"pa_mode": "sometimes"}},
    {"seed": 1, "eval": {"cutoffs": [0]}},
    {"seed": 1, "cold_start": {"k": []}},
    {"seed": 1, "ablation": {"preset": "nope"}},
    {"seed": 1, "ablation": {"variants": [{"pa_mode": "full"}]}},
    {"seed": 1, "model": 3},
])
def test_invalid_values_rejected(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_missing_data_paths():
    cfg = ExperimentConfig.from_dict({"seed": 1})
    with pytest.raises(ConfigError):
        cfg.data_paths()


def test_load_resolves_relative_paths_and_overrides(tmp_path):
    p = tmp_path / "exp.yaml"
    p.write_text("seed: 4\ndata: {dir: data}\nmodel: {reg: 1e-4, d: 16}\noutput_dir: out\n")
    cfg = ExperimentConfig.load(p, ["model.d=32", "train.patience=3", "model.lr=5e-4"])
    assert cfg.hyper_params().d == 32 and cfg.hyper_params().reg == 1e-4 and cfg.hyper_params().lr == 5e-4
    assert cfg.train_config().patience == 3
    assert cfg.output_dir == tmp_path / "out"
    assert cfg.data_paths()["gi"] == tmp_path / "data" / "gi.tsv"


def test_load_errors_name_the_file(tmp_path):
    p = tmp_path / "exp.yaml"
    p.write_text("seed: 4\nmodle: {}\n")
    with pytest.raises(ConfigError, match="exp.yaml"):
        ExperimentConfig.load(p)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.yaml")


def test_override_syntax():
    d = {}
    apply_override(d, "a.b.c=[1, 2]")
    assert d == {"a": {"b": {"c": [1, 2]}}}
    with pytest.raises(ConfigError):
        apply_override(d, "novalue")


def test_ablation_presets():
    assert [v["name"] for v in _cfg().ablation_variants()] == ["CFAG", "w/o PA", "w/o item", "w/o group"]
    assert [v["name"] for v in _cfg(ablation={"preset": "layers"}).ablation_variants()] == ["CFAG", "P1", "M1", "M2"]
    assert set(ABLATION_PRESETS) == {"pa", "layers"}
