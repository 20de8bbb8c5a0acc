import pytest

from onda.config import (ConfigError, GridSpec, PipelineConfig, apply_overrides, expand_grid, grid_configs,
                         pipeline_config, read_yaml, synth_config)


def test_defaults_and_nested_overrides():
    cfg = pipeline_config({"variant": "OnDA1", "online_ratio": 0.5, "finetune": {"epochs": 3},
                           "pruning": {"n_probes": 4}})
    assert cfg.finetune.epochs == 3 and cfg.finetune.lr == PipelineConfig().finetune.lr
    assert cfg.pruning.n_probes == 4 and cfg.validate() is cfg


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        pipeline_config({"varient": "Baseline"})
    with pytest.raises(ConfigError, match="unknown keys"):
        pipeline_config({"finetune": {"epoch": 3}})
    with pytest.raises(ConfigError):
        synth_config({"n_classes": 3})


@pytest.mark.parametrize("bad", [
    {"variant": "OnDA3"},
    {"variant": "OnDA1"},
    {"variant": "Baseline", "online_ratio": 0.5},
    {"variant": "OfflinePruneOnly"},
    {"variant": "OnDA2", "online_ratio": 1.0},
    {"offline_ratio": -0.1},
    {"dtype": "float16"},
])
def test_validation_errors(bad):
    with pytest.raises(ConfigError):
        pipeline_config(bad).validate()


def test_overrides_parse_yaml_scalars():
    d = apply_overrides({"finetune": {"lr": 0.1}}, ["finetune.epochs=4", "seed=2", "arch=DSCNNMini"])
    assert d == {"finetune": {"lr": 0.1, "epochs": 4}, "seed": 2, "arch": "DSCNNMini"}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        apply_overrides({"seed": 1}, ["seed.x=2"])


def test_read_yaml_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        read_yaml(tmp_path / "missing.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        read_yaml(tmp_path / "list.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1,\n")
    with pytest.raises(ConfigError, match="YAML"):
        read_yaml(tmp_path / "bad.yaml")


def test_grid_expansion_lattice():
    grid = GridSpec(archs=["ResNetMini", "DSCNNMini"], offline_ratios=[0.0, 0.5], online_ratios=[0.25, 0.75],
                    online_variants=["OnDA1", "OnDA2"], seeds=[0, 1])
    cfgs = expand_grid(PipelineConfig(), grid)
    # per (arch, off, seed): one offline/baseline point plus 2 variants x 2 ratios
    assert len(cfgs) == 2 * 2 * 2 * (1 + 4)
    assert len({c.run_id() for c in cfgs}) == len(cfgs)
    assert {c.variant for c in cfgs if c.online_ratio is None} == {"Baseline", "OfflinePruneOnly"}
    assert all((c.variant == "OfflinePruneOnly") == (c.offline_ratio > 0 and c.online_ratio is None) for c in cfgs)


def test_grid_configs_from_mapping():
    cfgs = grid_configs({"dtype": "float32", "grid": {"archs": ["ResNetMini"], "offline_ratios": [0.0],
                                                      "online_ratios": [0.5], "seeds": [4]}})
    assert [c.run_id() for c in cfgs] == ["Baseline_ResNetMini_off0_s4", "OnDA1_ResNetMini_off0_on0.5_s4",
                                         "OnDA2_ResNetMini_off0_on0.5_s4"]
    assert all(c.dtype == "float32" for c in cfgs)
