import pytest
from hypothesis import given, settings, strategies as st

from cc2d.config import ConfigError, RunConfig, apply_overrides, config_from_dict, load_config, synthetic_config


def test_defaults():
    cfg = load_config()
    assert cfg.model.embed_dim == 16 and cfg.ssl.alpha == 19 and cfg.ssl.temperature == 10.0
    assert cfg.tpl.sigma == 3.0 and cfg.ssl.epochs == 3500 and cfg.network_size == 384
    assert cfg.model.aspp_dilations == [1, 6, 12, 18] and cfg.model.shared_weights is False


@pytest.mark.parametrize("preset", ["full", "synthetic"])
def test_yaml_round_trip(tmp_path, preset):
    cfg = load_config(preset)
    cfg.save(tmp_path / "c.yaml")
    again = load_config(tmp_path / "c.yaml")
    assert again == cfg and again.to_yaml() == cfg.to_yaml()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.sampled_from([1, 3, 9, 19, 25]), st.floats(0.1, 100),
       st.lists(st.integers(1, 5), min_size=1, max_size=5, unique=True))
def test_round_trip_property(embed, alpha, tau, levels):
    cfg = RunConfig()
    cfg.model.embed_dim, cfg.ssl.alpha, cfg.ssl.temperature = embed, alpha, tau
    cfg.infer.levels_enabled = levels
    assert config_from_dict(cfg.to_dict()) == cfg


def test_overrides_and_aliases():
    cfg = apply_overrides(synthetic_config(), ["L=32", "levels=5,4,3,2", "tau=5", "ssl.epochs=10"])
    assert cfg.model.embed_dim == 32 and cfg.infer.levels_enabled == [5, 4, 3, 2]
    assert cfg.ssl.temperature == 5.0 and cfg.ssl.epochs == 10
    assert apply_overrides(RunConfig(), ["levels=5"]).infer.levels_enabled == [5]


@pytest.mark.parametrize("override", ["alpha=4", "tau=0", "levels=0,1", "levels=[]", "nope=1", "ssl.nope=2",
                                      "sigma=0.5", "network_size=100", "L"])
def test_invalid_overrides(override):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), [override])


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    p = tmp_path / "bad.yaml"
    p.write_text("ssl: {alpha: 19, bogus: 1}\n")
    with pytest.raises(ConfigError, match="bogus"):
        load_config(p)
    p.write_text("ssl: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("ssl: {epochs: 1.5}\n")
    with pytest.raises(ConfigError):
        load_config(p)
