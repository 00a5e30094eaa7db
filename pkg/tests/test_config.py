import pytest

from splatcolor.config import PipelineConfig, config_from_dict, load_config, save_config
from splatcolor.errors import ConfigError


def test_defaults_validate():
    cfg = load_config()
    assert cfg.weights.lambda_pc == 1.0 and cfg.weights.lambda_tcm == 0.1 and cfg.weights.lambda_cc == 0.05
    assert cfg.colorize.act_learning_rate == 1e-4 and cfg.features.downscale == 4


def test_round_trip(tmp_path):
    cfg = config_from_dict({"seed": 4, "weights": {"lambda_tcm": 0.3}, "synth": {"gain_range": [0.8, 1.25]},
                            "colorize": {"sh_degree_schedule": [[0, 0], [10, 3]]}})
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.digest() == cfg.digest()
    assert back.synth.gain_range == (0.8, 1.25)


def test_digest_tracks_content():
    assert PipelineConfig().digest() == PipelineConfig().digest()
    assert config_from_dict({"seed": 1}).digest() != PipelineConfig().digest()


@pytest.mark.parametrize("data", [
    {"bogus": 1}, {"weights": {"lambda_x": 1}}, {"weights": []}, {"weights": {"lambda_pc": -1}},
    {"pseudo": {"radius": -0.1}}, {"pseudo": {"stride": 0}}, {"features": {"source": "vgg"}},
    {"features": {"source": "precomputed"}}, {"render": {"sort": "random"}}, {"gray": {"iterations": 0}},
])
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_unreadable_and_malformed(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("weights: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
