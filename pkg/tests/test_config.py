import pytest

from surfwatch.config import AppConfig, ConfigError, from_dict, load_config, override
from surfwatch.model import NetworkConfig


def test_defaults_round_trip(tmp_path):
    cfg = AppConfig()
    p = tmp_path / "c.yaml"
    cfg.dump(p)
    back = load_config(p, env={})
    assert back == cfg


def test_training_defaults():
    cfg = AppConfig()
    assert cfg.train.learning_rate == 1e-3 and cfg.train.weight_decay == 1e-7
    assert cfg.train.batch_size == 16 and cfg.train.epochs == 1200
    assert (cfg.network.w_adv, cfg.network.w_con, cfg.network.w_enc) == (1.0, 40.0, 1.0)
    assert (cfg.region.target_width, cfg.region.target_height) == (640, 480)


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("version: 1\ntrain:\n  learning_rat: 0.1\n")
    with pytest.raises(ConfigError, match="learning_rat"):
        load_config(p, env={})


def test_bad_version(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("version: 99\n")
    with pytest.raises(ConfigError, match="version"):
        load_config(p, env={})


def test_partial_file_and_env_override(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("version: 1\nnetwork:\n  latent_dim: 32\n  n_down_blocks: 3\n")
    cfg = load_config(p, env={"SURFWATCH_DATA_DIR": "/data/x", "SURFWATCH_OUTPUT_DIR": "/out"})
    assert cfg.network.latent_dim == 32 and cfg.network.base_channels == NetworkConfig().base_channels
    assert str(cfg.paths.data_dir) == "/data/x" and str(cfg.paths.output_dir) == "/out"


def test_override_ignores_none():
    cfg = AppConfig()
    assert override(cfg, seed=None) == cfg
    assert override(cfg, seed=5).seed == 5


def test_from_dict_nested():
    cfg = from_dict(AppConfig, {"postprocess": {"registration": {"detector": "orb"}}})
    assert cfg.postprocess.registration.detector == "orb"
