"""Run configuration loading and the generated reference document"""

import json
import sys
from pathlib import Path

import pytest

from src.restoration.config import RunConfig, config_reference, load_config
from src.restoration.types import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TINY = """
seed = 3

[geometry]
face_side = 64

[data]
size = 64
num_portraits = 6

[degrade]
jpeg_quality_range = [60, 90]

[train]
total_steps = 5
stage1_steps = 2
"""


def test_defaults():
    cfg = load_config()
    assert cfg == RunConfig().with_seed(None)
    assert cfg.data.face_side == cfg.eval.face_side == cfg.geometry.face_side == 128


def test_reference_parses_back_to_defaults():
    text = config_reference()
    assert "[train.objective]" in text
    assert "# checkpoint = (unset)" in text
    assert RunConfig.model_validate(tomllib.loads(text)) == RunConfig()


def test_load_toml(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(TINY)
    cfg = load_config(path)
    assert cfg.seed == 3 and cfg.train.seed == 3
    assert cfg.degrade.jpeg_quality_range == (60, 90)
    assert cfg.train.total_steps == 5
    assert cfg.paths.data_root == Path("data")
    # geometry.face_side drives every module that aligns faces
    assert cfg.data.face_side == cfg.eval.face_side == 64


def test_load_json_and_seed_override(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 1, "train": {"seed": 9, "total_steps": 4}}))
    cfg = load_config(path)
    assert cfg.seed == 1 and cfg.train.seed == 9

    cfg = load_config(path, seed=5)
    assert cfg.seed == 5 and cfg.train.seed == 5


def test_unknown_keys_are_rejected(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="Invalid configuration"):
        load_config(path)
    path.write_text("[optimizer]\nlr = 0.1\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_size_must_divide_by_latent_stride(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[data]\nsize = 48\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("[data]\nsize = 48\n[degrade]\ndownscale_factor = 2\n")
    assert load_config(path).data.size == 48


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError, match="Cannot read"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = = 1\n")
    with pytest.raises(ConfigError, match="Cannot parse"):
        load_config(bad)
    bad_json = tmp_path / "bad.json"
    bad_json.write_text("{seed: 1}")
    with pytest.raises(ConfigError, match="Cannot parse"):
        load_config(bad_json)
