import pytest

from panoptic4d.config import (
    RunConfig,
    config_from_text,
    config_to_text,
    desk_preset,
    load_config,
    save_config,
)
from panoptic4d.errors import ParameterError
from panoptic4d.synth import SceneSpec


def test_defaults_match_production_settings():
    cfg = RunConfig()
    assert cfg.voxel_size == 0.05
    assert cfg.window == 2
    assert cfg.num_queries == 100
    assert cfg.max_lr == 2e-4
    assert cfg.stride == cfg.window - 1


def test_round_trip_identity():
    cfg = desk_preset(steps=321, aug_rotate=True, sequence_dir="/tmp/x")
    text = config_to_text(cfg)
    back = config_from_text(RunConfig, text)
    assert back == cfg
    assert config_to_text(back) == text


def test_file_round_trip(tmp_path):
    cfg = desk_preset()
    path = str(tmp_path / "run.cfg")
    save_config(path, cfg)
    assert load_config(path) == cfg


def test_unknown_key_rejected():
    with pytest.raises(ParameterError, match="unknown config key"):
        config_from_text(RunConfig, "not_a_key = 3\n")


def test_duplicate_key_rejected():
    with pytest.raises(ParameterError, match="duplicate"):
        config_from_text(RunConfig, "steps = 3\nsteps = 4\n")


def test_comments_and_blank_lines():
    cfg = config_from_text(RunConfig, "# comment\n\nsteps = 7\n")
    assert cfg.steps == 7


def test_tuple_and_bool_parsing():
    cfg = config_from_text(
        RunConfig, "backbone_widths = 8,16\nbackbone_depth = 2\nuse_dbscan = false\n"
    )
    assert cfg.backbone_widths == (8, 16)
    assert cfg.use_dbscan is False


def test_scene_spec_round_trip():
    spec = SceneSpec(seed=9, hidden=((1, 2), (2, 0)), object_speed_range=(0.1, 0.5))
    back = config_from_text(SceneSpec, config_to_text(spec))
    assert back == spec


def test_stride_validation():
    with pytest.raises(ParameterError):
        RunConfig(window=2, stride=2)


def test_loss_weights_respect_box_switch():
    cfg = desk_preset(use_box_loss=False, lambda_box=3.0)
    assert cfg.loss_weights().lambda_box == 0.0
    cfg = desk_preset(use_box_loss=True, lambda_box=3.0)
    assert cfg.loss_weights().lambda_box == 3.0
