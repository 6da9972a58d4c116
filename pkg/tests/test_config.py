"""Run configuration: training-recipe literals, TOML round trips, validation."""

import numpy as np
import pytest

from unipre3d.config import (
    default_config, from_dict, load_config, parse, save_config, serialize,
    to_dict, validate,
)
from unipre3d.errors import ConfigError


def test_object_defaults_snapshot():
    c = default_config("object")
    assert c.mode == "object"
    assert c.optimizer.kind == "adam"
    assert c.optimizer.lr == 1e-4
    assert c.optimizer.lr_decay == 0.9
    assert c.optimizer.lr_step_epochs == 10
    assert c.optimizer.weight_decay == 0.0
    assert c.optimizer.batch_size == 32
    assert c.optimizer.epochs == 50
    assert c.loss.w_fg == 4.0 and c.loss.w_bg == 1.0
    assert c.views.v_ref == 1 and c.views.v_rend == 4
    assert c.views.bins == 8 and c.views.interval == 5 and c.views.restriction
    assert c.fusion.strategy == "feature" and c.fusion.placement == "decoder_last"
    assert c.data.n_points == 1024 and c.data.n_cameras == 36
    assert c.backbone.encoder_widths == (64, 128, 256)
    assert c.backbone.decoder_widths == (256, 128, 64)
    validate(c)


def test_scene_defaults_snapshot():
    c = default_config("scene")
    assert c.optimizer.kind == "adamw"
    assert c.optimizer.weight_decay == 0.01
    assert c.optimizer.batch_size == 8
    assert c.optimizer.epochs == 100
    assert c.views.v_ref == 8 and c.views.v_rend == 8
    assert c.fusion.strategy == "point" and c.fusion.placement == "encoder_first"
    assert c.data.n_points == 20000 and c.data.n_cameras == 64
    validate(c)


def test_unknown_mode_rejected():
    with pytest.raises(ConfigError):
        default_config("video")


@pytest.mark.parametrize("mode", ["object", "scene"])
def test_toml_round_trip_identity(mode):
    c = default_config(mode)
    c.seed = 1234
    c.optimizer.lr = 3.5e-4
    c.views.restriction = False
    back = parse(serialize(c))
    assert to_dict(back) == to_dict(c)
    # serialize is stable under round trip
    assert serialize(back) == serialize(c)


def test_dict_round_trip_identity():
    c = default_config("scene")
    assert to_dict(from_dict(to_dict(c))) == to_dict(c)


def test_file_round_trip(tmp_path):
    c = default_config("object")
    c.out_dir = "runs/exp1"
    p = tmp_path / "run.toml"
    save_config(p, c)
    back = load_config(p)
    assert to_dict(back) == to_dict(c)


def test_unknown_keys_rejected_with_path():
    d = to_dict(default_config("object"))
    d["optimizer"]["typo_lr"] = 1.0
    with pytest.raises(ConfigError, match="optimizer.*typo_lr"):
        from_dict(d)
    d = to_dict(default_config("object"))
    d["nonsense"] = {}
    with pytest.raises(ConfigError, match="nonsense"):
        from_dict(d)


def test_toml_parse_error_is_config_error():
    with pytest.raises(ConfigError):
        parse("mode = object\n")  # unquoted string is invalid TOML


def test_validation_messages_are_path_qualified():
    c = default_config("object")
    c.optimizer.lr = -1.0
    with pytest.raises(ConfigError, match="optimizer.lr"):
        validate(c)
    c = default_config("object")
    c.views.interval = 0
    with pytest.raises(ConfigError, match="views.interval"):
        validate(c)
    c = default_config("object")
    c.loss.background = (2.0, 0.0, 0.0)
    with pytest.raises(ConfigError, match="loss.background"):
        validate(c)


def test_cross_field_rules():
    # feature fusion cannot sit at the point-fusion hook
    c = default_config("object")
    c.fusion.placement = "encoder_first"
    with pytest.raises(ConfigError, match="fusion.placement"):
        validate(c)

    # point fusion requires scene mode
    c = default_config("scene")
    c.mode = "object"
    c.data.root = "data"
    with pytest.raises(ConfigError, match="fusion.strategy"):
        validate(c)

    # point fusion must merge at encoder stage 1
    c = default_config("scene")
    c.fusion.placement = "decoder_last"
    with pytest.raises(ConfigError, match="fusion.placement"):
        validate(c)

    # strategy none pairs with placement none
    c = default_config("object")
    c.fusion.strategy = "none"
    with pytest.raises(ConfigError, match="fusion.placement"):
        validate(c)
    c.fusion.placement = "none"
    validate(c)

    # scene streams must divide into bins
    c = default_config("scene")
    c.data.n_cameras = 62
    with pytest.raises(ConfigError, match="data.n_cameras"):
        validate(c)


def test_widths_must_be_integers():
    c = default_config("object")
    c.backbone.encoder_widths = (64.0, 128, 256)
    with pytest.raises(ConfigError, match="backbone"):
        validate(c)


def test_serialized_types_survive():
    c = default_config("object")
    back = parse(serialize(c))
    assert isinstance(back.views.restriction, bool)
    assert isinstance(back.optimizer.lr, float)
    assert isinstance(back.optimizer.batch_size, int)
    assert isinstance(back.backbone.encoder_widths, tuple)
    assert all(isinstance(w, int) for w in back.backbone.encoder_widths)
    assert isinstance(back.loss.background, tuple)
    assert np.allclose(back.loss.background, c.loss.background)
