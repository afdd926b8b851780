"""Key-value config parsing and typed builders."""

import pytest

from ghaar.errors import ConfigError
from ghaar import config as cf


def test_parse_text_basics():
    text = """
    # camera block
    m11 = 800      # focal
    m22=820
    name = left camera

    m11 = 750      # later key wins
    """
    cfg = cf.parse_config_text(text)
    assert cfg["m11"] == "750"
    assert cfg["m22"] == "820"
    assert cfg["name"] == "left camera"


def test_parse_text_rejects_bad_lines():
    with pytest.raises(ConfigError):
        cf.parse_config_text("just words\n")
    with pytest.raises(ConfigError):
        cf.parse_config_text("= 3\n")


def test_parse_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        cf.parse_config(tmp_path / "nope.cfg")


def test_typed_getters():
    cfg = {"a": "2.5", "b": "7", "c": "true", "d": "1 2 3", "bad": "x"}
    assert cf.get_float(cfg, "a") == 2.5
    assert cf.get_int(cfg, "b") == 7
    assert cf.get_bool(cfg, "c") is True
    assert cf.get_int_tuple(cfg, "d") == (1, 2, 3)
    assert cf.get_float(cfg, "zz", 1.5) == 1.5
    with pytest.raises(ConfigError):
        cf.get_float(cfg, "zz")
    with pytest.raises(ConfigError):
        cf.get_int(cfg, "bad")
    with pytest.raises(ConfigError):
        cf.get_bool(cfg, "bad")


def test_camera_and_ranges_builders():
    cfg = cf.parse_config_text(
        "m11 = 800\nm22 = 820\nm13 = 512\nm34 = 1.5\n"
        "x3d_min = -8\nx3d_max = 8\ny3d_min = -1\ny3d_max = 3\nd3d = 1.8\n")
    cam = cf.camera_from_config(cfg)
    assert cam.m11 == 800 and cam.m13 == 512 and cam.m34 == 1.5
    assert cam.m14 == 0.0
    ranges = cf.ranges_from_config(cfg)
    assert ranges.x3d_max == 8 and ranges.d3d == 1.8
    assert cf.has_geometry(cfg)
    assert not cf.has_geometry({"m11": "800"})
    with pytest.raises(ConfigError):
        cf.camera_from_config({"m11": "800"})     # m22 missing


def test_train_config_builder():
    cfg = cf.parse_config_text(
        "epochs = 4\nlr = 0.02\nnr = 16\nws = 16\n"
        "trunk_widths = 2 3 3 3\nhead_widths = 3 3\nbottleneck = 2\n"
        "constrain = false\nseed = 9\n")
    tc = cf.train_config_from_config(cfg)
    assert tc.epochs == 4 and tc.lr == 0.02 and tc.nr == 16
    assert tc.window == 16 and tc.trunk_widths == (2, 3, 3, 3)
    assert tc.constrain is False
    assert tc.seed == 9
    # an explicit seed argument beats the file
    assert cf.train_config_from_config(cfg, seed=1).seed == 1
    defaults = cf.train_config_from_config({})
    assert defaults.epochs == 10 and defaults.phi == 0.1 and defaults.q == 8


def test_synth_and_detect_builders():
    cfg = cf.parse_config_text(
        "n_images = 3\nimage_w = 100\nimage_h = 90\nws = 24\n"
        "score_thresh = 0.6\nbg_ratio = 2.0\nflip = true\n")
    st = cf.synth_settings_from_config(cfg)
    assert st.n_images == 3 and st.image_w == 100 and st.ws == 24
    assert cf.window_params_from_config(cfg) == (24, 0.3, 1.4)
    assert cf.detect_params_from_config(cfg)["score_thresh"] == 0.6
    ex = cf.extract_params_from_config(cfg)
    assert ex["bg_ratio"] == 2.0 and ex["flip"] is True
