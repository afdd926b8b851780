"""Key-value configuration files.

Format: one `key = value` per line, `#` starts a comment, blank lines
ignored, later occurrences of a key win.  Values stay strings until a typed
getter pulls them out.  List-valued keys hold whitespace-separated items
(e.g. `trunk_widths = 64 128 256 256`).
"""

from __future__ import annotations

from .errors import ConfigError
from .training import TrainConfig
from .synth import SynthSettings
from .windows import (
    DEFAULT_RATIO,
    DEFAULT_STRIDE_FRAC,
    DEFAULT_WS,
    CameraModel,
    SceneRanges,
)

CAMERA_KEYS = ("m11", "m22", "m13", "m23", "m14", "m24", "m34")
RANGE_KEYS = ("x3d_min", "x3d_max", "y3d_min", "y3d_max", "d3d")


def parse_config_text(text, origin="<config>"):
    out = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{ln}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{ln}: empty key")
        out[key] = value
    return out


def parse_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    return parse_config_text(text, origin=str(path))


def _get(cfg, key, default, cast, what):
    if key not in cfg:
        if default is None:
            raise ConfigError(f"missing required config key '{key}'")
        return default
    try:
        return cast(cfg[key])
    except (TypeError, ValueError):
        raise ConfigError(f"config key '{key}' is not {what}: {cfg[key]!r}")


def get_float(cfg, key, default=None):
    return _get(cfg, key, default, float, "a number")


def get_int(cfg, key, default=None):
    return _get(cfg, key, default, lambda s: int(s, 0), "an integer")


def get_bool(cfg, key, default=None):
    def cast(s):
        s = s.lower()
        if s in ("true", "yes", "1", "on"):
            return True
        if s in ("false", "no", "0", "off"):
            return False
        raise ValueError(s)
    return _get(cfg, key, default, cast, "a boolean")


def get_int_tuple(cfg, key, default=None):
    return _get(cfg, key, default,
                lambda s: tuple(int(p) for p in s.split()),
                "a list of integers")


def camera_from_config(cfg) -> CameraModel:
    return CameraModel(
        m11=get_float(cfg, "m11"), m22=get_float(cfg, "m22"),
        m13=get_float(cfg, "m13", 0.0), m23=get_float(cfg, "m23", 0.0),
        m14=get_float(cfg, "m14", 0.0), m24=get_float(cfg, "m24", 0.0),
        m34=get_float(cfg, "m34", 0.0))


def ranges_from_config(cfg) -> SceneRanges:
    return SceneRanges(
        x3d_min=get_float(cfg, "x3d_min"), x3d_max=get_float(cfg, "x3d_max"),
        y3d_min=get_float(cfg, "y3d_min"), y3d_max=get_float(cfg, "y3d_max"),
        d3d=get_float(cfg, "d3d"))


def has_geometry(cfg) -> bool:
    return "m11" in cfg and "x3d_min" in cfg


def train_config_from_config(cfg, seed=None) -> TrainConfig:
    kw = dict(
        epochs=get_int(cfg, "epochs", 10),
        lr=get_float(cfg, "lr", 0.01),
        lr_decay=get_float(cfg, "lr_decay", 0.5),
        decay_every=get_int(cfg, "decay_every", 10),
        batch_size=get_int(cfg, "batch_size", 32),
        phi=get_float(cfg, "phi", 0.1),
        q=get_int(cfg, "q", 8),
        nr=get_int(cfg, "nr", 32),
        loss_weights=(get_float(cfg, "loss_w_loc", 1.0),
                      get_float(cfg, "loss_w_cla", 1.0)),
        constrain=get_bool(cfg, "constrain", True),
        window=get_int(cfg, "ws", DEFAULT_WS),
        in_channels=get_int(cfg, "in_channels", 3),
        classes=get_int(cfg, "classes", 3),
        trunk_widths=get_int_tuple(cfg, "trunk_widths", (64, 128, 256, 256)),
        head_widths=get_int_tuple(cfg, "head_widths", (128, 128)),
        bottleneck=get_int(cfg, "bottleneck", 64),
    )
    if "phase_a_epochs" in cfg:
        kw["phase_a_epochs"] = get_int(cfg, "phase_a_epochs")
    if seed is not None:
        kw["seed"] = seed
    elif "seed" in cfg:
        kw["seed"] = get_int(cfg, "seed")
    return TrainConfig(**kw)


def synth_settings_from_config(cfg) -> SynthSettings:
    kw = dict(
        n_images=get_int(cfg, "n_images", 20),
        image_w=get_int(cfg, "image_w", 512),
        image_h=get_int(cfg, "image_h", 384),
        ws=get_int(cfg, "ws", DEFAULT_WS),
        max_objects=get_int(cfg, "max_objects", 2),
        tries=get_int(cfg, "tries", 40),
        split=cfg.get("split", "train"),
        color_margin=get_int(cfg, "color_margin", 0),
    )
    if "size_lo" in cfg:
        kw["size_lo"] = get_float(cfg, "size_lo")
    if "size_hi" in cfg:
        kw["size_hi"] = get_float(cfg, "size_hi")
    return SynthSettings(**kw)


def window_params_from_config(cfg):
    """(ws, stride_frac, pyramid_ratio) with module defaults."""
    return (get_int(cfg, "ws", DEFAULT_WS),
            get_float(cfg, "stride_frac", DEFAULT_STRIDE_FRAC),
            get_float(cfg, "pyramid_ratio", DEFAULT_RATIO))


def extract_params_from_config(cfg):
    return dict(
        n_jitter=get_int(cfg, "n_jitter", 2),
        jitter_frac=get_float(cfg, "jitter_frac", 0.15),
        bg_ratio=get_float(cfg, "bg_ratio", 3.0),
        flip=get_bool(cfg, "flip", False),
    )


def detect_params_from_config(cfg):
    return dict(
        score_thresh=get_float(cfg, "score_thresh", 0.5),
        bandwidth_frac=get_float(cfg, "bandwidth_frac", 0.3),
        nms_iou=get_float(cfg, "nms_iou", 0.7),
    )
