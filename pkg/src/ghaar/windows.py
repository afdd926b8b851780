"""Candidate window generation.

Windows come from two sieves.  A pyramid of bilinear-downscaled images is
swept with a sparse sliding grid, which bounds the apparent object size
each level is responsible for.  Independently, a calibrated camera and
physical scene ranges imply, for each window triple (x2D, y2D, d2D), a 3D
position; windows whose implied position falls outside the configured
world box are discarded.  The final candidate set is the intersection.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .ppm import bilinear_resize

DEFAULT_WS = 48
DEFAULT_STRIDE_FRAC = 0.3
DEFAULT_RATIO = 1.4      # 0.7 / 0.5: levels hand off exactly at the band edges
RS_LO = 0.5
RS_HI = 0.7


@dataclass(frozen=True)
class Window:
    """Candidate square region in source-image pixels; center + side."""
    x2d: float
    y2d: float
    d2d: float
    level: int


@dataclass(frozen=True)
class PyramidLevel:
    scale: float             # source size / level size
    image: np.ndarray        # resampled (H, W, C) float64


@dataclass(frozen=True)
class CameraModel:
    """Entries of the small-rotation projection approximation.

    Forward model, for a physical square of side d3d at (x3d, y3d, z3d):
        x2d = (m11*x3d + m13*z3d + m14) / (z3d + m34)
        y2d = (m22*y3d + m23*z3d + m24) / (z3d + m34)
        d2d = m11*d3d / (z3d + m34)
    """
    m11: float
    m22: float
    m13: float = 0.0
    m23: float = 0.0
    m14: float = 0.0
    m24: float = 0.0
    m34: float = 0.0

    def __post_init__(self):
        if self.m11 <= 0 or self.m22 <= 0:
            raise ConfigError("focal terms m11 and m22 must be positive")

    def project(self, x3d, y3d, z3d, d3d):
        """(x2d, y2d, d2d) of a physical square; depth must be in front."""
        denom = np.asarray(z3d, dtype=np.float64) + self.m34
        if np.any(denom <= 0):
            raise DataError("object is behind the camera plane")
        x2d = (self.m11 * x3d + self.m13 * z3d + self.m14) / denom
        y2d = (self.m22 * y3d + self.m23 * z3d + self.m24) / denom
        d2d = self.m11 * d3d / denom
        return x2d, y2d, d2d


@dataclass(frozen=True)
class SceneRanges:
    x3d_min: float
    x3d_max: float
    y3d_min: float
    y3d_max: float
    d3d: float

    def __post_init__(self):
        if self.x3d_min >= self.x3d_max or self.y3d_min >= self.y3d_max:
            raise ConfigError("world ranges need min < max on both axes")
        if self.d3d <= 0:
            raise ConfigError("physical object side must be positive")


def build_pyramid(image, ws=DEFAULT_WS, ratio=DEFAULT_RATIO):
    """Downscale by ratio^k until a level would drop below ws on a side."""
    if ratio <= 1:
        raise ConfigError(f"pyramid ratio must exceed 1, got {ratio}")
    img = np.asarray(image)
    h, w = img.shape[:2]
    if min(h, w) < ws:
        raise DataError(f"image {w}x{h} is smaller than the {ws}px window")
    levels = []
    k = 0
    while True:
        scale = ratio ** k
        lh, lw = int(round(h / scale)), int(round(w / scale))
        if min(lh, lw) < ws:
            break
        if k == 0:
            resized = img
        else:
            # levels stay uint8 images so crops feed the same input path
            # as the source frame
            resized = np.clip(np.round(bilinear_resize(img, lh, lw)),
                              0, 255).astype(np.uint8)
        levels.append(PyramidLevel(scale=scale, image=resized))
        k += 1
    return levels


def _axis_positions(length, ws, step):
    xs = list(range(0, length - ws + 1, step))
    if xs[-1] != length - ws:
        xs.append(length - ws)
    return xs


def sliding_windows(level: PyramidLevel, level_id: int, ws=DEFAULT_WS,
                    stride_frac=DEFAULT_STRIDE_FRAC):
    """Sparse grid over one level, stepped by round(stride_frac*ws) with a
    final flush row/column so the far edges are reachable."""
    if not 0 < stride_frac <= 1:
        raise ConfigError(f"stride fraction must be in (0, 1], got {stride_frac}")
    h, w = level.image.shape[:2]
    if min(h, w) < ws:
        return []
    step = int(round(stride_frac * ws))
    scale = level.scale
    out = []
    for y in _axis_positions(h, ws, step):
        for x in _axis_positions(w, ws, step):
            out.append(Window(x2d=(x + ws / 2) * scale,
                              y2d=(y + ws / 2) * scale,
                              d2d=ws * scale, level=level_id))
    return out


def implied_3d(window: Window, cam: CameraModel, d3d: float):
    """World position whose projection is exactly this window.

    Inverts the forward model: the projective depth w = m11*d3d/d2d equals
    z3d + m34, after which the linear terms solve directly.
    """
    if window.d2d <= 0:
        raise DataError(f"window side must be positive, got {window.d2d}")
    w = cam.m11 * d3d / window.d2d
    z3d = w - cam.m34
    x3d = (window.x2d * w - cam.m13 * z3d - cam.m14) / cam.m11
    y3d = (window.y2d * w - cam.m23 * z3d - cam.m24) / cam.m22
    return x3d, y3d, z3d


def perspective_filter(windows, cam: CameraModel, ranges: SceneRanges):
    """Keep windows whose implied 3D point lies inside the world box."""
    out = []
    for win in windows:
        x3d, y3d, _ = implied_3d(win, cam, ranges.d3d)
        if (ranges.x3d_min <= x3d <= ranges.x3d_max
                and ranges.y3d_min <= y3d <= ranges.y3d_max):
            out.append(win)
    return out


def final_windows(image, cam=None, ranges=None, ws=DEFAULT_WS,
                  stride_frac=DEFAULT_STRIDE_FRAC, ratio=DEFAULT_RATIO):
    """Pyramid sliding windows, perspective-pruned when geometry is given.

    Returns (windows, levels); windows are in deterministic level-major
    scan order.  Without a camera or ranges the sliding set passes through
    untouched.
    """
    levels = build_pyramid(image, ws, ratio)
    wins = []
    for k, level in enumerate(levels):
        wins.extend(sliding_windows(level, k, ws, stride_frac))
    if cam is not None and ranges is not None:
        wins = perspective_filter(wins, cam, ranges)
    return wins, levels


def crop_window(win: Window, levels, ws=DEFAULT_WS):
    """The window's ws x ws pixel block from its own pyramid level."""
    level = levels[win.level]
    x = int(round(win.x2d / level.scale - ws / 2))
    y = int(round(win.y2d / level.scale - ws / 2))
    h, w = level.image.shape[:2]
    if not (0 <= x <= w - ws and 0 <= y <= h - ws):
        raise DataError(f"window at ({win.x2d}, {win.y2d}) leaves its level")
    return level.image[y:y + ws, x:x + ws]


def write_windows_csv(path, windows):
    with open(path, "w") as fh:
        fh.write("level,x2d,y2d,d2d\n")
        for w in windows:
            fh.write(f"{w.level},{w.x2d:.4f},{w.y2d:.4f},{w.d2d:.4f}\n")


@dataclass(frozen=True)
class CoverageReport:
    passed: bool
    worst_margin: float      # pixels of two-sided slack at the worst case
    worst_side: float        # object side (source px) achieving it
    worst_axis: str


def _axis_margin(canvas, side, ws, step, scale):
    """Best two-sided slack for a 1D object of `side` source px against one
    level's window grid, minimized over object positions.

    Window intervals in source pixels are [x*scale, (x+ws)*scale].  An
    object [a, a+side] is contained iff some window has
    x*scale <= a and a+side <= (x+ws)*scale.
    """
    level_len = int(round(canvas / scale))
    if level_len < ws:
        return None
    xs = np.asarray(_axis_positions(level_len, ws, step), dtype=np.float64)
    lo = xs * scale
    hi = (xs + ws) * scale
    a = np.arange(0.0, canvas - side + 1e-9, 0.25)
    if a[-1] < canvas - side - 1e-9:
        a = np.append(a, canvas - side)
    left = a[:, None] - lo[None, :]
    right = hi[None, :] - (a[:, None] + side)
    pair = np.minimum(left, right)
    margins = pair.max(axis=1)
    # objects touching the canvas boundary cannot drift outward, so their
    # outer-side slack is not a failure distance; keep containment itself
    margins[0] = np.where(left[0] >= 0, right[0], pair[0]).max()
    margins[-1] = np.where(right[-1] >= 0, left[-1], pair[-1]).max()
    return float(margins.min())


def coverage_verify(rs_lo=RS_LO, rs_hi=RS_HI, stride_frac=DEFAULT_STRIDE_FRAC,
                    ratio=DEFAULT_RATIO, ws=DEFAULT_WS, canvas=512,
                    size_step=0.25):
    """Exhaustive sweep of the containment guarantee.

    For every object side with size ratio in [rs_lo, rs_hi] (stepped at
    sub-pixel resolution) and every position on the canvas, some pyramid
    window must fully contain the object.  Containment of an axis-aligned
    square is separable, so each axis is swept independently and the worst
    margin is the minimum over both.
    """
    if not 0 < rs_lo < rs_hi <= 1:
        raise ConfigError("size-ratio band must satisfy 0 < lo < hi <= 1")
    if ratio > rs_hi / rs_lo + 1e-12:
        raise ConfigError(
            f"pyramid ratio {ratio} exceeds {rs_hi}/{rs_lo}; objects between "
            "levels would escape both bands")
    step = int(round(stride_frac * ws))
    worst = (np.inf, 0.0, "x")
    sides = np.arange(rs_lo * ws, rs_hi * ws + 1e-9, size_step)
    if sides[-1] < rs_hi * ws - 1e-9:
        sides = np.append(sides, rs_hi * ws)  # the band edge is the worst case
    # levels that can matter for the band: rs at level k is side/(ws*ratio^k)
    max_k = int(np.ceil(np.log(canvas / ws) / np.log(ratio))) + 1
    for side in sides:
        best_for_side = -np.inf
        for k in range(max_k + 1):
            scale = ratio ** k
            rs_k = side / (ws * scale)
            if not rs_lo - 1e-9 <= rs_k <= rs_hi + 1e-9:
                continue
            m = _axis_margin(canvas, side, ws, step, scale)
            if m is not None:
                best_for_side = max(best_for_side, m)
        if best_for_side < worst[0]:
            worst = (best_for_side, float(side), "xy")
    margin, side, axis = worst
    return CoverageReport(passed=bool(margin > 0), worst_margin=margin,
                          worst_side=side, worst_axis=axis)
