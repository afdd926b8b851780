"""Box codec, refinement, and evaluation behavior."""

import numpy as np
import pytest

from ghaar.errors import ConfigError, DataError
from ghaar import compressed as cm
from ghaar import haar_space as hs
from ghaar import nn_core as nn
from ghaar import pipeline as pl
from ghaar import training as tr
from ghaar.windows import CameraModel, Window


def win(cx=24.0, cy=24.0, d=48.0, level=0):
    return Window(x2d=cx, y2d=cy, d2d=d, level=level)


def det(box, label=1, score=0.9, window=None):
    return pl.Detection(box=box, label=label, score=score,
                        source_window=window or win())


def test_decode_examples():
    w = win(24.0, 24.0, 48.0, 0)
    assert pl.decode_outputs((0, 1, 0, 1), w) == (0.0, 0.0, 48.0, 48.0)
    assert pl.decode_outputs((0.25, 0.75, 0.25, 0.75), w) == (
        12.0, 12.0, 36.0, 36.0)
    scaled = win(48.0, 48.0, 96.0, 1)
    assert pl.decode_outputs((0.25, 0.75, 0.25, 0.75), scaled) == (
        24.0, 24.0, 72.0, 72.0)


def test_encode_decode_round_trip():
    rng = np.random.default_rng(3)
    worst_loc = worst_box = 0.0
    for _ in range(1000):
        w = win(cx=float(rng.uniform(30, 900)), cy=float(rng.uniform(30, 700)),
                d=float(rng.uniform(20, 200)), level=int(rng.integers(0, 5)))
        loc = rng.uniform(-0.5, 1.5, size=4)
        loc[1] = loc[0] + abs(loc[1] - loc[0]) + 1e-3
        loc[3] = loc[2] + abs(loc[3] - loc[2]) + 1e-3
        box = pl.decode_outputs(loc, w)
        worst_loc = max(worst_loc,
                        np.abs(pl.encode_target(box, w) - loc).max())
        back = pl.decode_outputs(pl.encode_target(box, w), w)
        worst_box = max(worst_box, max(abs(a - b) for a, b in zip(back, box)))
    assert worst_loc <= 1e-9
    assert worst_box <= 1e-9


def test_iou_examples():
    assert pl.iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert pl.iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0
    assert pl.iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1.0 / 3.0)


def test_iou_symmetric_and_bounded():
    rng = np.random.default_rng(5)
    for _ in range(200):
        a = np.sort(rng.uniform(0, 100, size=4))
        b = np.sort(rng.uniform(0, 100, size=4))
        ba = (a[0], a[1], a[2], a[3])
        bb = (b[0], b[1], b[2], b[3])
        v = pl.iou(ba, bb)
        assert 0.0 <= v <= 1.0
        assert v == pl.iou(bb, ba)


def test_nms_examples():
    a = det((0, 0, 20, 20), score=0.9)
    b = det((1, 1, 19, 19), score=0.8)
    assert pl.nms([a]) == [a]
    assert pl.nms([b, a], 0.7) == [a]
    far = det((40, 40, 60, 60), score=0.8)
    assert pl.nms([a, far], 0.7) == [a, far]
    other = pl.Detection(box=(1, 1, 19, 19), label=2, score=0.8,
                         source_window=win())
    assert pl.nms([a, other], 0.7) == [a, other]


def test_nms_tie_rules():
    big = det((0, 0, 20, 20), score=0.8)
    small = det((1, 1, 19, 19), score=0.8)
    assert pl.nms([small, big], 0.7) == [big]
    left = det((0, 0, 10, 10), score=0.8)
    right = det((1, 0, 11, 10), score=0.8)
    assert pl.nms([right, left], 0.7) == [left]


def test_nms_output_is_antichain():
    rng = np.random.default_rng(11)
    dets = []
    for _ in range(60):
        x, y = rng.uniform(0, 80, size=2)
        w, h = rng.uniform(5, 30, size=2)
        dets.append(pl.Detection(
            box=(x, y, x + w, y + h), label=int(rng.integers(1, 3)),
            score=float(rng.uniform(0.1, 1.0)), source_window=win()))
    kept = pl.nms(dets, 0.4)
    assert all(k in dets for k in kept)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            if a.label == b.label:
                assert pl.iou(a.box, b.box) <= 0.4
    with pytest.raises(ConfigError):
        pl.nms(dets, 0.0)


def test_mean_shift_empty_and_single():
    assert pl.mean_shift_refine([]) == []
    d = det((10, 20, 50, 70), score=0.7)
    out = pl.mean_shift_refine([d])
    assert len(out) == 1
    assert np.allclose(out[0].box, d.box, atol=1e-9)
    assert out[0].label == d.label and out[0].score == d.score


def test_mean_shift_two_clusters():
    d1 = det((10, 10, 50, 50), score=0.9)
    d2 = det((14, 10, 54, 50), score=0.6)
    d3 = det((300, 200, 340, 240), score=0.8)
    out = pl.mean_shift_refine([d1, d2, d3], 0.3)
    assert len(out) == 2
    merged = next(o for o in out if o.box[0] < 100)
    lone = next(o for o in out if o.box[0] > 100)
    # score-weighted center: (0.9*30 + 0.6*34) / 1.5 = 31.6, size stays 40
    assert np.allclose(merged.box, (11.6, 10.0, 51.6, 50.0), atol=1e-9)
    assert merged.score == 0.9
    assert merged.source_window == d1.source_window
    assert np.allclose(lone.box, d3.box, atol=1e-9)


def test_mean_shift_fixed_point():
    dets = [det((10, 10, 50, 50), score=0.9),
            det((14, 10, 54, 50), score=0.6),
            det((300, 200, 340, 240), score=0.8)]
    once = pl.mean_shift_refine(dets, 0.3)
    twice = pl.mean_shift_refine(once, 0.3)
    assert len(once) == len(twice)
    for a, b in zip(once, twice):
        assert np.allclose(a.box, b.box, atol=1e-9)
        assert a.score == b.score


def test_evaluate_perfect():
    gt = [pl.GroundTruthBox((0, 0, 48, 48), 1)]
    dets = [det((0, 0, 48, 48), label=1, score=0.9)]
    rep = pl.evaluate({"a": dets}, {"a": gt})
    assert (rep.tp, rep.fp, rep.fn) == (1, 0, 0)
    assert rep.er_cla == 0.0 and rep.er_loc == 0.0
    assert rep.precision == 1.0 and rep.recall == 1.0


def test_evaluate_all_missed():
    gts = {"a": [pl.GroundTruthBox((0, 0, 48, 48), 1),
                 pl.GroundTruthBox((100, 100, 140, 140), 2)]}
    rep = pl.evaluate({"a": []}, gts)
    assert (rep.tp, rep.fp, rep.fn) == (0, 0, 2)
    assert rep.n == 2
    assert rep.er_cla == 1.0
    assert rep.recall == 0.0


def test_evaluate_extra_detection_is_fp():
    gt = [pl.GroundTruthBox((0, 0, 48, 48), 1)]
    good = det((0, 1, 48, 48), label=1, score=0.8)
    stray = det((200, 200, 240, 240), label=1, score=0.95)
    rep = pl.evaluate({"a": [good, stray]}, {"a": gt})
    assert (rep.tp, rep.fp, rep.fn) == (1, 1, 0)
    assert rep.n == 2
    assert rep.er_cla == 0.5
    assert rep.precision == 0.5 and rep.recall == 1.0


def test_evaluate_er_loc_hand_value():
    w = win(24.0, 24.0, 48.0)
    gt = [pl.GroundTruthBox((0, 0, 48, 48), 1)]
    dets = [pl.Detection(box=(2, 0, 48, 48), label=1, score=0.9,
                         source_window=w)]
    rep = pl.evaluate({"a": dets}, {"a": gt})
    assert rep.tp == 1
    # encode gap is (2/48, 0, 0, 0); squared norm / (4 * 1)
    assert rep.er_loc == pytest.approx((2.0 / 48.0) ** 2 / 4.0, abs=1e-12)


def test_evaluate_label_must_match():
    gt = [pl.GroundTruthBox((0, 0, 48, 48), 1)]
    dets = [det((0, 0, 48, 48), label=2, score=0.9)]
    rep = pl.evaluate({"a": dets}, {"a": gt})
    assert (rep.tp, rep.fp, rep.fn) == (0, 1, 1)


def test_evaluate_reorder_symmetric():
    rng = np.random.default_rng(7)
    gts = {"a": [pl.GroundTruthBox((10, 10, 50, 50), 1),
                 pl.GroundTruthBox((60, 60, 100, 100), 1)]}
    dets = [det((11, 10, 51, 50), score=0.9),
            det((12, 12, 50, 52), score=0.9),
            det((61, 60, 101, 100), score=0.7),
            det((200, 200, 220, 220), score=0.6)]
    base = pl.evaluate({"a": dets}, gts)
    for _ in range(5):
        shuffled = [dets[i] for i in rng.permutation(len(dets))]
        assert pl.evaluate({"a": shuffled}, gts) == base


def test_evaluate_image_mismatch_raises():
    with pytest.raises(DataError):
        pl.evaluate({"a": []}, {"b": []})


def test_evaluate_distance_bands():
    cam = CameraModel(m11=800.0, m22=800.0, m13=256.0, m23=192.0)
    near_gt = pl.GroundTruthBox((100, 100, 140, 140), 1)   # side 40 -> z 20
    far_gt = pl.GroundTruthBox((300, 300, 316, 316), 1)    # side 16 -> z 50
    dets = [det((100, 100, 140, 140), score=0.9)]
    rep = pl.evaluate({"a": dets}, {"a": [near_gt, far_gt]},
                      cam=cam, d3d=1.0, band_edges=[(0, 30), (30, 60)])
    near, far = rep.bands
    assert (near.tp, near.fn) == (1, 0)
    assert near.recall == 1.0
    assert (far.tp, far.fn) == (0, 1)
    assert far.recall == 0.0
    with pytest.raises(ConfigError):
        pl.evaluate({"a": dets}, {"a": [near_gt]}, band_edges=[(0, 30)])


def tiny_model(seed=0):
    spec = nn.build_network_spec(
        in_channels=3, classes=3, window=16,
        trunk_widths=(3, 4, 4, 4), head_widths=(4, 4), bottleneck=3)
    params = nn.init_params(spec, seed=seed)
    space = hs.enumerate_space(3)
    tr.constrain_params(params, space)
    counts = tr.usage_census(params, space)
    reduced = hs.select_top_filters(counts, max(8, int((counts > 0).sum())))
    tr.constrain_params(params, reduced)
    return cm.compress(params, reduced)


def test_detect_image_deterministic():
    model = tiny_model()
    rng = np.random.default_rng(19)
    image = rng.integers(0, 256, size=(40, 40, 3), dtype=np.uint8)
    diag1, diag2 = {}, {}
    out1 = pl.detect_image(model, image, score_thresh=0.2,
                           diagnostics=diag1)
    out2 = pl.detect_image(model, image, score_thresh=0.2,
                           diagnostics=diag2)
    assert out1 == out2
    assert diag1 == diag2
    assert diag1["windows"] > 0


def test_detect_image_threshold_filters_everything():
    model = tiny_model()
    rng = np.random.default_rng(23)
    image = rng.integers(0, 256, size=(40, 40, 3), dtype=np.uint8)
    assert pl.detect_image(model, image, score_thresh=2.0) == []
