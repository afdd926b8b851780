"""Command-line surface: gen-data, train, eval, detect, bench, inspect-model.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 model format
error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import compressed as cm
from . import config as cf
from . import haar_space as hs
from . import nn_core as nn
from . import pipeline as pl
from . import ppm
from . import synth as sy
from . import training as tr
from . import windows as wd
from .errors import ConfigError, DataError, FormatError

LABEL_COLORS = {1: (255, 40, 40), 2: (40, 90, 255)}


def _load_model(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise DataError(f"cannot read model {path}: {e}")
    return cm.decode_model(data)


def _save_model(model, path):
    blob = cm.encode_model(model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def _geometry(cfg):
    if cfg is not None and cf.has_geometry(cfg):
        return cf.camera_from_config(cfg), cf.ranges_from_config(cfg)
    return None, None


def cmd_gen_data(args):
    cfg = cf.parse_config(args.config)
    cam = cf.camera_from_config(cfg)
    ranges = cf.ranges_from_config(cfg)
    settings = cf.synth_settings_from_config(cfg)
    manifest = sy.synth_generate(settings, cam, ranges, args.out, args.seed)
    n_obj = sum(len(gts) for _, gts in manifest.entries)
    print(f"wrote {len(manifest.entries)} images with {n_obj} objects "
          f"to {args.out}")
    return 0


def _unconstrained_clone(params, tc: tr.TrainConfig):
    """The same weights under a spec whose layers store raw kernels."""
    spec = nn.build_network_spec(
        in_channels=tc.in_channels, classes=tc.classes, window=tc.window,
        trunk_widths=tc.trunk_widths, head_widths=tc.head_widths,
        bottleneck=tc.bottleneck, constrained=False)
    return nn.ModelParams(spec, {name: lp.copy()
                                 for name, lp in params.layers.items()})


def cmd_train(args):
    cfg = cf.parse_config(args.config)
    tc = cf.train_config_from_config(cfg, seed=args.seed)
    manifest = sy.load_manifest(args.data)
    ratio = cf.get_float(cfg, "pyramid_ratio", wd.DEFAULT_RATIO)
    ex = cf.extract_params_from_config(cfg)
    x, loc, labels = sy.extract_samples(manifest, args.data, ws=tc.window,
                                        ratio=ratio, seed=tc.seed, **ex)
    val = None
    if args.val_data:
        vman = sy.load_manifest(args.val_data)
        val = sy.extract_samples(vman, args.val_data, ws=tc.window,
                                 ratio=ratio, seed=tc.seed + 1, **ex)
    print(f"training on {x.shape[0]} windows "
          f"({int((labels != 0).sum())} positive)")

    def progress(row):
        msg = (f"epoch {row['epoch']:3d} phase {row['phase']} "
               f"space {row['space']:3d} loss {row['loss']:.4f} "
               f"err {row['err_cla']:.3f}")
        if "val_err_cla" in row:
            msg += f" val_err {row['val_err_cla']:.3f}"
        print(msg, flush=True)

    params, space, rows = tr.fit(x, loc, labels, tc, val=val,
                                 progress=progress)
    os.makedirs(args.out, exist_ok=True)
    tr.write_log_csv(rows, os.path.join(args.out, "log.csv"))
    if tc.constrain:
        model = cm.compress(params, space)
    else:
        clone = _unconstrained_clone(params, tc)
        model = cm.compress(clone, hs.reduced_space_from_indices(tc.m, [0]))
    path = os.path.join(args.out, "model.ghnw")
    size = _save_model(model, path)
    print(f"wrote {path}: {size} bytes, {len(model.space)} patterns")
    return 0


def _detect_on_manifest(model, manifest, src_dir, cam, ranges, stride_frac,
                        ratio, dp):
    dets_by, gts_by = {}, {}
    for name, gts in manifest.entries:
        image = ppm.read_ppm(os.path.join(src_dir, name))
        dets_by[name] = pl.detect_image(model, image, cam, ranges,
                                        stride_frac=stride_frac, ratio=ratio,
                                        **dp)
        gts_by[name] = list(gts)
    return dets_by, gts_by


def cmd_eval(args):
    cfg = cf.parse_config(args.config)
    model = _load_model(args.model)
    manifest = sy.load_manifest(args.data)
    cam, ranges = _geometry(cfg)
    _, stride_frac, ratio = cf.window_params_from_config(cfg)
    dp = cf.detect_params_from_config(cfg)
    dets_by, gts_by = _detect_on_manifest(model, manifest, args.data, cam,
                                          ranges, stride_frac, ratio, dp)
    kw = {}
    if "bands" in cfg and cam is not None:
        edges = [float(v) for v in cfg["bands"].split()]
        kw = dict(cam=cam, d3d=cf.get_float(cfg, "d3d"),
                  band_edges=list(zip(edges, edges[1:])))
    rep = pl.evaluate(dets_by, gts_by, **kw)
    ex = cf.extract_params_from_config(cfg)
    wx, wloc, wlab = sy.extract_samples(manifest, args.data,
                                        ws=model.spec.input_size,
                                        ratio=ratio, seed=args.seed, **ex)
    wm = tr.evaluate_windows(model.params, wx, wloc, wlab)
    lines = [
        f"images {len(manifest.entries)}",
        f"detections tp {rep.tp} fp {rep.fp} fn {rep.fn} n {rep.n}",
        f"er_cla {rep.er_cla:.4f}",
        f"er_loc {rep.er_loc:.6f}",
        f"precision {rep.precision:.4f}",
        f"recall {rep.recall:.4f}",
        f"window_er_cla {wm['val_err_cla']:.4f}",
        f"window_er_loc {wm['val_err_loc']:.6f}",
    ]
    for b in rep.bands:
        lines.append(f"band {b.z_lo:g}..{b.z_hi:g} precision "
                     f"{b.precision:.4f} recall {b.recall:.4f} "
                     f"tp {b.tp} fp {b.fp} fn {b.fn}")
    for line in lines:
        print(line)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


def cmd_detect(args):
    model = _load_model(args.model)
    cfg = cf.parse_config(args.config) if args.config else None
    cam, ranges = _geometry(cfg)
    if cfg is not None:
        _, stride_frac, ratio = cf.window_params_from_config(cfg)
        dp = cf.detect_params_from_config(cfg)
    else:
        stride_frac, ratio = wd.DEFAULT_STRIDE_FRAC, wd.DEFAULT_RATIO
        dp = {}
    os.makedirs(args.out, exist_ok=True)
    for path in args.images:
        image = ppm.read_ppm(path)
        dets = pl.detect_image(model, image, cam, ranges,
                               stride_frac=stride_frac, ratio=ratio, **dp)
        stem = os.path.splitext(os.path.basename(path))[0]
        csv_path = os.path.join(args.out, stem + "_det.csv")
        with open(csv_path, "w") as fh:
            fh.write("label,score,x1,y1,x2,y2\n")
            for d in dets:
                x1, y1, x2, y2 = d.box
                fh.write(f"{d.label},{d.score:.4f},{x1:.2f},{y1:.2f},"
                         f"{x2:.2f},{y2:.2f}\n")
        if args.annotate:
            painted = image.copy()
            for d in dets:
                ppm.draw_box(painted, d.box,
                             LABEL_COLORS.get(d.label, (255, 255, 0)))
            ppm.write_ppm(os.path.join(args.out, stem + "_det.ppm"), painted)
        print(f"{path}: {len(dets)} detections -> {csv_path}")
    return 0


def _dense_multiplies(spec, n_windows):
    positions = cm.layer_positions(spec)
    total = 0
    for layer, _ in spec.conv_layers():
        steps = n_windows * positions[layer.name] * layer.out_channels \
            * layer.in_channels
        total += steps * layer.kernel_size ** 2
    return total


def cmd_bench(args):
    cfg = cf.parse_config(args.config)
    model = _load_model(args.model)
    cam, ranges = _geometry(cfg)
    _, stride_frac, ratio = cf.window_params_from_config(cfg)
    ws = model.spec.input_size
    h = cf.get_int(cfg, "image_h", 384)
    w = cf.get_int(cfg, "image_w", 512)
    rng = np.random.default_rng(args.seed)
    image = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    wins_s, levels = wd.final_windows(image, ws=ws, stride_frac=stride_frac,
                                      ratio=ratio)
    if cam is not None:
        wins_f = wd.perspective_filter(wins_s, cam, ranges)
    else:
        wins_f = wins_s
    counter = cm.OpCounter()
    start = time.perf_counter()
    for lo in range(0, len(wins_f), 256):
        batch = wins_f[lo:lo + 256]
        x = np.stack([ppm.normalize_image(wd.crop_window(win, levels, ws))
                      for win in batch])
        cm.forward_fast(model, x, counter=counter)
    elapsed = time.perf_counter() - start
    dense = _dense_multiplies(model.spec, len(wins_f))
    print(f"sliding_windows {len(wins_s)}")
    print(f"filtered_windows {len(wins_f)}")
    print(f"reduction {len(wins_f) / len(wins_s):.4f}")
    print(f"windows_per_sec {len(wins_f) / elapsed:.1f}")
    print(f"fast_multiplies {counter.multiplies}")
    print(f"fast_additions {counter.additions}")
    print(f"dense_multiplies {dense}")
    for layer, _ in model.spec.conv_layers():
        if layer.constrained:
            per = counter.per_step_multiplies(layer.name)
            print(f"per_step_multiplies {layer.name} {per:g}")
    return 0


def cmd_inspect_model(args):
    model = _load_model(args.model)
    spec = model.spec
    print(f"input {spec.in_channels}x{spec.input_size}x{spec.input_size} "
          f"classes {spec.classes}")
    print(f"patterns {len(model.space)} of {hs.space_size(model.space.m)} "
          f"(m={model.space.m})")
    print(f"digest {model.digest.hex()}")
    report = cm.storage_report(spec, len(model.space))
    for row in report["layers"]:
        tag = "haar" if row["constrained"] else "dense"
        print(f"layer {row['name']:8s} {tag:5s} k={row['kernel_size']} "
              f"kernels {row['kernels']:6d} dense {row['dense_bytes']:8d}B "
              f"packed {row['compressed_bytes']:8d}B "
              f"ratio {row['ratio']:.2f}")
    print(f"kernel_bytes dense {report['dense_kernel_bytes']} "
          f"packed {report['compressed_kernel_bytes']} "
          f"ratio {report['kernel_ratio']:.2f}")
    print(f"file_bytes {report['file_bytes']}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ghaar",
        description="Sign-pattern-constrained detector toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False, model=False, out=False):
        p.add_argument("--config", required=config,
                       help="key=value configuration file")
        p.add_argument("--seed", type=int, default=0)
        if model:
            p.add_argument("--model", required=True, help="model file")
        if out is not None:
            p.add_argument("--out", required=out, help="output directory")

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(p, config=True, out=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit a model on a rendered dataset")
    common(p, config=True, out=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--val-data", help="held-out dataset directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model against a dataset")
    common(p, config=True, model=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="run detection on images")
    common(p, model=True, out=True)
    p.add_argument("images", nargs="+", help="PPM images")
    p.add_argument("--annotate", action="store_true",
                   help="also write annotated PPMs")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", help="measure windows/sec and multiply counts")
    common(p, config=True, model=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect-model", help="print model layout and storage")
    common(p, model=True)
    p.set_defaults(func=cmd_inspect_model)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 4
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
