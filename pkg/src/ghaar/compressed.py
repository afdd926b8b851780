"""Compressed model codec and the one-multiply inference path.

A constrained 3x3 kernel is stored as 5 bytes: a 1-byte reference into the
model's pattern table plus a little-endian float32 factor.  At inference
the kernel's response is the factor times a signed window sum, so each
kernel application costs one multiplication; the window sums are shared
between output channels that picked the same pattern.  1x1 layers and all
biases are stored as raw little-endian float32.

File layout (all integers little-endian):

    magic "GHNW" | version u8 | digest 16B | spec_len u32 | spec text
    space: m u8 | count u16 | count x u32 canonical indices
    per conv layer, topological order:
        constrained: O*C x (ref u8, factor f32), then O x f32 bias
        otherwise:   O*C*k*k x f32 kernel, then O x f32 bias

The digest is the first 16 bytes of SHA-256 over the spec text, so a model
cannot be loaded against a different architecture unnoticed.
"""

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from . import haar_space as hs
from . import nn_core as nn

MAGIC = b"GHNW"
VERSION = 1
RECORD_SIZE = 5          # 1-byte pattern ref + 4-byte factor
DENSE_KERNEL_BYTES = 36  # 4 * 3 * 3, the uncompressed float32 cost


class OpCounter:
    """Monotone tally of arithmetic per layer; reset only on request."""

    def __init__(self):
        self.layers = {}

    def record(self, layer, steps, multiplies, additions):
        slot = self.layers.setdefault(
            layer, {"steps": 0, "multiplies": 0, "additions": 0})
        slot["steps"] += steps
        slot["multiplies"] += multiplies
        slot["additions"] += additions

    @property
    def multiplies(self):
        return sum(s["multiplies"] for s in self.layers.values())

    @property
    def additions(self):
        return sum(s["additions"] for s in self.layers.values())

    @property
    def steps(self):
        return sum(s["steps"] for s in self.layers.values())

    def per_step_multiplies(self, layer):
        slot = self.layers[layer]
        return slot["multiplies"] / slot["steps"]

    def reset(self):
        self.layers = {}


@dataclass
class CompressedModel:
    """Decoded (or freshly quantized) deployable model.

    params holds dense float64 kernels rebuilt from the stored form, so the
    dense engine can run the same network as an oracle; constrained layers
    additionally carry their (pattern row, factor) assignment.
    """
    spec: nn.NetworkSpec
    space: hs.ReducedSpace
    params: nn.ModelParams
    digest: bytes


def serialize_spec(spec: nn.NetworkSpec) -> bytes:
    """Canonical text form of the layer graph; the digest is taken over it."""
    lines = [f"ghaar-net {VERSION}",
             f"input {spec.in_channels} {spec.input_size}",
             f"classes {spec.classes}"]
    for section, seq in (("trunk", spec.shared_trunk),
                         ("loc", spec.loc_head),
                         ("cla", spec.cla_head)):
        lines.append(f"section {section}")
        for l in seq:
            lines.append(f"layer {l.name} {l.kind} {l.kernel_size} "
                         f"{l.in_channels} {l.out_channels} "
                         f"{int(l.constrained)} {int(l.relu)}")
    return ("\n".join(lines) + "\n").encode("ascii")


def parse_spec(blob: bytes, base_offset: int = 0) -> nn.NetworkSpec:
    try:
        lines = blob.decode("ascii").splitlines()
    except UnicodeDecodeError:
        raise FormatError("spec block is not ascii text", offset=base_offset)

    def fail(msg):
        raise FormatError(f"bad spec block: {msg}", offset=base_offset)

    if not lines or lines[0] != f"ghaar-net {VERSION}":
        fail("missing or wrong signature line")
    header = {}
    sections = {"trunk": [], "loc": [], "cla": []}
    current = None
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] in ("input", "classes"):
            header[parts[0]] = [int(p) for p in parts[1:]]
        elif parts[0] == "section":
            if len(parts) != 2 or parts[1] not in sections:
                fail(f"unknown section {line!r}")
            current = sections[parts[1]]
        elif parts[0] == "layer":
            if current is None or len(parts) != 8:
                fail(f"malformed layer line {line!r}")
            try:
                current.append(nn.LayerSpec(
                    parts[1], parts[2], int(parts[3]), int(parts[4]),
                    int(parts[5]), bool(int(parts[6])), bool(int(parts[7]))))
            except (ValueError, ConfigError) as exc:
                fail(str(exc))
        else:
            fail(f"unknown directive {parts[0]!r}")
    if "input" not in header or "classes" not in header:
        fail("missing input/classes header")
    return nn.NetworkSpec(
        input_size=header["input"][1], in_channels=header["input"][0],
        classes=header["classes"][0],
        shared_trunk=tuple(sections["trunk"]),
        loc_head=tuple(sections["loc"]), cla_head=tuple(sections["cla"]))


def spec_digest(spec: nn.NetworkSpec) -> bytes:
    return hashlib.sha256(serialize_spec(spec)).digest()[:16]


def expected_size(spec: nn.NetworkSpec, nr: int) -> int:
    """Exact byte size of an encoded model, computed without encoding."""
    total = len(MAGIC) + 1 + 16 + 4 + len(serialize_spec(spec))
    total += 1 + 2 + 4 * nr
    for layer, _ in spec.conv_layers():
        o, c, k = layer.out_channels, layer.in_channels, layer.kernel_size
        if layer.constrained:
            total += RECORD_SIZE * o * c + 4 * o
        else:
            total += 4 * o * c * k * k + 4 * o
    return total


def compress(params: nn.ModelParams, space) -> CompressedModel:
    """Quantize trained parameters to their stored precision.

    Factors, biases and 1x1 kernels are rounded to float32; constrained
    kernels are rebuilt from the rounded factor so the dense oracle and the
    fast path see the same numbers the file will carry.
    """
    if len(space) > 256:
        raise ConfigError(f"pattern table holds at most 256 entries, got {len(space)}")
    out = params.copy()
    for layer, _ in params.spec.conv_layers():
        lp = out.layers[layer.name]
        if layer.constrained:
            if lp.filter_idx is None:
                raise ConfigError(
                    f"layer {layer.name} has no pattern assignment; "
                    "train with the constraint before compressing")
            if lp.filter_idx.min() < 0 or lp.filter_idx.max() >= len(space):
                raise ConfigError(f"layer {layer.name} references patterns "
                                  "outside the table")
            o, c, k, _ = lp.kernels.shape
            lp.factors = lp.factors.astype(np.float32).astype(np.float64)
            sel = space.signs[lp.filter_idx.reshape(-1)]
            lp.kernels = (lp.factors.reshape(-1, 1) * sel).reshape(o, c, k, k)
        else:
            lp.kernels = lp.kernels.astype(np.float32).astype(np.float64)
        lp.bias = lp.bias.astype(np.float32).astype(np.float64)
    return CompressedModel(params.spec, space, out, spec_digest(params.spec))


def encode_model(model) -> bytes:
    """Serialize a CompressedModel (or quantize ModelParams + space first)."""
    spec = model.spec
    space = model.space
    params = model.params
    blob = serialize_spec(spec)
    out = bytearray()
    out += MAGIC
    out.append(VERSION)
    out += spec_digest(spec)
    out += struct.pack("<I", len(blob))
    out += blob
    out.append(space.m)
    out += struct.pack("<H", len(space))
    out += np.asarray(space.indices, dtype="<u4").tobytes()
    for layer, _ in spec.conv_layers():
        lp = params.layers[layer.name]
        if layer.constrained:
            refs = lp.filter_idx.reshape(-1)
            facs = lp.factors.reshape(-1)
            for ref, fac in zip(refs, facs):
                out += struct.pack("<Bf", int(ref), float(fac))
        else:
            out += lp.kernels.astype("<f4").tobytes()
        out += lp.bias.astype("<f4").tobytes()
    return bytes(out)


class _Cursor:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"file truncated reading {what}", offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def decode_model(data: bytes) -> CompressedModel:
    cur = _Cursor(data)
    if cur.take(4, "magic") != MAGIC:
        raise FormatError("bad magic", offset=0)
    (version,) = cur.unpack("<B", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    digest = cur.take(16, "digest")
    (spec_len,) = cur.unpack("<I", "spec length")
    spec_start = cur.pos
    blob = cur.take(spec_len, "spec block")
    if hashlib.sha256(blob).digest()[:16] != digest:
        raise FormatError("spec digest mismatch", offset=5)
    spec = parse_spec(blob, base_offset=spec_start)

    (m,) = cur.unpack("<B", "pattern side")
    (nr,) = cur.unpack("<H", "pattern count")
    if nr == 0 or nr > 256:
        raise FormatError(f"pattern count {nr} out of range", offset=cur.pos - 2)
    idx_off = cur.pos
    indices = np.frombuffer(cur.take(4 * nr, "pattern table"), dtype="<u4")
    limit = hs.space_size(m) if hs.MIN_SIDE <= m <= hs.MAX_SIDE else 0
    if limit == 0:
        raise FormatError(f"pattern side {m} out of range", offset=idx_off - 3)
    if indices.max() >= limit:
        raise FormatError("canonical index out of range", offset=idx_off)
    try:
        space = hs.reduced_space_from_indices(m, indices.astype(np.int64))
    except ConfigError as exc:
        raise FormatError(f"bad pattern table: {exc}", offset=idx_off)

    params = nn.ModelParams(spec)
    for layer, _ in spec.conv_layers():
        o, c, k = layer.out_channels, layer.in_channels, layer.kernel_size
        if layer.constrained:
            if k != m:
                raise FormatError(
                    f"layer {layer.name} kernel size {k} does not match "
                    f"pattern side {m}", offset=cur.pos)
            rec_off = cur.pos
            raw = cur.take(RECORD_SIZE * o * c, f"{layer.name} records")
            recs = np.frombuffer(raw, dtype=np.dtype([("ref", "u1"), ("fac", "<f4")]))
            refs = recs["ref"].astype(np.int64)
            if refs.max() >= nr:
                bad = int(np.argmax(refs >= nr))
                raise FormatError(
                    f"layer {layer.name} pattern reference out of range",
                    offset=rec_off + bad * RECORD_SIZE)
            facs = recs["fac"].astype(np.float64)
            lp = nn.LayerParams(
                kernels=(facs[:, None] * space.signs[refs]).reshape(o, c, k, k),
                bias=None, filter_idx=refs.reshape(o, c),
                factors=facs.reshape(o, c))
        else:
            raw = cur.take(4 * o * c * k * k, f"{layer.name} kernels")
            lp = nn.LayerParams(
                kernels=np.frombuffer(raw, dtype="<f4").astype(np.float64)
                .reshape(o, c, k, k),
                bias=None)
        lp.bias = np.frombuffer(
            cur.take(4 * o, f"{layer.name} bias"), dtype="<f4").astype(np.float64)
        params.layers[layer.name] = lp
    if cur.pos != len(data):
        raise FormatError("trailing bytes after model payload", offset=cur.pos)
    return CompressedModel(spec, space, params, digest)


def pattern_index_lists(space):
    """Per pattern: positions of +1 and -1 cells, the add/subtract recipe."""
    plus, minus = [], []
    for row in space.signs:
        plus.append(np.flatnonzero(row > 0))
        minus.append(np.flatnonzero(row < 0))
    return plus, minus


def haar_conv_step(pattern, patch, k, counter=None):
    """Response of one constrained kernel at one position.

    Sums the +1 cells, subtracts the -1 cells, and multiplies once by the
    factor.
    """
    cells = pattern.cells if isinstance(pattern, hs.SignPattern) else np.asarray(pattern)
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != cells.shape:
        raise DimensionError(f"patch {patch.shape} vs pattern {cells.shape}")
    flat = patch.reshape(-1)
    sign = cells.reshape(-1)
    plus = flat[sign > 0].sum()
    minus_idx = sign < 0
    s = plus - flat[minus_idx].sum() if minus_idx.any() else plus
    if counter is not None:
        n = flat.size
        counter.record("haar_conv_step", steps=1, multiplies=1, additions=n - 1)
    return float(k * s)


def _conv_fast(x, lp, space, layer, counter):
    """Constrained conv layer via shared signed window sums.

    The signed sum for a given (pattern, input channel) is computed once and
    reused by every output channel that references it; each kernel
    application then costs the single multiply by its factor.
    """
    n, c, h, w = x.shape
    k = layer.kernel_size
    cols, ho, wo = nn._im2col(x, k, (k - 1) // 2)
    cols = cols.reshape(n, c, k * k, ho * wo)
    out = np.zeros((n, layer.out_channels, ho * wo))
    for u in np.unique(lp.filter_idx):
        row = space.signs[u]
        plus = np.flatnonzero(row > 0)
        minus = np.flatnonzero(row < 0)
        s_u = cols[:, :, plus, :].sum(axis=2)
        if minus.size:
            s_u = s_u - cols[:, :, minus, :].sum(axis=2)
        f_u = np.where(lp.filter_idx == u, lp.factors, 0.0)
        out += np.einsum("oc,ncp->nop", f_u, s_u)
    out += lp.bias[None, :, None]
    if counter is not None:
        steps = n * ho * wo * layer.out_channels * c
        counter.record(layer.name, steps=steps, multiplies=steps,
                       additions=steps * (k * k - 1))
    return out.reshape(n, layer.out_channels, ho, wo)


def _count_dense(layer, n, positions, counter):
    k = layer.kernel_size
    steps = n * positions * layer.out_channels * layer.in_channels
    counter.record(layer.name, steps=steps, multiplies=steps * k * k,
                   additions=steps * (k * k - 1))


def layer_positions(spec):
    """Output positions (h*w) of every conv layer, from the input size."""
    out = {}

    def walk(seq, size):
        for layer in seq:
            if layer.kind == "conv":
                out[layer.name] = size * size
            elif layer.kind == "maxpool":
                size //= 2
            elif layer.kind == "gap":
                size = 1
        return size

    trunk_size = walk(spec.shared_trunk, spec.input_size)
    walk(spec.loc_head, trunk_size)
    walk(spec.cla_head, trunk_size)
    return out


def forward_fast(model: CompressedModel, x, counter=None):
    """Network function of the compressed model via the one-multiply path.

    Matches nn_core.forward on the reconstructed dense weights up to the
    rounding difference between factored and elementwise accumulation.
    """
    spec = model.spec
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.shape[1:] != (spec.in_channels, spec.input_size, spec.input_size):
        raise DimensionError(
            f"input shape {x.shape[1:]} does not match model "
            f"({spec.in_channels}, {spec.input_size}, {spec.input_size})")
    n = x.shape[0]
    positions = layer_positions(spec)

    def run(seq, x):
        for layer in seq:
            if layer.kind == "conv":
                lp = model.params.layers[layer.name]
                if layer.constrained:
                    x = _conv_fast(x, lp, model.space, layer, counter)
                else:
                    x = nn.conv2d_dense(x, lp.kernels, lp.bias)
                    if counter is not None:
                        _count_dense(layer, n, positions[layer.name], counter)
                if layer.relu:
                    x = np.maximum(x, 0.0)
            elif layer.kind == "maxpool":
                x = nn.maxpool2x2(x)
            elif layer.kind == "gap":
                x = x.mean(axis=(2, 3))
            elif layer.kind == "softmax":
                x = nn.softmax(x)
        return x

    trunk = run(spec.shared_trunk, x)
    loc = run(spec.loc_head, trunk)
    probs = run(spec.cla_head, trunk)
    return (loc[0], probs[0]) if squeeze else (loc, probs)


def forward_dense(model: CompressedModel, x, counter=None):
    """Dense-route oracle on the same reconstructed weights, with dense
    operation accounting."""
    loc, probs, _ = nn.forward(model.params, x, want_cache=False)
    if counter is not None:
        n = 1 if np.asarray(x).ndim == 3 else np.asarray(x).shape[0]
        positions = layer_positions(model.spec)
        for layer, _branch in model.spec.conv_layers():
            _count_dense(layer, n, positions[layer.name], counter)
    return loc, probs


def infer(model: CompressedModel, window, counter=None):
    """(loc, label, score) for one window through the fast path."""
    loc, probs = forward_fast(model, window, counter)
    if loc.ndim != 1:
        raise DimensionError("infer takes a single window; use forward_fast "
                             "for batches")
    label = int(np.argmax(probs))
    return loc, label, float(probs[label])


def storage_report(spec: nn.NetworkSpec, nr: int = 32):
    """Per-layer bytes under dense-float32 vs compressed storage.

    Kernel payloads only, excluding biases, plus a grand total including
    bias and file overhead; for constrained 3x3 layers the per-kernel ratio
    is 36/5.
    """
    layers = []
    for layer, _ in spec.conv_layers():
        o, c, k = layer.out_channels, layer.in_channels, layer.kernel_size
        kernels = o * c
        dense = 4 * k * k * kernels
        packed = RECORD_SIZE * kernels if layer.constrained else dense
        layers.append({
            "name": layer.name, "kernel_size": k, "kernels": kernels,
            "constrained": layer.constrained,
            "dense_bytes": dense, "compressed_bytes": packed,
            "ratio": dense / packed,
        })
    dense_total = sum(l["dense_bytes"] for l in layers)
    packed_total = sum(l["compressed_bytes"] for l in layers)
    constrained_kernels = sum(l["kernels"] for l in layers if l["constrained"])
    return {
        "layers": layers,
        "constrained_kernels": constrained_kernels,
        "dense_kernel_bytes": dense_total,
        "compressed_kernel_bytes": packed_total,
        "kernel_ratio": dense_total / packed_total,
        "file_bytes": expected_size(spec, nr),
    }
