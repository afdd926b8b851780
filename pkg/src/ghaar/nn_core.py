"""Dense convolutional network engine.

Plain numpy, float64, stride-1 convolutions via im2col.  This is the
training substrate and the reference path the compressed inference is
checked against.  Inputs are (N, C, H, W) batches; single windows can be
passed as (C, H, W).
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

DEFAULT_WINDOW = 48
DEFAULT_TRUNK = (64, 128, 256, 256)
DEFAULT_HEAD = (128, 128)
DEFAULT_BOTTLENECK = 64


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str                  # conv | maxpool | gap | softmax
    kernel_size: int = 0
    in_channels: int = 0
    out_channels: int = 0
    constrained: bool = False
    relu: bool = False

    def __post_init__(self):
        if self.kind not in ("conv", "maxpool", "gap", "softmax"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.constrained and self.kernel_size < 3:
            raise ConfigError(
                f"layer {self.name}: only kernels of size >= 3 can be constrained")
        if self.kind == "conv" and self.kernel_size not in (1, 3):
            raise ConfigError(f"layer {self.name}: kernel size must be 1 or 3")


@dataclass(frozen=True)
class NetworkSpec:
    """Two-headed detector graph: shared trunk, localization and class heads."""

    input_size: int
    in_channels: int
    classes: int               # including background at label 0
    shared_trunk: tuple
    loc_head: tuple
    cla_head: tuple

    def conv_layers(self):
        """(LayerSpec, branch) for every conv, in topological order."""
        out = []
        for branch, seq in (("trunk", self.shared_trunk),
                            ("loc", self.loc_head),
                            ("cla", self.cla_head)):
            out.extend((layer, branch) for layer in seq if layer.kind == "conv")
        return out


def build_network_spec(in_channels=3, classes=3, window=DEFAULT_WINDOW,
                       trunk_widths=DEFAULT_TRUNK, head_widths=DEFAULT_HEAD,
                       bottleneck=DEFAULT_BOTTLENECK, constrained=True):
    """Construct the default architecture at configurable widths.

    Four conv+pool trunk stages reduce a `window`-sized input to a 3x3 map
    when window == 48; each head runs two 3x3 convs, a 1x1 bottleneck, and
    a 1x1 output conv followed by global averaging.  3x3 convs (and only
    those) are eligible for the sign-pattern constraint.
    """
    if len(trunk_widths) != 4:
        raise ConfigError("trunk needs exactly 4 stage widths")
    if len(head_widths) != 2:
        raise ConfigError("each head needs exactly 2 conv widths")
    if window % 16 != 0:
        raise ConfigError("window size must survive four 2x2 pools")
    trunk = []
    prev = in_channels
    for i, width in enumerate(trunk_widths, start=1):
        trunk.append(LayerSpec(f"conv{i}", "conv", 3, prev, width,
                               constrained=constrained, relu=True))
        trunk.append(LayerSpec(f"pool{i}", "maxpool"))
        prev = width

    def head(tag, outputs, with_softmax):
        layers = [
            LayerSpec(f"{tag}_conv5_1", "conv", 3, prev, head_widths[0],
                      constrained=constrained, relu=True),
            LayerSpec(f"{tag}_conv5_2", "conv", 3, head_widths[0], head_widths[1],
                      constrained=constrained, relu=True),
            LayerSpec(f"{tag}_fc1", "conv", 1, head_widths[1], bottleneck, relu=True),
            LayerSpec(f"{tag}_out", "conv", 1, bottleneck, outputs),
            LayerSpec(f"{tag}_gap", "gap"),
        ]
        if with_softmax:
            layers.append(LayerSpec(f"{tag}_softmax", "softmax"))
        return tuple(layers)

    return NetworkSpec(
        input_size=window, in_channels=in_channels, classes=classes,
        shared_trunk=tuple(trunk),
        loc_head=head("loc", 4, with_softmax=False),
        cla_head=head("cla", classes, with_softmax=True),
    )


@dataclass
class LayerParams:
    kernels: np.ndarray              # (O, C, k, k) float64
    bias: np.ndarray                 # (O,) float64
    filter_idx: np.ndarray = None    # (O, C) int64, constrained layers only
    factors: np.ndarray = None       # (O, C) float64, constrained layers only
    shadow: np.ndarray = None        # (O, C, k, k) full-precision accumulator
                                     # kept by constrained training; never
                                     # serialized, never used by forward

    def copy(self):
        return LayerParams(
            self.kernels.copy(), self.bias.copy(),
            None if self.filter_idx is None else self.filter_idx.copy(),
            None if self.factors is None else self.factors.copy(),
            None if self.shadow is None else self.shadow.copy())


@dataclass
class ModelParams:
    spec: NetworkSpec
    layers: dict = field(default_factory=dict)  # name -> LayerParams

    def copy(self):
        return ModelParams(self.spec, {k: v.copy() for k, v in self.layers.items()})

    def items(self):
        return self.layers.items()


def init_params(spec: NetworkSpec, seed: int = 0) -> ModelParams:
    """He-uniform kernels (ReLU gain), zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params = ModelParams(spec)
    for layer, _branch in spec.conv_layers():
        k, ci, co = layer.kernel_size, layer.in_channels, layer.out_channels
        # fan-in scaling with ReLU gain keeps activation variance roughly
        # constant through the deep narrow stack; Glorot shrinks it ~2x per
        # stage here and the class logits never separate
        limit = np.sqrt(6.0 / (ci * k * k))
        kernels = rng.uniform(-limit, limit, size=(co, ci, k, k))
        params.layers[layer.name] = LayerParams(kernels, np.zeros(co))
    return params


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (C, H, W) or (N, C, H, W), got shape {x.shape}")


def _im2col(x, k, pad):
    """(N, C, H, W) -> columns (N, C*k*k, P) for stride-1 windows."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    view = sliding_window_view(x, (k, k), axis=(2, 3))   # (N, C, Ho, Wo, k, k)
    ho, wo = view.shape[2], view.shape[3]
    cols = view.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d_dense(x, kernels, bias=None):
    """Stride-1 cross-correlation; zero padding keeps 3x3 output same-sized.

    1x1 kernels get no padding.  Returns the activation map (same batch
    arrangement as the input).
    """
    x, squeeze = _as_batch(x)
    kernels = np.asarray(kernels, dtype=np.float64)
    o, c, k, k2 = kernels.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"kernel spatial size must be odd and square, got {k}x{k2}")
    if x.shape[1] != c:
        raise DimensionError(f"input has {x.shape[1]} channels, kernels expect {c}")
    pad = (k - 1) // 2
    cols, ho, wo = _im2col(x, k, pad)
    n = x.shape[0]
    flat = kernels.reshape(o, c * k * k)
    out = flat @ cols.transpose(1, 0, 2).reshape(c * k * k, n * ho * wo)
    out = out.reshape(o, n, ho * wo).transpose(1, 0, 2)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)[None, :, None]
    out = out.reshape(n, o, ho, wo)
    return out[0] if squeeze else out


def _conv_forward(x, lp: LayerParams):
    cols, ho, wo = _im2col(x, lp.kernels.shape[2], (lp.kernels.shape[2] - 1) // 2)
    n = x.shape[0]
    o, c, k, _ = lp.kernels.shape
    flat = lp.kernels.reshape(o, c * k * k)
    out = flat @ cols.transpose(1, 0, 2).reshape(c * k * k, n * ho * wo)
    out = out.reshape(o, n, ho * wo).transpose(1, 0, 2) + lp.bias[None, :, None]
    return out.reshape(n, o, ho, wo), cols


def _conv_backward(dout, cols, x_shape, lp: LayerParams):
    n, c, h, w = x_shape
    o, _, k, _ = lp.kernels.shape
    p = dout.shape[2] * dout.shape[3]
    dflat = dout.reshape(n, o, p)
    dw = np.einsum("nop,nqp->oq", dflat, cols).reshape(o, c, k, k)
    db = dflat.sum(axis=(0, 2))
    flipped = lp.kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx = conv2d_dense(dout, np.ascontiguousarray(flipped))
    return dx, dw, db


def maxpool2x2(x):
    """Non-overlapping 2x2 max pooling; spatial dims must be even."""
    x, squeeze = _as_batch(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2)
    out = blocks.max(axis=(3, 5))
    return out[0] if squeeze else out


def _maxpool_forward(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _maxpool_backward(dout, arg, x_shape):
    n, c, h, w = x_shape
    dflat = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(dflat, arg[..., None], dout[..., None], axis=-1)
    blocks = dflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(n, c, h, w)


def softmax(logits):
    """Row-wise stable softmax; accepts a single vector or (N, C)."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if single else p


def forward(params: ModelParams, x, want_cache=True):
    """Run the two-headed network.

    Returns (loc, probs, cache): loc is (N, 4), probs is (N, classes).  The
    cache holds every intermediate needed by backward(); pass
    want_cache=False for inference-only calls.
    """
    spec = params.spec
    x, squeeze = _as_batch(x)
    if x.shape[1:] != (spec.in_channels, spec.input_size, spec.input_size):
        raise DimensionError(
            f"input shape {x.shape[1:]} does not match spec "
            f"({spec.in_channels}, {spec.input_size}, {spec.input_size})")
    cache = {"n": x.shape[0], "steps": []} if want_cache else None

    def run(seq, x):
        for layer in seq:
            if layer.kind == "conv":
                lp = params.layers[layer.name]
                x_shape = x.shape
                out, cols = _conv_forward(x, lp)
                pre_relu = out
                if layer.relu:
                    out = np.maximum(out, 0.0)
                if cache is not None:
                    cache["steps"].append(("conv", layer, x_shape, cols,
                                           pre_relu if layer.relu else None))
                x = out
            elif layer.kind == "maxpool":
                x_shape = x.shape
                x, arg = _maxpool_forward(x)
                if cache is not None:
                    cache["steps"].append(("maxpool", layer, x_shape, arg, None))
            elif layer.kind == "gap":
                if cache is not None:
                    cache["steps"].append(("gap", layer, x.shape, None, None))
                x = x.mean(axis=(2, 3))
            elif layer.kind == "softmax":
                if cache is not None:
                    cache["steps"].append(("softmax", layer, None, None, None))
                x = softmax(x)
        return x

    trunk_out = run(spec.shared_trunk, x)
    if cache is not None:
        cache["trunk_end"] = len(cache["steps"])
    loc = run(spec.loc_head, trunk_out)
    if cache is not None:
        cache["loc_end"] = len(cache["steps"])
    probs = run(spec.cla_head, trunk_out)
    if squeeze:
        loc, probs = loc[0], probs[0]
    if cache is not None:
        cache["probs"] = probs if not squeeze else probs[None]
    return loc, probs, cache


def backward(params: ModelParams, cache, grad_loc, grad_cla):
    """Gradients of sum(grad_loc * loc) + sum(grad_cla * probs) w.r.t. params.

    grad_cla is taken against the post-softmax probabilities.  Returns a
    dict name -> (dkernels, dbias) matching the parameter shapes.
    """
    if cache is None or "steps" not in cache:
        raise ConfigError("backward needs the cache from a matching forward call")
    steps = cache["steps"]
    grads = {}

    def run_back(lo, hi, dx):
        for kind, layer, shape_or_none, aux, pre_relu in reversed(steps[lo:hi]):
            if kind == "softmax":
                p = cache["probs"]
                dot = (dx * p).sum(axis=1, keepdims=True)
                dx = p * (dx - dot)
            elif kind == "gap":
                n, c, h, w = shape_or_none
                dx = np.broadcast_to(dx[:, :, None, None] / (h * w), (n, c, h, w))
            elif kind == "maxpool":
                dx = _maxpool_backward(dx, aux, shape_or_none)
            elif kind == "conv":
                if pre_relu is not None:
                    dx = dx * (pre_relu > 0)
                lp = params.layers[layer.name]
                dx, dw, db = _conv_backward(dx, aux, shape_or_none, lp)
                grads[layer.name] = (dw, db)
        return dx

    grad_loc = np.atleast_2d(np.asarray(grad_loc, dtype=np.float64))
    grad_cla = np.atleast_2d(np.asarray(grad_cla, dtype=np.float64))
    d_trunk = run_back(cache["trunk_end"], cache["loc_end"], grad_loc)
    d_trunk = d_trunk + run_back(cache["loc_end"], len(steps), grad_cla)
    run_back(0, cache["trunk_end"], d_trunk)
    return grads


def sgd_update(params: ModelParams, grads, lr: float):
    """In-place w <- w - lr*g for every kernel and bias with a gradient."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for name, (dw, db) in grads.items():
        lp = params.layers[name]
        lp.kernels -= lr * dw
        lp.bias -= lr * db
    return params
