"""Constrained training loop.

Every eligible 3x3 kernel slice the network actually runs with sits on the
sign-pattern manifold w = pattern * factor.  Training keeps a full-precision
accumulator per constrained slice alongside that projected form: a step runs
forward/backward through the projected kernels, applies the gradients
straight through to the accumulators (plus the smooth-min pull toward the
pattern space, evaluated at the accumulator), then re-projects each
accumulator onto its nearest pattern to refresh the (pattern, factor) form.
Projecting the accumulator instead of the projected weight itself is what
lets gradient components orthogonal to the current pattern accumulate until
they flip it; re-projecting the projected weight discards them and training
stalls at the class prior.  Training happens twice: first against the full
pattern space, then, after a usage census picks the popular patterns,
against the reduced space the compressed model will ship with.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingError
from . import haar_space as hs
from . import nn_core as nn
from .ppm import normalize_image


@dataclass
class TrainConfig:
    epochs: int = 10
    phase_a_epochs: int = None   # default: half the epochs, rounded up
    lr: float = 0.01
    lr_decay: float = 0.5
    decay_every: int = 10
    batch_size: int = 32
    phi: float = 0.1             # regularizer weight
    q: int = 8                   # smooth-min sharpness
    nr: int = 32                 # reduced-space size
    m: int = 3
    loss_weights: tuple = (1.0, 1.0)   # (localization, classification)
    seed: int = 0
    constrain: bool = True       # project after every step
    window: int = 48
    in_channels: int = 3
    classes: int = 3
    trunk_widths: tuple = nn.DEFAULT_TRUNK
    head_widths: tuple = nn.DEFAULT_HEAD
    bottleneck: int = nn.DEFAULT_BOTTLENECK

    def __post_init__(self):
        if self.q < 1:
            raise ConfigError(f"sharpness must be >= 1, got {self.q}")
        if self.phi < 0:
            raise ConfigError(f"regularizer weight must be >= 0, got {self.phi}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr decay must be in (0, 1], got {self.lr_decay}")
        if self.phase_a_epochs is None:
            self.phase_a_epochs = (self.epochs + 1) // 2
        if not 0 <= self.phase_a_epochs <= self.epochs:
            raise ConfigError("first-phase epochs must fit inside the total")

    def network_spec(self):
        # eligibility is structural (every 3x3 conv); cfg.constrain only
        # decides whether training actually projects
        return nn.build_network_spec(
            in_channels=self.in_channels, classes=self.classes,
            window=self.window, trunk_widths=self.trunk_widths,
            head_widths=self.head_widths, bottleneck=self.bottleneck,
            constrained=True)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_every)


def _logsumexp_rows(a):
    mx = a.max(axis=1, keepdims=True)
    return mx[:, 0] + np.log(np.exp(a - mx).sum(axis=1))


def _regularizer_batch(flat, signs, phi: float, q: int):
    """Smooth-min distance to the pattern space, summed over kernel rows.

    flat is (J, m*m), signs (N, m*m).  Returns (value, grad) with grad shaped
    like flat.  The per-row value is a soft minimum over the per-pattern
    least-squares residuals; as q grows it approaches phi times the true
    nearest-pattern residual from above.
    """
    mm = flat.shape[1]
    scales = flat @ signs.T / mm                      # (J, N)
    sq = (flat * flat).sum(axis=1, keepdims=True)     # |w|^2
    residuals = np.maximum(sq - scales * scales * mm, 0.0)
    a = -residuals
    lse_q = _logsumexp_rows(q * a)
    lse_q1 = _logsumexp_rows((q + 1) * a)
    value = phi * (lse_q - lse_q1).sum()
    p_q = np.exp(q * a - lse_q[:, None])
    p_q1 = np.exp((q + 1) * a - lse_q1[:, None])
    c = (q + 1) * p_q1 - q * p_q                      # (J, N)
    grad = 2.0 * phi * (c.sum(axis=1, keepdims=True) * flat - (c * scales) @ signs)
    return value, grad


def haar_regularizer(w, space, phi: float, q: int):
    """(value, grad) of the smooth-min pull for one m x m kernel."""
    if q < 1:
        raise ConfigError(f"sharpness must be >= 1, got {q}")
    if phi < 0:
        raise ConfigError(f"regularizer weight must be >= 0, got {phi}")
    m = space.m
    flat = hs._flat_kernel(w, m)
    value, grad = _regularizer_batch(flat[None, :], space.signs, phi, q)
    return float(value), grad[0].reshape(np.asarray(w).shape)


def constrained_layer_names(spec):
    return [layer.name for layer, _ in spec.conv_layers() if layer.constrained]


def constrain_params(params, space):
    """Snap every eligible kernel slice onto its nearest pattern, in place.

    The pre-projection values are kept (seeded on first call) as the
    per-layer full-precision accumulators that later steps update; the
    projection always reads the accumulator, so repeated calls are stable
    and a space change re-projects the accumulated weights, not the
    already-projected ones.
    """
    mm = space.m * space.m
    for name in constrained_layer_names(params.spec):
        lp = params.layers[name]
        if lp.shadow is None:
            lp.shadow = lp.kernels.copy()
        o, c, k, _ = lp.shadow.shape
        flat = lp.shadow.reshape(o * c, mm)
        rows, scales, _ = hs.project_batch(flat, space)
        lp.filter_idx = rows.reshape(o, c)
        lp.factors = scales.reshape(o, c)
        lp.kernels = (scales[:, None] * space.signs[rows]).reshape(o, c, k, k)
    return params


def reconstruct_params(params, space):
    """Rebuild dense kernels as pattern * factor for constrained layers."""
    for name in constrained_layer_names(params.spec):
        lp = params.layers[name]
        o, c, k, _ = lp.kernels.shape
        if lp.filter_idx is None:
            raise TrainingError(f"layer {name} has no pattern assignment yet")
        sel = space.signs[lp.filter_idx.reshape(-1)]
        lp.kernels = (lp.factors.reshape(-1, 1) * sel).reshape(o, c, k, k)
    return params


def loc_loss(pred, target, mask):
    """Mean squared offset error over the masked (foreground) rows."""
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    mask = np.atleast_1d(mask).astype(bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(pred)
    diff = (pred - target) * mask[:, None]
    value = float((diff * diff).sum() / (4 * n))
    grad = 2.0 * diff / (4 * n)
    return value, grad


def cla_loss(probs, labels):
    """Mean cross-entropy against integer labels; gradient is w.r.t. probs."""
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(labels).astype(int)
    n = probs.shape[0]
    picked = probs[np.arange(n), labels]
    value = float(-np.log(np.maximum(picked, 1e-12)).mean())
    grad = np.zeros_like(probs)
    grad[np.arange(n), labels] = -1.0 / (n * np.maximum(picked, 1e-12))
    return value, grad


def train_step(params, x, loc_target, labels, space, cfg: TrainConfig, lr: float):
    """One constrained SGD step over a batch.

    Returns a dict with the batch losses.  Raises TrainingError when the
    loss or a gradient goes non-finite, leaving params untouched in that
    case only if the caller restored them (see fit).
    """
    if cfg.constrain:
        reconstruct_params(params, space)
        for name in constrained_layer_names(params.spec):
            lp = params.layers[name]
            if lp.shadow is None:
                lp.shadow = lp.kernels.copy()
    loc, probs, cache = nn.forward(params, x)
    mask = np.asarray(labels) != 0
    lv, lg = loc_loss(loc, loc_target, mask)
    cv, cg = cla_loss(probs, labels)
    w_loc, w_cla = cfg.loss_weights
    total = w_loc * lv + w_cla * cv
    reg_value = 0.0
    if not np.isfinite(total):
        raise TrainingError(f"non-finite loss {total}")
    grads = nn.backward(params, cache, w_loc * lg, w_cla * cg)
    if cfg.phi > 0:
        mm = space.m * space.m
        for name in constrained_layer_names(params.spec):
            lp = params.layers[name]
            base = lp.shadow if cfg.constrain else lp.kernels
            o, c, k, _ = base.shape
            rv, rg = _regularizer_batch(base.reshape(o * c, mm),
                                        space.signs, cfg.phi, cfg.q)
            reg_value += rv
            dw, db = grads[name]
            grads[name] = (dw + rg.reshape(o, c, k, k), db)
    for name, (dw, db) in grads.items():
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise TrainingError(f"non-finite gradient in layer {name}")
    if cfg.constrain:
        # straight-through: gradients taken through the projected kernels
        # land on the accumulators (sgd_update mutates in place), then the
        # projection refreshes the (pattern, factor) form from them
        for name in constrained_layer_names(params.spec):
            lp = params.layers[name]
            lp.kernels = lp.shadow
    nn.sgd_update(params, grads, lr)
    if cfg.constrain:
        constrain_params(params, space)
    err = float((probs.argmax(axis=1) != np.asarray(labels)).mean())
    return {"loss": total + reg_value, "loc": lv, "cla": cv, "reg": reg_value,
            "err_cla": err}


def mean_nearest_residual(params, space) -> float:
    """Average nearest-pattern residual over all eligible kernel slices.

    Measured on the full-precision accumulators when training keeps them
    (the projected kernels sit on the manifold by construction, residual 0);
    this is the pre-projection distance the smooth-min pull acts on.
    """
    chunks = []
    mm = space.m * space.m
    for name in constrained_layer_names(params.spec):
        lp = params.layers[name]
        base = lp.kernels if lp.shadow is None else lp.shadow
        flat = base.reshape(-1, mm)
        _, _, res = hs.project_batch(flat, space)
        chunks.append(res)
    if not chunks:
        return 0.0
    return float(np.concatenate(chunks).mean())


def usage_census(params, space) -> np.ndarray:
    """How many kernel slices currently sit nearest to each pattern."""
    counts = np.zeros(len(space), dtype=np.int64)
    mm = space.m * space.m
    for name in constrained_layer_names(params.spec):
        lp = params.layers[name]
        rows, _, _ = hs.project_batch(lp.kernels.reshape(-1, mm), space)
        counts += np.bincount(rows, minlength=len(space))
    # report against canonical indices, not row order
    out = np.zeros(hs.space_size(space.m), dtype=np.int64)
    out[np.asarray(space.indices)] = counts
    return out


def _epoch_batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield perm[lo:lo + batch_size]


def _as_batch(x, idx):
    """Slice samples out of the store as float64 network input.

    uint8 patch stacks shaped (N, H, W, 3) are normalized on the fly so the
    full set never has to exist in float form; float arrays pass through.
    """
    sel = x[idx]
    if sel.dtype == np.uint8:
        return np.stack([normalize_image(p) for p in sel])
    return np.asarray(sel, dtype=np.float64)


def _run_phase(params, space, data, cfg, rng, epochs, epoch_offset, rows, val,
               progress=None):
    x, loc_t, labels = data
    for ep in range(epochs):
        lr = cfg.lr_at(epoch_offset + ep)
        sums = {"loss": 0.0, "loc": 0.0, "cla": 0.0, "reg": 0.0,
                "err_cla": 0.0}
        nb = 0
        for idx in _epoch_batches(x.shape[0], cfg.batch_size, rng):
            xb = _as_batch(x, idx)
            backup = params.copy()
            try:
                info = train_step(params, xb, loc_t[idx], labels[idx],
                                  space, cfg, lr)
            except TrainingError:
                params.layers = backup.layers
                info = train_step(params, xb, loc_t[idx], labels[idx],
                                  space, cfg, lr / 2)
            for k in sums:
                sums[k] += info[k]
            nb += 1
        row = {"epoch": epoch_offset + ep, "phase": "A" if space_is_full(space) else "B",
               "lr": lr, "space": len(space)}
        row.update({k: v / nb for k, v in sums.items()})
        row["mean_residual"] = mean_nearest_residual(params, space)
        if val is not None:
            row.update(evaluate_windows(params, *val))
        rows.append(row)
        if progress is not None:
            progress(row)
    return params


def space_is_full(space):
    return len(space) == hs.space_size(space.m)


def evaluate_windows(params, x, loc_t, labels, batch_size=256):
    """Window-level error rates on a held-out sample set."""
    labels = np.asarray(labels)
    loc_t = np.asarray(loc_t, dtype=np.float64)
    wrong = 0
    loc_sq = 0.0
    npos = 0
    for lo in range(0, x.shape[0], batch_size):
        sl = slice(lo, lo + batch_size)
        loc, probs, _ = nn.forward(params, _as_batch(x, sl), want_cache=False)
        pred = probs.argmax(axis=1)
        wrong += int((pred != labels[sl]).sum())
        mask = labels[sl] != 0
        if mask.any():
            d = loc[mask] - loc_t[sl][mask]
            loc_sq += float((d * d).sum())
            npos += int(mask.sum())
    return {"val_err_cla": wrong / x.shape[0],
            "val_err_loc": loc_sq / (4 * npos) if npos else 0.0}


def fit(x, loc_target, labels, cfg: TrainConfig, val=None, progress=None):
    """Two-phase constrained training.

    Phase one trains against the full pattern space; a usage census then
    keeps the cfg.nr busiest patterns and phase two continues training
    against that reduced space.  Returns (params, reduced_space, log_rows).
    With cfg.constrain False there is one unconstrained phase and the
    returned space is the full one.
    """
    x = np.asarray(x)
    if x.dtype != np.uint8:
        x = x.astype(np.float64, copy=False)
    loc_target = np.asarray(loc_target, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != loc_target.shape[0] or x.shape[0] != labels.shape[0]:
        raise ConfigError("sample arrays disagree on length")
    if x.shape[0] == 0:
        raise ConfigError("cannot fit on an empty sample set")
    spec = cfg.network_spec()
    rng = np.random.default_rng(cfg.seed)
    params = nn.init_params(spec, seed=cfg.seed)
    full = hs.enumerate_space(cfg.m)
    rows = []
    data = (x, loc_target, labels)

    if not cfg.constrain:
        _run_phase(params, full, data, cfg, rng, cfg.epochs, 0, rows, val,
                   progress)
        return params, full, rows

    constrain_params(params, full)
    _run_phase(params, full, data, cfg, rng, cfg.phase_a_epochs, 0, rows, val,
               progress)
    counts = usage_census(params, full)
    reduced = hs.select_top_filters(counts, cfg.nr)
    constrain_params(params, reduced)
    _run_phase(params, reduced, data, cfg, rng,
               cfg.epochs - cfg.phase_a_epochs, cfg.phase_a_epochs, rows, val,
               progress)
    return params, reduced, rows


LOG_FIELDS = ["epoch", "split", "er_cla", "er_loc", "mean_residual", "lr"]


def write_log_csv(rows, path):
    """One train line per epoch, plus a val line when a held-out set ran."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({"epoch": row["epoch"], "split": "train",
                             "er_cla": row["err_cla"], "er_loc": row["loc"],
                             "mean_residual": row["mean_residual"],
                             "lr": row["lr"]})
            if "val_err_cla" in row:
                writer.writerow({"epoch": row["epoch"], "split": "val",
                                 "er_cla": row["val_err_cla"],
                                 "er_loc": row["val_err_loc"],
                                 "mean_residual": row["mean_residual"],
                                 "lr": row["lr"]})
