"""Sign-pattern filter space: enumeration, projection, and selection.

An m x m sign pattern is a kernel whose cells are all -1 or +1.  A pattern
and its negation act as the same filter once an arbitrary real scale factor
is allowed, so the space is canonicalized by fixing cell (0, 0) to +1.  The
remaining m*m - 1 cells, read in row-major order, form the bits of the
canonical index: cell number j+1 contributes bit j (least significant bit
first), with +1 encoding as 1.  Index 0 is therefore the pattern that is +1
at (0, 0) and -1 everywhere else; the all-ones pattern has the largest
index, 2**(m*m - 1) - 1.

Projecting a real kernel w onto a pattern s means finding the least-squares
scale: lambda = sum(w * s) / sum(s * s) = sum(w * s) / m^2.  The residual
sum((w - lambda * s)**2) measures how far w sits from the ray through s.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError

MIN_SIDE = 2
MAX_SIDE = 4  # 2**(4*4-1) = 32768 patterns; beyond that enumeration is pointless


def space_size(m: int) -> int:
    """Number of canonical sign patterns of side m."""
    return 1 << (m * m - 1)


def side_for_size(n: int) -> int:
    """Inverse of space_size; raises ConfigError if n is not a space size."""
    for m in range(MIN_SIDE, MAX_SIDE + 1):
        if space_size(m) == n:
            return m
    raise ConfigError(f"{n} is not the size of any filter space with side in "
                      f"[{MIN_SIDE}, {MAX_SIDE}]")


@dataclass(frozen=True)
class SignPattern:
    """One canonical +-1 filter."""

    m: int
    cells: np.ndarray  # (m, m) int8, cells[0, 0] == +1
    canonical_index: int

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int8)
        if cells.shape != (self.m, self.m):
            raise DimensionError(f"cells shape {cells.shape} != ({self.m}, {self.m})")
        if not np.all(np.abs(cells) == 1):
            raise ConfigError("sign pattern cells must be -1 or +1")
        if cells[0, 0] != 1:
            raise ConfigError("canonical sign patterns have +1 at cell (0, 0)")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)


def index_from_cells(cells) -> int:
    """Canonical index of a +-1 grid whose (0, 0) cell is +1."""
    flat = np.asarray(cells).reshape(-1)
    if flat[0] != 1:
        raise ConfigError("cell (0, 0) must be +1 before encoding")
    bits = (flat[1:] > 0).astype(np.int64)
    return int((bits << np.arange(bits.size)).sum())


def cells_from_index(m: int, index: int) -> np.ndarray:
    """Decode a canonical index into an (m, m) int8 sign grid."""
    n_bits = m * m - 1
    if not 0 <= index < (1 << n_bits):
        raise ConfigError(f"canonical index {index} out of range for m={m}")
    bits = (index >> np.arange(n_bits)) & 1
    flat = np.empty(m * m, dtype=np.int8)
    flat[0] = 1
    flat[1:] = bits * 2 - 1
    return flat.reshape(m, m)


class FilterSpace:
    """The full set of 2**(m^2 - 1) canonical sign patterns, ordered by index.

    `signs` is the (size, m*m) float matrix of flattened patterns used by the
    vectorized projection routines; `indices` maps row -> canonical index
    (the identity for the full space).
    """

    def __init__(self, m: int):
        if not MIN_SIDE <= m <= MAX_SIDE:
            raise ConfigError(
                f"filter space side must be in [{MIN_SIDE}, {MAX_SIDE}], got {m}: "
                f"2**({m}*{m}-1) patterns would exceed the supported size limit")
        self.m = m
        n = space_size(m)
        idx = np.arange(n, dtype=np.int64)
        bits = (idx[:, None] >> np.arange(m * m - 1)[None, :]) & 1
        signs = np.empty((n, m * m), dtype=np.float64)
        signs[:, 0] = 1.0
        signs[:, 1:] = bits * 2.0 - 1.0
        signs.setflags(write=False)
        self.signs = signs
        idx.setflags(write=False)
        self.indices = idx

    def __len__(self):
        return self.signs.shape[0]

    def __getitem__(self, i: int) -> SignPattern:
        i = int(i)
        cells = self.signs[i].reshape(self.m, self.m).astype(np.int8)
        return SignPattern(self.m, cells, int(self.indices[i]))

    @property
    def patterns(self):
        return [self[i] for i in range(len(self))]

    def row_of(self, canonical_index: int) -> int:
        return int(canonical_index)


@dataclass(frozen=True)
class ReducedSpace:
    """The Nr most-used patterns of a base space, in descending usage order."""

    m: int
    selected: np.ndarray      # (Nr,) canonical indices, usage-descending
    usage_counts: np.ndarray  # counts over the full base space, or per-row
    signs: np.ndarray = field(repr=False)  # (Nr,) x (m*m) float rows
    indices: np.ndarray = field(repr=False)  # alias of selected, row -> index

    @property
    def nr(self) -> int:
        return int(self.selected.size)

    def __len__(self):
        return self.nr

    def __getitem__(self, row: int) -> SignPattern:
        cells = self.signs[row].reshape(self.m, self.m).astype(np.int8)
        return SignPattern(self.m, cells, int(self.selected[row]))

    def row_of(self, canonical_index: int) -> int:
        """Table row holding a canonical index; raises if not selected."""
        hits = np.nonzero(self.selected == canonical_index)[0]
        if hits.size == 0:
            raise ConfigError(f"filter {canonical_index} is not in the reduced space")
        return int(hits[0])


def reduced_space_from_indices(m: int, selected, usage_counts=None) -> ReducedSpace:
    """Build a ReducedSpace straight from canonical indices (decode path)."""
    selected = np.asarray(selected, dtype=np.int64).copy()
    if selected.size == 0:
        raise ConfigError("reduced space needs at least one filter")
    if selected.size != np.unique(selected).size:
        raise ConfigError("reduced space indices must be distinct")
    signs = np.stack([cells_from_index(m, int(i)).reshape(-1).astype(np.float64)
                      for i in selected])
    if usage_counts is None:
        usage_counts = np.zeros(space_size(m), dtype=np.int64)
    counts = np.asarray(usage_counts, dtype=np.int64).copy()
    for a in (selected, signs, counts):
        a.setflags(write=False)
    return ReducedSpace(m=m, selected=selected, usage_counts=counts,
                        signs=signs, indices=selected)


@dataclass(frozen=True)
class ProjectionResult:
    """Nearest-pattern answer: index, least-squares scale, and residual."""

    index: int
    scale: float
    residual: float


def enumerate_space(m: int) -> FilterSpace:
    """All canonical sign patterns of side m, ordered by canonical index."""
    return FilterSpace(m)


def _flat_kernel(w, m: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (m, m) and w.shape != (m * m,):
        raise DimensionError(f"kernel shape {w.shape} does not match side {m}")
    return w.reshape(-1)


def project_scale(w, f) -> float:
    """Least-squares scale fitting kernel w to sign pattern f.

    scale = sum(w * f) / m^2, the unique minimizer of sum((w - scale*f)**2).
    """
    if isinstance(f, SignPattern):
        cells, m = f.cells, f.m
    else:
        cells = np.asarray(f)
        m = cells.shape[0]
    wf = _flat_kernel(w, m)
    return float(wf @ cells.reshape(-1).astype(np.float64) / (m * m))


def nearest_filter(w, space) -> ProjectionResult:
    """Pattern in `space` minimizing the least-squares residual to w.

    Ties are broken by the lowest canonical index.  Accepts a FilterSpace or
    a ReducedSpace.
    """
    wf = _flat_kernel(w, space.m)
    rows, scales, residuals = project_batch(wf[None, :], space)
    return ProjectionResult(index=int(space.indices[rows[0]]),
                            scale=float(scales[0]),
                            residual=float(residuals[0]))


def project_batch(kernels, space, block: int = 2048):
    """Nearest pattern for many flat kernels at once.

    kernels is (J, m*m); returns (rows, scales, residuals) where rows index
    into `space` (not canonical indices).  Agrees with nearest_filter on
    every row, including the lowest-canonical-index tie rule.  Work is
    chunked so the (block, len(space), m*m) intermediate stays small.
    """
    m = space.m
    mm = m * m
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim != 2 or kernels.shape[1] != mm:
        raise DimensionError(f"expected (J, {mm}) kernels, got shape {kernels.shape}")
    if len(space) == 0:
        raise ConfigError("cannot search an empty filter space")
    # scan columns in ascending canonical order so argmin's first-match
    # behavior lands on the lowest index among exact ties
    order = np.argsort(space.indices, kind="stable")
    signs = space.signs[order]
    j = kernels.shape[0]
    rows = np.empty(j, dtype=np.int64)
    scales = np.empty(j)
    residuals = np.empty(j)
    for lo in range(0, j, block):
        chunk = kernels[lo:lo + block]
        # elementwise product + axis reduction, not BLAS: the rounding then
        # does not depend on how many kernels share the call
        sc = (chunk[:, None, :] * signs[None, :, :]).sum(axis=2) / mm
        diff = chunk[:, None, :] - sc[:, :, None] * signs[None, :, :]
        res = (diff * diff).sum(axis=2)
        pos = res.argmin(axis=1)
        take = np.arange(chunk.shape[0])
        rows[lo:lo + block] = order[pos]
        scales[lo:lo + block] = sc[take, pos]
        residuals[lo:lo + block] = res[take, pos]
    return rows, scales, residuals


def select_top_filters(usage_counts, nr: int) -> ReducedSpace:
    """Keep the nr most-used patterns.

    Descending count; ties resolved toward the lower canonical index.  The
    side m is inferred from the histogram length.
    """
    counts = np.asarray(usage_counts, dtype=np.int64)
    if np.any(counts < 0):
        raise ConfigError("usage counts must be nonnegative")
    m = side_for_size(counts.size)
    if nr <= 0:
        raise ConfigError(f"number of selected filters must be positive, got {nr}")
    if nr > counts.size:
        raise ConfigError(f"cannot select {nr} filters from a space of {counts.size}")
    order = np.lexsort((np.arange(counts.size), -counts))
    return reduced_space_from_indices(m, order[:nr], counts)
