"""Sign-pattern space: enumeration, projection, nearest-filter search."""

import numpy as np
import pytest

from ghaar.errors import ConfigError, DimensionError
from ghaar import haar_space as hs


def brute_nearest(w, signs, indices):
    """Reference search: explicit loop over every pattern."""
    wf = w.reshape(-1)
    best = None
    for row, idx in zip(signs, indices):
        lam = float(wf @ row) / wf.size
        res = float(((wf - lam * row) ** 2).sum())
        if best is None or res < best[2] - 1e-15 or (
                abs(res - best[2]) <= 1e-15 and idx < best[0]):
            best = (idx, lam, res)
    return best


def test_space_sizes():
    assert len(hs.enumerate_space(2)) == 8
    assert len(hs.enumerate_space(3)) == 256
    assert hs.space_size(4) == 2 ** 15


def test_side_limits():
    with pytest.raises(ConfigError):
        hs.enumerate_space(1)
    with pytest.raises(ConfigError):
        hs.enumerate_space(5)


def test_all_patterns_canonical_and_distinct():
    for m in (2, 3):
        space = hs.enumerate_space(m)
        seen = set()
        for p in space.patterns:
            assert p.cells[0, 0] == 1
            assert set(np.unique(p.cells)) <= {-1, 1}
            seen.add(p.cells.tobytes())
        assert len(seen) == len(space)


def test_index_round_trip():
    for m in (2, 3):
        for idx in range(hs.space_size(m)):
            cells = hs.cells_from_index(m, idx)
            assert hs.index_from_cells(cells) == idx


def test_index_extremes():
    # index 0: +1 only at the anchor; max index: all +1
    cells0 = hs.cells_from_index(3, 0)
    assert cells0[0, 0] == 1 and (cells0.reshape(-1)[1:] == -1).all()
    cells_max = hs.cells_from_index(3, 255)
    assert (cells_max == 1).all()


def test_project_scale_hand_examples():
    space = hs.enumerate_space(3)
    all_ones = space[255]
    w = np.arange(1.0, 10.0).reshape(3, 3)
    assert hs.project_scale(w, all_ones) == pytest.approx(5.0)
    # against index 0 the anchor contributes +1 and the rest -1
    assert hs.project_scale(w, space[0]) == pytest.approx((1 - sum(range(2, 10))) / 9)
    assert hs.project_scale(np.zeros((3, 3)), all_ones) == 0.0


def test_project_scale_shape_check():
    space = hs.enumerate_space(3)
    with pytest.raises(DimensionError):
        hs.project_scale(np.zeros((2, 2)), space[0])


def test_nearest_matches_brute_force():
    space = hs.enumerate_space(3)
    rng = np.random.default_rng(7)
    for _ in range(200):
        w = rng.normal(size=(3, 3))
        got = hs.nearest_filter(w, space)
        idx, lam, res = brute_nearest(w, space.signs, space.indices)
        assert got.index == idx
        assert got.scale == pytest.approx(lam, abs=1e-12)
        assert got.residual == pytest.approx(res, abs=1e-12)


def test_nearest_scale_equivariance():
    space = hs.enumerate_space(3)
    rng = np.random.default_rng(11)
    w = rng.normal(size=(3, 3))
    base = hs.nearest_filter(w, space)
    up = hs.nearest_filter(2.0 * w, space)
    assert up.index == base.index
    assert up.scale == pytest.approx(2.0 * base.scale)
    # w and -w share a canonical pattern: residuals are unchanged under
    # negation, only the factor flips sign
    neg = hs.nearest_filter(-w, space)
    assert neg.index == base.index
    assert neg.scale == pytest.approx(-base.scale)
    assert neg.residual == pytest.approx(base.residual)


def test_projection_idempotent():
    space = hs.enumerate_space(3)
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = space[int(rng.integers(0, 256))]
        k = float(rng.normal()) or 1.0
        w = k * p.cells.astype(np.float64)
        got = hs.nearest_filter(w, space)
        assert got.residual == pytest.approx(0.0, abs=1e-18)
        assert got.index == p.canonical_index
        assert got.scale == pytest.approx(k)
        # reconstruction returns exactly the same kernel
        rebuilt = got.scale * space.signs[space.row_of(got.index)].reshape(3, 3)
        assert np.allclose(rebuilt, w, atol=1e-12)


def test_scale_is_least_squares_optimal():
    space = hs.enumerate_space(3)
    rng = np.random.default_rng(5)
    w = rng.normal(size=(3, 3))
    for p in (space[17], space[200]):
        lam = hs.project_scale(w, p)
        res = ((w.reshape(-1) - lam * p.cells.reshape(-1)) ** 2).sum()
        for eps in (1e-3, -1e-3, 0.1, -0.1):
            perturbed = ((w.reshape(-1) - (lam + eps) * p.cells.reshape(-1)) ** 2).sum()
            assert perturbed > res


def test_zero_kernel_projection():
    space = hs.enumerate_space(3)
    got = hs.nearest_filter(np.zeros((3, 3)), space)
    assert got.scale == 0.0 and got.residual == 0.0
    assert got.index == 0  # every pattern ties at residual 0; lowest index wins


def test_select_top_filters_ranks_by_count():
    counts = np.zeros(256, dtype=np.int64)
    counts[40] = 10
    counts[7] = 10
    counts[200] = 30
    counts[3] = 5
    reduced = hs.select_top_filters(counts, 3)
    assert list(reduced.selected) == [200, 7, 40]  # count desc, index asc on ties
    assert reduced.nr == 3
    assert reduced.row_of(7) == 1
    with pytest.raises(ConfigError):
        reduced.row_of(3)


def test_select_top_filters_all_tied():
    counts = np.ones(256, dtype=np.int64)
    reduced = hs.select_top_filters(counts, 32)
    assert list(reduced.selected) == list(range(32))


def test_select_top_filters_validation():
    with pytest.raises(ConfigError):
        hs.select_top_filters(np.ones(256), 0)
    with pytest.raises(ConfigError):
        hs.select_top_filters(np.ones(256), 257)
    with pytest.raises(ConfigError):
        hs.select_top_filters(np.ones(100), 4)  # not a power-of-two space size
    bad = np.ones(256)
    bad[3] = -1
    with pytest.raises(ConfigError):
        hs.select_top_filters(bad, 4)


def test_reduced_space_round_trip():
    counts = np.arange(256, dtype=np.int64)
    reduced = hs.select_top_filters(counts, 8)
    assert list(reduced.selected) == list(range(255, 247, -1))
    for row, idx in enumerate(reduced.selected):
        assert np.array_equal(reduced.signs[row].reshape(3, 3),
                              hs.cells_from_index(3, int(idx)).astype(float))
        assert reduced[row].canonical_index == idx


def test_project_batch_agrees_with_single():
    rng = np.random.default_rng(21)
    full = hs.enumerate_space(3)
    counts = np.zeros(256, dtype=np.int64)
    counts[[9, 1, 250, 30]] = (4, 3, 2, 1)
    reduced = hs.select_top_filters(counts, 4)
    flat = rng.normal(size=(40, 9))
    flat[5] = 0.0  # exercises the all-tie path
    for space in (full, reduced):
        rows, scales, residuals = hs.project_batch(flat, space, block=7)
        for i in range(flat.shape[0]):
            single = hs.nearest_filter(flat[i], space)
            assert int(space.indices[rows[i]]) == single.index, i
            assert scales[i] == single.scale
            assert residuals[i] == single.residual


def test_nearest_in_reduced_space():
    counts = np.zeros(256, dtype=np.int64)
    counts[[255, 0, 60]] = (5, 4, 3)
    reduced = hs.select_top_filters(counts, 3)
    w = np.full((3, 3), 2.5)
    got = hs.nearest_filter(w, reduced)
    assert got.index == 255 and got.scale == pytest.approx(2.5)
    assert got.residual == pytest.approx(0.0, abs=1e-18)
