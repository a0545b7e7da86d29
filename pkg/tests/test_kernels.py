import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment

from ppg import _kernels_py, kernels

try:
    from ppg import _kernels
except ImportError:
    _kernels = None

BACKENDS = [_kernels_py] + ([_kernels] if _kernels is not None else [])


def random_boxes(rng, n):
    xy = rng.uniform(0, 0.8, (n, 2))
    return np.hstack([xy, xy + rng.uniform(0.0, 0.3, (n, 2))])


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("mod", BACKENDS)
def test_assignment_matches_scipy(mod):
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, m = rng.integers(1, 9, size=2)
        w = rng.random((n, m))
        rows, cols = mod.assign_max(w)
        r2, c2 = linear_sum_assignment(w, maximize=True)
        assert len(rows) == min(n, m)
        assert len(set(cols)) == len(cols)
        assert w[rows, cols].sum() == pytest.approx(w[r2, c2].sum(), abs=1e-12)
        assert list(rows) == sorted(rows)


@pytest.mark.parametrize("mod", BACKENDS)
def test_assignment_ties_resolve_to_lowest_index(mod):
    rows, cols = mod.assign_max(np.ones((3, 3)))
    assert list(rows) == [0, 1, 2] and list(cols) == [0, 1, 2]
    rows, cols = mod.assign_max(np.zeros((2, 4)))
    assert list(cols) == [0, 1]


@pytest.mark.parametrize("mod", BACKENDS)
def test_assignment_empty(mod):
    rows, cols = mod.assign_max(np.zeros((0, 3)))
    assert len(rows) == 0 and len(cols) == 0


@pytest.mark.parametrize("mod", BACKENDS)
def test_pairwise_iou_against_direct_formula(mod):
    rng = np.random.default_rng(1)
    a, b = random_boxes(rng, 7), random_boxes(rng, 5)
    got = mod.pairwise_iou(a, b)
    for i, j in itertools.product(range(7), range(5)):
        iw = max(0.0, min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0]))
        ih = max(0.0, min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1]))
        inter = iw * ih
        union = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1]) + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
        assert got[i, j] == pytest.approx(inter / union if union > 0 else 0.0, abs=1e-15)


@pytest.mark.parametrize("mod", BACKENDS)
def test_zero_area_iou_is_zero(mod):
    z = np.array([[0.5, 0.5, 0.5, 0.5]])
    assert mod.pairwise_iou(z, z)[0, 0] == 0.0


@pytest.mark.parametrize("mod", BACKENDS)
def test_union_area_against_raster(mod):
    rng = np.random.default_rng(2)
    for _ in range(5):
        boxes = np.floor(random_boxes(rng, 6) * 200) / 200  # grid-aligned so the raster count is exact
        grid = np.zeros((200, 200), bool)
        for x0, y0, x1, y1 in np.rint(boxes * 200).astype(int):
            grid[y0:y1, x0:x1] = True
        assert mod.union_area(boxes) == pytest.approx(grid.sum() / 200**2, abs=1e-12)


@pytest.mark.parametrize("mod", BACKENDS)
def test_sample_categorical_inverse_cdf(mod):
    probs = np.array([[0.2, 0.0, 0.8], [0.0, 0.0, 2.0], [1.0, 1.0, 0.0]])
    u = np.array([0.19, 0.5, 0.5])
    assert list(mod.sample_categorical(probs, u)) == [0, 2, 1]
    # zero-mass categories are never chosen, even at u -> 1
    assert list(mod.sample_categorical(np.array([[0.5, 0.5, 0.0]]), np.array([0.9999999999]))) == [1]


@pytest.mark.parametrize("mod", BACKENDS)
def test_fill_boxes(mod):
    r = np.zeros((10, 12), np.uint8)
    mod.fill_boxes(r, np.array([[1, 2, 4, 5], [3, 3, 6, 6]], np.int64), 1)
    want = np.zeros((10, 12), np.uint8)
    want[2:5, 1:4] = 1
    want[3:6, 3:6] = 1
    assert np.array_equal(r, want)


@pytest.mark.skipif(_kernels is None, reason="compiled extension not built")
@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31))
def test_backends_agree(n, m, seed):
    rng = np.random.default_rng(seed)
    w = rng.random((n, m))
    assert all(np.array_equal(x, y) for x, y in zip(_kernels.assign_max(w), _kernels_py.assign_max(w)))
    a, b = random_boxes(rng, n), random_boxes(rng, m)
    assert np.allclose(_kernels.pairwise_iou(a, b), _kernels_py.pairwise_iou(a, b), atol=1e-15, rtol=0)
    assert _kernels.union_area(a) == pytest.approx(_kernels_py.union_area(a), abs=1e-14)
    p = rng.random((n, m))
    u = rng.random(n)
    assert np.array_equal(_kernels.sample_categorical(p, u), _kernels_py.sample_categorical(p, u))
