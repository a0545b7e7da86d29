# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Mirrors ppg._kernels_py exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY
from libc.stdlib cimport malloc, free, qsort

cnp.import_array()


def assign_max(weights):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n_rows = w.shape[0], n_cols = w.shape[1]
    if n_rows == 0 or n_cols == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    cdef bint transposed = n_rows > n_cols
    if transposed:
        w = np.ascontiguousarray(w.T)
        n_rows, n_cols = n_cols, n_rows
    cdef double[:, ::1] cost = -w
    cdef Py_ssize_t n = n_rows, m = n_cols
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef Py_ssize_t[::1] p = np.zeros(m + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(m + 1, dtype=np.intp)
    cdef double[::1] minv = np.empty(m + 1)
    cdef char[::1] used = np.zeros(m + 1, dtype=np.int8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            ui0 = u[i0]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    rows = []
    cols = []
    for j in range(1, m + 1):
        if p[j]:
            rows.append(p[j] - 1)
            cols.append(j - 1)
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    if transposed:
        r, c = c, r
    order = np.argsort(r, kind="stable")
    return r[order], c[order]


def pairwise_iou(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], i, j
    out = np.zeros((n, m))
    cdef double[:, ::1] o = out
    cdef double area_a, area_b, iw, ih, inter, union
    for i in range(n):
        area_a = max(av[i, 2] - av[i, 0], 0.0) * max(av[i, 3] - av[i, 1], 0.0)
        for j in range(m):
            area_b = max(bv[j, 2] - bv[j, 0], 0.0) * max(bv[j, 3] - bv[j, 1], 0.0)
            iw = min(av[i, 2], bv[j, 2]) - max(av[i, 0], bv[j, 0])
            ih = min(av[i, 3], bv[j, 3]) - max(av[i, 1], bv[j, 1])
            inter = iw * ih if (iw > 0 and ih > 0) else 0.0
            union = area_a + area_b - inter
            o[i, j] = inter / union if union > 0 else 0.0
    return out


def sample_categorical(probs, uniforms):
    cdef double[:, ::1] pv = np.ascontiguousarray(probs, dtype=np.float64)
    cdef double[::1] uv = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t n = pv.shape[0], k = pv.shape[1], r, j, last, pick
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    cdef double total, target, acc, pj
    for r in range(n):
        total = 0.0
        for j in range(k):
            total += pv[r, j]
        target = uv[r] * total
        acc = 0.0
        last = -1
        pick = -1
        for j in range(k):
            pj = pv[r, j]
            if pj > 0:
                last = j
                acc += pj
                if acc > target:
                    pick = j
                    break
        o[r] = pick if pick >= 0 else last
    return out


cdef int _cmp_double(const void* a, const void* b) noexcept nogil:
    cdef double x = (<double*>a)[0], y = (<double*>b)[0]
    return (x > y) - (x < y)


cdef Py_ssize_t _unique_sorted(double* arr, Py_ssize_t n) noexcept nogil:
    qsort(arr, n, sizeof(double), _cmp_double)
    cdef Py_ssize_t k = 0, i
    for i in range(n):
        if k == 0 or arr[i] != arr[k - 1]:
            arr[k] = arr[i]
            k += 1
    return k


def union_area(boxes):
    arr = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(arr):
        arr = np.ascontiguousarray(arr[(arr[:, 2] > arr[:, 0]) & (arr[:, 3] > arr[:, 1])])
    cdef double[:, ::1] bv = arr
    cdef Py_ssize_t n = bv.shape[0], i, a, b, nx, ny
    if n == 0:
        return 0.0
    cdef double* xs = <double*>malloc(2 * n * sizeof(double))
    cdef double* ys = <double*>malloc(2 * n * sizeof(double))
    cdef double total = 0.0, cx, cy
    try:
        for i in range(n):
            xs[2 * i] = bv[i, 0]
            xs[2 * i + 1] = bv[i, 2]
            ys[2 * i] = bv[i, 1]
            ys[2 * i + 1] = bv[i, 3]
        nx = _unique_sorted(xs, 2 * n)
        ny = _unique_sorted(ys, 2 * n)
        for a in range(nx - 1):
            cx = 0.5 * (xs[a] + xs[a + 1])
            for b in range(ny - 1):
                cy = 0.5 * (ys[b] + ys[b + 1])
                for i in range(n):
                    if bv[i, 0] <= cx <= bv[i, 2] and bv[i, 1] <= cy <= bv[i, 3]:
                        total += (xs[a + 1] - xs[a]) * (ys[b + 1] - ys[b])
                        break
    finally:
        free(xs)
        free(ys)
    return total


def fill_boxes(raster, boxes, value=1):
    cdef cnp.uint8_t[:, ::1] r = raster
    cdef cnp.int64_t[:, ::1] bv = np.ascontiguousarray(boxes, dtype=np.int64).reshape(-1, 4)
    cdef Py_ssize_t h = r.shape[0], w = r.shape[1], i, x, y, x0, y0, x1, y1
    cdef cnp.uint8_t val = value
    for i in range(bv.shape[0]):
        x0 = max(bv[i, 0], 0)
        x1 = min(bv[i, 2], w)
        y0 = max(bv[i, 1], 0)
        y1 = min(bv[i, 3], h)
        for y in range(y0, y1):
            for x in range(x0, x1):
                r[y, x] = val
    return raster
