"""Pure-Python implementations of the hot kernels.

Same signatures and results as the compiled ``_kernels`` extension; used when
the extension is not built or ``PPG_PURE_PYTHON=1`` is set.
"""

import math

import numpy as np


def assign_max(weights):
    """Maximum-weight assignment on a rectangular matrix.

    Shortest augmenting path (Jonker-Volgenant style potentials) over the
    negated weights, padded to square. Ties resolve toward the lowest column
    index. Returns ``(rows, cols)`` index arrays of length ``min(n, m)``,
    sorted by row.
    """
    w = np.asarray(weights, dtype=np.float64)
    n_rows, n_cols = w.shape
    if n_rows == 0 or n_cols == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    transposed = n_rows > n_cols
    if transposed:
        w = w.T
        n_rows, n_cols = n_cols, n_rows
    cost = (-w).tolist()
    n, m = n_rows, n_cols
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: row (1-based) matched to column j
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = cost[i0 - 1]
            ui0 = u[i0]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
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
    rows, cols = [], []
    for j in range(1, m + 1):
        if p[j]:
            rows.append(p[j] - 1)
            cols.append(j - 1)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if transposed:
        rows, cols = cols, rows
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order]


def pairwise_iou(a, b):
    """IoU matrix between ``(n, 4)`` and ``(m, 4)`` boxes in ``(x0, y0, x1, y1)`` form."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        ax0, ay0, ax1, ay1 = a[i]
        area_a = max(ax1 - ax0, 0.0) * max(ay1 - ay0, 0.0)
        for j in range(len(b)):
            bx0, by0, bx1, by1 = b[j]
            area_b = max(bx1 - bx0, 0.0) * max(by1 - by0, 0.0)
            iw = min(ax1, bx1) - max(ax0, bx0)
            ih = min(ay1, by1) - max(ay0, by0)
            inter = iw * ih if iw > 0 and ih > 0 else 0.0
            union = area_a + area_b - inter
            out[i, j] = inter / union if union > 0 else 0.0
    return out


def sample_categorical(probs, uniforms):
    """Inverse-CDF draw per row: first index whose running sum exceeds ``u``.

    Rows need not be normalized; ``u`` is scaled by the row total. Zero-mass
    entries are never selected.
    """
    probs = np.asarray(probs, dtype=np.float64)
    uniforms = np.asarray(uniforms, dtype=np.float64)
    n, k = probs.shape
    out = np.empty(n, dtype=np.int64)
    for r in range(n):
        row = probs[r]
        target = uniforms[r] * row.sum()
        acc = 0.0
        last = -1
        pick = -1
        for j in range(k):
            pj = row[j]
            if pj > 0:
                last = j
                acc += pj
                if acc > target:
                    pick = j
                    break
        out[r] = pick if pick >= 0 else last
    return out


def union_area(boxes):
    """Exact area of the union of ``(n, 4)`` boxes by coordinate compression."""
    boxes = np.asarray(boxes, dtype=np.float64)
    boxes = boxes[(boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])] if len(boxes) else boxes
    if not len(boxes):
        return 0.0
    xs = sorted(set(boxes[:, 0]) | set(boxes[:, 2]))
    ys = sorted(set(boxes[:, 1]) | set(boxes[:, 3]))
    total = 0.0
    for a in range(len(xs) - 1):
        cx = 0.5 * (xs[a] + xs[a + 1])
        for b in range(len(ys) - 1):
            cy = 0.5 * (ys[b] + ys[b + 1])
            for x0, y0, x1, y1 in boxes:
                if x0 <= cx <= x1 and y0 <= cy <= y1:
                    total += (xs[a + 1] - xs[a]) * (ys[b + 1] - ys[b])
                    break
    return total


def fill_boxes(raster, boxes, value=1):
    """Set integer pixel rectangles ``(x0, y0, x1, y1)`` (exclusive ends) in place."""
    h, w = raster.shape
    for x0, y0, x1, y1 in np.asarray(boxes, dtype=np.int64).reshape(-1, 4):
        x0, x1 = max(int(x0), 0), min(int(x1), w)
        y0, y1 = max(int(y0), 0), min(int(y1), h)
        if x1 > x0 and y1 > y0:
            raster[y0:y1, x0:x1] = value
    return raster
