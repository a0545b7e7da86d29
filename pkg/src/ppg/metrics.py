"""Layout evaluation: maximum IoU, a geometric Frechet layout distance and overlap.

``fd_geo`` compares Gaussians fitted to a hand-built 23-dim geometric feature
vector. It is a quality proxy and is not numerically comparable to Frechet
distances computed on learned features.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .layout import Category, Element, Layout

CATEGORIES = (Category.TEXT, Category.UNDERLAY, Category.PRODUCT)
FEATURE_DIM = 23
SHRINKAGE = 0.1


def _ltrb(elements: Sequence[Element]) -> np.ndarray:
    if not elements:
        return np.zeros((0, 4))
    return np.array([e.ltrb for e in elements], dtype=np.float64)


def category_iou(generated: Sequence[Element], reference: Sequence[Element]) -> tuple[float, int]:
    """Summed IoU of the optimal matching and the normalizer ``max(n_gen, n_ref)``."""
    n = max(len(generated), len(reference))
    if not generated or not reference:
        return 0.0, n
    iou = kernels.pairwise_iou(_ltrb(generated), _ltrb(reference))
    rows, cols = kernels.assign_max(iou)
    return float(sum(iou[r, c] for r, c in zip(rows, cols))), n


def max_iou(generated: Layout, reference: Layout, per_box: bool = False) -> float:
    """Mean IoU under the optimal same-category matching.

    By default the per-category means are averaged over the categories present
    in ``reference``; ``per_box=True`` pools all boxes instead.
    """
    scores, total, count = [], 0.0, 0
    for cat in CATEGORIES:
        ref = reference.of(cat)
        if not ref:
            continue
        s, n = category_iou(generated.of(cat), ref)
        scores.append(s / n)
        total += s
        count += n
    if not scores:
        return 1.0 if not generated.real_elements() else 0.0
    if per_box:
        return total / count
    return float(sum(scores) / len(scores))


def layout_feature(layout: Layout) -> np.ndarray:
    """Counts (3), center mean/std (12), area coverage (3), pairwise overlap (1), margins (4)."""
    f = np.zeros(FEATURE_DIM)
    elements = layout.real_elements()
    for i, cat in enumerate(CATEGORIES):
        els = layout.of(cat)
        f[i] = len(els)
        if els:
            cx = np.array([e.center_x for e in els])
            cy = np.array([e.center_y for e in els])
            f[3 + 4 * i : 7 + 4 * i] = (cx.mean(), cy.mean(), cx.std(), cy.std())
            f[15 + i] = sum(e.area for e in els)
    boxes = _ltrb(elements)
    if len(boxes) > 1:
        iw = np.minimum(boxes[:, None, 2], boxes[None, :, 2]) - np.maximum(boxes[:, None, 0], boxes[None, :, 0])
        ih = np.minimum(boxes[:, None, 3], boxes[None, :, 3]) - np.maximum(boxes[:, None, 1], boxes[None, :, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        f[18] = np.triu(inter, k=1).sum()
    if len(boxes):
        f[19] = boxes[:, 0].min()
        f[20] = boxes[:, 1].min()
        f[21] = 1.0 - boxes[:, 2].max()
        f[22] = 1.0 - boxes[:, 3].max()
        f[19:23] = np.clip(f[19:23], 0.0, 1.0)
    else:
        f[19:23] = 1.0
    return f


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError(f"need at least 2 layouts per set, got {x.shape[0]}")
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    if x.shape[0] <= x.shape[1]:
        # rank-deficient estimate: shrink toward a scaled identity
        target = np.eye(x.shape[1]) * np.trace(cov) / x.shape[1]
        cov = (1 - SHRINKAGE) * cov + SHRINKAGE * target
    return mu, cov


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    s = _sqrt_psd(cov_a)
    cross = np.linalg.eigvalsh(s @ cov_b @ s)
    tr_sqrt = np.sqrt(np.clip(cross, 0.0, None)).sum()
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
    return max(d, 0.0)


def fd_features(fa: np.ndarray, fb: np.ndarray) -> float:
    return frechet_distance(*gaussian_stats(fa), *gaussian_stats(fb))


def fd_geo(set_a: Sequence[Layout], set_b: Sequence[Layout]) -> float:
    fa = np.array([layout_feature(l) for l in set_a]).reshape(len(set_a), FEATURE_DIM)
    fb = np.array([layout_feature(l) for l in set_b]).reshape(len(set_b), FEATURE_DIM)
    return fd_features(fa, fb)


def overlap_rate(layout: Layout) -> float:
    """Fraction of text area covered by other texts or the product."""
    texts = layout.of(Category.TEXT)
    products = layout.of(Category.PRODUCT)
    total = sum(t.area for t in texts)
    if total <= 0:
        return 0.0
    covered = 0.0
    for i, t in enumerate(texts):
        x0, y0, x1, y1 = t.ltrb
        clipped = []
        for o in [u for j, u in enumerate(texts) if j != i] + products:
            ox0, oy0, ox1, oy1 = o.ltrb
            cx0, cy0, cx1, cy1 = max(x0, ox0), max(y0, oy0), min(x1, ox1), min(y1, oy1)
            if cx1 > cx0 and cy1 > cy0:
                clipped.append((cx0, cy0, cx1, cy1))
        if clipped:
            covered += kernels.union_area(np.array(clipped, dtype=np.float64))
    return float(min(max(covered / total, 0.0), 1.0))


@dataclass(frozen=True)
class EvalReport:
    max_iou: float
    fd_geo: float
    overlap_rate: float
    n: int
    rows: tuple[tuple[str, float, float], ...] = ()

    def to_json(self) -> dict:
        fd = None if np.isnan(self.fd_geo) else self.fd_geo  # undefined below two layouts
        return {"max_iou": self.max_iou, "fd_geo": fd, "overlap_rate": self.overlap_rate, "n": self.n}

    def write(self, json_path: str | os.PathLike, csv_path: str | os.PathLike) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "max_iou", "overlap_rate"])
            for rid, miou, ovl in self.rows:
                w.writerow([rid, repr(miou), repr(ovl)])


def evaluate(pairs: Sequence[tuple[str, Layout, Layout]], per_box: bool = False) -> EvalReport:
    """Score ``(id, generated, reference)`` triples; reduction follows input order."""
    if not pairs:
        raise ValueError("nothing to evaluate")
    rows = tuple((rid, max_iou(g, r, per_box), overlap_rate(g)) for rid, g, r in pairs)
    gen = [g for _, g, _ in pairs]
    ref = [r for _, _, r in pairs]
    fd = fd_geo(gen, ref) if len(pairs) >= 2 else float("nan")
    return EvalReport(
        max_iou=float(np.mean([r[1] for r in rows])),
        fd_geo=fd,
        overlap_rate=float(np.mean([r[2] for r in rows])),
        n=len(rows),
        rows=rows,
    )
