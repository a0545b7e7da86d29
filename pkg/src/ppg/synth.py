"""Synthetic poster grammar and corpus writer.

Posters carry one product in a lower band and a stack of 1-4 text lines near
the top, each text sitting on an underlay that contains it with a margin.
Element slots are ordered product, then (text, underlay) pairs top to bottom.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .embedder import hash_embedder
from .layout import (
    K_GEO,
    Category,
    Element,
    Layout,
    box_from_pixels,
    mask_bbox,
    write_embeddings,
)

logger = logging.getLogger(__name__)

WORDS = (
    "NEW", "SALE", "FRESH", "ORGANIC", "PREMIUM", "LIMITED", "OFFER", "BEST", "SELLER", "HOT",
    "DEAL", "FREE", "SHIPPING", "SUMMER", "WINTER", "COLLECTION", "SOFT", "PURE", "SMART", "CLASSIC",
    "50%", "OFF", "TODAY", "ONLY", "GIFT", "SET", "LIGHT", "DAILY", "CARE", "STYLE",
)

RULES = ("single_product", "product_in_band", "underlay_contains_text", "text_product_overlap")


class GrammarError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticGrammar:
    canvas: tuple[int, int] = (513, 750)
    text_count: tuple[int, int] = (1, 4)
    band: tuple[float, float] = (0.60, 0.78)  # product center-y range
    product_cx: tuple[float, float] = (0.38, 0.62)
    product_width: tuple[float, float] = (0.34, 0.56)
    product_aspect: tuple[float, float] = (0.7, 1.5)  # pixel height / width of the cutout
    top_margin: tuple[float, float] = (0.05, 0.09)
    title_height: tuple[float, float] = (0.055, 0.07)
    line_height: tuple[float, float] = (0.035, 0.045)
    line_gap: float = 0.012
    underlay_pad: tuple[float, float] = (0.03, 0.015)  # x, y margin of underlays around texts
    product_gap: float = 0.03  # clearance between text stack and product
    max_overlap: float = 0.05
    tolerance: float = 1.0 / K_GEO

    def __post_init__(self):
        lo, hi = self.text_count
        if not (1 <= lo <= hi) or 1 + 2 * hi > 16:
            raise GrammarError(f"text count range {self.text_count} does not fit 16 slots")
        for name in ("band", "product_cx", "product_width", "product_aspect", "top_margin", "title_height", "line_height"):
            a, b = getattr(self, name)
            if a > b:
                raise GrammarError(f"empty range for {name}: {a} > {b}")
        if self.band[1] >= 1.0 or self.band[0] <= 0.0:
            raise GrammarError(f"product band {self.band} must lie inside the canvas")

    @property
    def aspect(self) -> float:
        return self.canvas[1] / self.canvas[0]

    def to_json(self) -> dict:
        return asdict(self)

    # --- sampling -------------------------------------------------------------

    def sample_texts(self, rng: np.random.Generator) -> list[str]:
        n = int(rng.integers(self.text_count[0], self.text_count[1] + 1))
        texts = []
        for i in range(n):
            k = int(rng.integers(1, 3 if i == 0 else 4))
            texts.append(" ".join(WORDS[j] for j in rng.choice(len(WORDS), size=k, replace=False)))
        return texts

    def sample_layout(self, rng: np.random.Generator, texts: list[str] | None = None,
                      product_aspect: float | None = None, attempts: int = 200) -> Layout:
        texts = self.sample_texts(rng) if texts is None else texts
        if product_aspect is None:
            product_aspect = float(rng.uniform(*self.product_aspect))
        for _ in range(attempts):
            layout = self._try_layout(rng, texts, product_aspect)
            if layout is not None and not check_layout(layout, self, tolerance=0.0):
                return layout
        raise GrammarError(f"could not satisfy grammar for {len(texts)} texts within {attempts} attempts")

    def _try_layout(self, rng, texts, product_aspect) -> Layout | None:
        px, py = self.underlay_pad
        align_left = bool(rng.random() < 0.5)
        y = float(rng.uniform(*self.top_margin))
        pairs = []
        for i, text in enumerate(texts):
            h = float(rng.uniform(*(self.title_height if i == 0 else self.line_height)))
            char_w = 0.62 * h * self.aspect
            w = float(np.clip(len(text) * char_w, 0.12, 0.8))
            cx = 0.08 + px + w / 2 if align_left else 0.5
            cy = y + py + h / 2
            pairs.append(
                (Element(Category.TEXT, cx, cy, w, h, text=text),
                 Element(Category.UNDERLAY, cx, cy, w + 2 * px, h + 2 * py))
            )
            y += h + 2 * py + self.line_gap
        stack_bottom = y - self.line_gap
        pw = float(rng.uniform(*self.product_width))
        ph = pw * product_aspect / self.aspect
        cy = float(rng.uniform(*self.band))
        top = stack_bottom + self.product_gap
        if cy - ph / 2 < top:
            # shrink the product until it clears the text stack
            ph = 2 * (cy - top)
            pw = ph * self.aspect / product_aspect
        if ph <= 0.05 or pw <= 0.05 or cy + ph / 2 > 0.99:
            return None
        cx = float(rng.uniform(*self.product_cx))
        if cx - pw / 2 < 0.01 or cx + pw / 2 > 0.99:
            return None
        product = Element(Category.PRODUCT, cx, cy, pw, ph)
        elements = [product] + [el for pair in pairs for el in pair]
        return Layout(tuple(elements), self.aspect)


def _contains(outer: Element, inner: Element, tol: float) -> bool:
    ox0, oy0, ox1, oy1 = outer.ltrb
    ix0, iy0, ix1, iy1 = inner.ltrb
    return ix0 >= ox0 - tol and iy0 >= oy0 - tol and ix1 <= ox1 + tol and iy1 <= oy1 + tol


def _intersection(a: Element, b: Element) -> float:
    ax0, ay0, ax1, ay1 = a.ltrb
    bx0, by0, bx1, by1 = b.ltrb
    return max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))


def check_layout(layout: Layout, grammar: SyntheticGrammar, tolerance: float | None = None) -> list[str]:
    """Names of the grammar rules the layout violates (empty when valid)."""
    tol = grammar.tolerance if tolerance is None else tolerance
    broken = []
    products = layout.of(Category.PRODUCT)
    if len(products) != 1:
        broken.append("single_product")
    if products and not any(grammar.band[0] - tol <= p.center_y <= grammar.band[1] + tol for p in products):
        broken.append("product_in_band")
    underlays = layout.of(Category.UNDERLAY)
    texts = layout.of(Category.TEXT)
    if any(not any(_contains(u, t, tol) for u in underlays) for t in texts):
        broken.append("underlay_contains_text")
    for t in texts:
        if t.area <= 0 or any(_intersection(t, p) > grammar.max_overlap * t.area for p in products):
            broken.append("text_product_overlap")
            break
    return broken


# --- product cutouts and corpus -------------------------------------------------


def draw_product(rng: np.random.Generator, size: tuple[int, int]) -> np.ndarray:
    """Procedural RGBA product cutout whose alpha touches all four edges."""
    w, h = size
    base = rng.integers(30, 226, size=3)
    accent = np.clip(base + rng.integers(-60, 61, size=3), 0, 255)
    img = Image.new("RGBA", (w, h), (0, 0, 0, 0))
    draw = ImageDraw.Draw(img)
    shape = int(rng.integers(0, 3))
    fill = tuple(int(v) for v in base) + (255,)
    if shape == 0:
        draw.ellipse([0, 0, w - 1, h - 1], fill=fill)
    elif shape == 1:
        draw.rounded_rectangle([0, 0, w - 1, h - 1], radius=max(1, min(w, h) // 6), fill=fill)
    else:
        neck = max(1, w // 3)
        draw.rectangle([(w - neck) // 2, 0, (w + neck) // 2, h // 4], fill=fill)
        draw.rounded_rectangle([0, h // 5, w - 1, h - 1], radius=max(1, w // 5), fill=fill)
        draw.rectangle([0, h - 1, w - 1, h - 1], fill=fill)
        draw.rectangle([(w - neck) // 2, 0, (w + neck) // 2, 0], fill=fill)
    arr = np.asarray(img).copy()
    alpha = arr[..., 3] > 0
    # left-to-right shading plus an accent stripe
    shade = np.linspace(1.1, 0.75, w)[None, :, None]
    arr[..., :3] = np.clip(arr[..., :3] * shade, 0, 255).astype(np.uint8)
    y0, y1 = int(h * 0.45), int(h * 0.6)
    stripe = np.zeros_like(alpha)
    stripe[y0:y1] = True
    arr[stripe & alpha, :3] = accent
    arr[~alpha] = 0
    # guarantee the outermost rows and columns are covered so the bbox is the full cutout
    for sl in ((0, slice(None)), (-1, slice(None)), (slice(None), 0), (slice(None), -1)):
        line = arr[sl]
        if not (line[..., 3] > 0).any():
            mid = line.shape[0] // 2
            line[mid] = fill
    return arr


def render_record(grammar: SyntheticGrammar, rng: np.random.Generator) -> tuple[Layout, np.ndarray, np.ndarray]:
    """Sample a layout and the full-canvas product RGB image and mask consistent with it."""
    W, H = grammar.canvas
    texts = grammar.sample_texts(rng)
    aspect = float(rng.uniform(*grammar.product_aspect))
    layout = grammar.sample_layout(rng, texts, aspect)
    prod = layout.product
    x0 = int(round((prod.center_x - prod.width / 2) * W))
    y0 = int(round((prod.center_y - prod.height / 2) * H))
    pw = max(2, int(round(prod.width * W)))
    ph = max(2, int(round(prod.height * H)))
    cut = draw_product(rng, (pw, ph))
    rgb = np.full((H, W, 3), 128, dtype=np.uint8)
    mask = np.zeros((H, W), dtype=np.uint8)
    a = cut[..., 3] > 0
    rgb[y0 : y0 + ph, x0 : x0 + pw][a] = cut[..., :3][a]
    mask[y0 : y0 + ph, x0 : x0 + pw][a] = 255
    px = mask_bbox(mask)
    box = box_from_pixels(px, (W, H))
    elements = [Element(Category.PRODUCT, *box) if e.category == Category.PRODUCT else e for e in layout.elements]
    layout = Layout(tuple(elements), layout.canvas_aspect)
    broken = check_layout(layout, grammar)
    if broken:
        raise GrammarError(f"emitted layout violates {broken}")
    return layout, rgb, mask


def synth_corpus(grammar: SyntheticGrammar, n: int, seed: int, out_dir: str | os.PathLike) -> Path:
    """Write ``n`` records (annotation JSON, product PNG, mask PNG, embeddings) to ``out_dir``."""
    if n < 1:
        raise ValueError("corpus size must be at least 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(4, int(math.ceil(math.log10(n + 1))))
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        rid = f"syn{i:0{width}d}"
        layout, rgb, mask = render_record(grammar, rng)
        Image.fromarray(rgb).save(out / f"{rid}_product.png", compress_level=1)
        Image.fromarray(mask).convert("1").save(out / f"{rid}_mask.png", compress_level=1)
        px = mask_bbox(mask)
        cutout = np.dstack([rgb, mask])[px[1] : px[3], px[0] : px[2]]
        texts = [e.text or "" for e in layout.texts]
        write_embeddings(out / f"{rid}.pre", hash_embedder(texts, cutout))
        ann = {
            "id": rid,
            "canvas": list(grammar.canvas),
            "elements": [e.to_json() for e in layout.elements],
            "product_mask": f"{rid}_mask.png",
            "product_image": f"{rid}_product.png",
            "embeddings": f"{rid}.pre",
        }
        (out / f"{rid}.json").write_text(json.dumps(ann, indent=1, sort_keys=True))
    logger.info("wrote %d synthetic records to %s", n, out)
    return out
