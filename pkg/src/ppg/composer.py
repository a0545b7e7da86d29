"""Poster assembly: procedural background, underlays, product paste and text.

Text is fitted by binary search on the font size inside the element box minus
a 2 px inset, wrapping at word boundaries when a single line would need a size
below 12 px. Characters missing from the chosen font are drawn as outlined
boxes and counted in the sidecar report.
"""

from __future__ import annotations

import functools
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from fontTools.ttLib import TTFont
from PIL import Image, ImageDraw, ImageFont

from .layout import Category, Element, Layout, PosterRecord, mask_bbox
from .render import box_to_pixels, place_cutout

INSET = 2
MIN_SINGLE_LINE = 12
MIN_SIZE = 4
MIN_CONTRAST = 4.5
UNDERLAY_ALPHA = 210
MISSING_ADVANCE = 0.6
MISSING_HEIGHT = 0.7


@dataclass(frozen=True)
class FontSpec:
    family: str
    weight: str
    size: int
    line_height: float = 1.2


FONT_LIBRARY = (
    ("DejaVu Sans", "book", "DejaVuSans.ttf"),
    ("DejaVu Serif", "bold", "DejaVuSerif-Bold.ttf"),
    ("DejaVu Sans Mono", "book", "DejaVuSansMono.ttf"),
)


def font_path(index: int) -> Path:
    return Path(str(resources.files("ppg") / "fonts" / FONT_LIBRARY[index][2]))


@functools.lru_cache(maxsize=512)
def _font(index: int, size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.truetype(str(font_path(index)), size)


@functools.lru_cache(maxsize=None)
def _cmap(index: int) -> frozenset[int]:
    with TTFont(str(font_path(index)), lazy=True) as tt:
        return frozenset(tt.getBestCmap())


# --- color ------------------------------------------------------------------------


@dataclass(frozen=True)
class Palette:
    colors: tuple[tuple[tuple[int, int, int], float], ...]

    def __post_init__(self):
        if not self.colors:
            raise ValueError("palette needs at least one color")

    @property
    def dominant(self) -> tuple[int, int, int]:
        return self.colors[0][0]

    @property
    def accent(self) -> tuple[int, int, int]:
        return self.colors[1][0] if len(self.colors) > 1 else self.colors[0][0]


def extract_palette(rgba: np.ndarray, top: int = 4) -> Palette:
    """Top buckets of an 8-level-per-channel histogram over opaque pixels."""
    px = np.asarray(rgba).reshape(-1, rgba.shape[-1])
    if px.shape[1] == 4:
        px = px[px[:, 3] > 0]
    rgb = px[:, :3].astype(np.int64)
    if len(rgb) == 0:
        return Palette((((128, 128, 128), 1.0),))
    buckets = (rgb[:, 0] >> 5) * 64 + (rgb[:, 1] >> 5) * 8 + (rgb[:, 2] >> 5)
    counts = np.bincount(buckets, minlength=512)
    order = np.lexsort((np.arange(512), -counts))[:top]
    order = order[counts[order] > 0]
    chosen = counts[order].astype(np.float64)
    weights = chosen / chosen.sum()
    colors = []
    for b, w in zip(order, weights):
        mean = rgb[buckets == b].mean(axis=0)
        colors.append((tuple(int(round(v)) for v in mean), float(w)))
    return Palette(tuple(colors))


def _linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64) / 255.0
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def relative_luminance(rgb) -> float:
    r, g, b = _linear(np.asarray(rgb, dtype=np.float64)[..., :3])
    return float(0.2126 * r + 0.7152 * g + 0.0722 * b)


def contrast_ratio(a, b) -> float:
    la, lb = relative_luminance(a), relative_luminance(b)
    hi, lo = max(la, lb), min(la, lb)
    return (hi + 0.05) / (lo + 0.05)


def pick_text_color(region: np.ndarray) -> tuple[int, int, int]:
    """Black or white, whichever contrasts more with the region mean.

    The better of the two always reaches at least 4.58:1, so no further
    adjustment is needed to clear the 4.5:1 floor.
    """
    region = np.asarray(region)
    if region.size == 0 or region.shape[0] == 0 or region.shape[1] == 0:
        raise ValueError("empty text region")
    mean = region.reshape(-1, region.shape[-1])[:, :3].astype(np.float64).mean(axis=0)
    white, black = (255, 255, 255), (0, 0, 0)
    return black if contrast_ratio(white, mean) < contrast_ratio(black, mean) else white


def procedural_background(palette: Palette, size: tuple[int, int], seed: int) -> np.ndarray:
    """Vertical gradient from a lightened, desaturated dominant color to near-white."""
    w, h = size
    rng = np.random.default_rng([seed, 0xB6])
    dom = np.asarray(palette.dominant, dtype=np.float64)
    gray = dom.mean()
    desat = 0.6 * dom + 0.4 * gray
    lighten = rng.uniform(0.70, 0.80)
    top = desat + (255.0 - desat) * lighten
    bottom = np.full(3, rng.uniform(242.0, 250.0))
    ramp = np.linspace(0.0, 1.0, h)[:, None]
    rows = top[None, :] * (1 - ramp) + bottom[None, :] * ramp
    img = np.broadcast_to(rows[:, None, :], (h, w, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# --- text layout ------------------------------------------------------------------


def _runs(text: str, index: int) -> list[tuple[str, bool]]:
    cmap = _cmap(index)
    runs: list[tuple[str, bool]] = []
    for ch in text:
        missing = not ch.isspace() and ord(ch) not in cmap
        if runs and runs[-1][1] == missing:
            runs[-1] = (runs[-1][0] + ch, missing)
        else:
            runs.append((ch, missing))
    return runs


def _measure_line(line: str, index: int, size: int) -> tuple[float, float, float, float, float]:
    """Advance and ink extents ``(adv, left, top, right, bottom)`` relative to the baseline origin."""
    font = _font(index, size)
    x = 0.0
    left = top = np.inf
    right = bottom = -np.inf
    for run, missing in _runs(line, index):
        if missing:
            adv = MISSING_ADVANCE * size * len(run)
            l, t, r, b = x, -MISSING_HEIGHT * size, x + adv - 1, 0.0
        else:
            adv = font.getlength(run)
            bl, bt, br, bb = font.getbbox(run, anchor="ls")
            l, t, r, b = x + bl, bt, x + br, bb
            if br <= bl:  # whitespace only
                x += adv
                continue
        left, top, right, bottom = min(left, l), min(top, t), max(right, r), max(bottom, b)
        x += adv
    if left == np.inf:
        return x, 0.0, 0.0, 0.0, 0.0
    return x, left, top, right, bottom


def _wrap(text: str, index: int, size: int, max_width: float) -> list[str] | None:
    lines: list[str] = []
    for word in text.split():
        trial = f"{lines[-1]} {word}" if lines else word
        if lines and _ink_width(trial, index, size) <= max_width:
            lines[-1] = trial
        elif _ink_width(word, index, size) <= max_width:
            lines.append(word)
        else:
            return None
    return lines or [""]


def _ink_width(line: str, index: int, size: int) -> float:
    _, l, _, r, _ = _measure_line(line, index, size)
    return r - l


def _block_extent(lines: list[str], index: int, spec_lh: float, size: int):
    lh = round(size * spec_lh)
    ms = [_measure_line(ln, index, size) for ln in lines]
    width = max(m[3] - m[1] for m in ms)
    top = ms[0][2]
    bottom = (len(lines) - 1) * lh + ms[-1][4]
    bottom = max(bottom, max(i * lh + m[4] for i, m in enumerate(ms)))
    top = min(top, min(i * lh + m[2] for i, m in enumerate(ms)))
    return width, top, bottom, ms, lh


def _fits(lines, index, lh_mult, size, w, h) -> bool:
    width, top, bottom, _, _ = _block_extent(lines, index, lh_mult, size)
    return width <= w and (bottom - top) <= h


def fit_text(text: str, index: int, inner_w: int, inner_h: int, lh_mult: float = 1.2):
    """Largest size (and line split) whose ink fits ``inner_w x inner_h``; ``None`` if nothing fits."""

    def search(make_lines, lo, hi):
        best = None
        while lo <= hi:
            mid = (lo + hi) // 2
            lines = make_lines(mid)
            if lines is not None and _fits(lines, index, lh_mult, mid, inner_w, inner_h):
                best = (mid, lines)
                lo = mid + 1
            else:
                hi = mid - 1
        return best

    if inner_w <= 0 or inner_h <= 0:
        return None
    hi = max(MIN_SIZE, int(inner_h * 1.5))
    single = search(lambda s: [text], MIN_SIZE, hi)
    if single is not None and single[0] >= MIN_SINGLE_LINE:
        return single
    wrapped = search(lambda s: _wrap(text, index, s, inner_w), MIN_SIZE, hi)
    cands = [c for c in (single, wrapped) if c is not None]
    return max(cands, key=lambda c: (c[0], -len(c[1]))) if cands else None


def _draw_block(layer: Image.Image, lines, index, size, lh_mult, rect, color) -> int:
    """Draw ``lines`` centered in ``rect``; returns the number of missing-glyph boxes."""
    x0, y0, x1, y1 = rect
    width, top, bottom, ms, lh = _block_extent(lines, index, lh_mult, size)
    draw = ImageDraw.Draw(layer)
    font = _font(index, size)
    base_y = y0 + ((y1 - y0) - (bottom - top)) / 2 - top
    fill = tuple(color) + (255,)
    missing = 0
    for i, (line, m) in enumerate(zip(lines, ms)):
        ink_w = m[3] - m[1]
        x = x0 + ((x1 - x0) - ink_w) / 2 - m[1]
        y = base_y + i * lh
        x, y = int(np.floor(x)), int(np.floor(y))
        for run, is_missing in _runs(line, index):
            if is_missing:
                adv = MISSING_ADVANCE * size
                for _ in run:
                    draw.rectangle([x, y - MISSING_HEIGHT * size, x + adv - 2, y - 1], outline=fill, width=1)
                    x += adv
                    missing += 1
            else:
                draw.text((x, y), run, font=font, fill=fill, anchor="ls")
                x += font.getlength(run)
    return missing


# --- poster -----------------------------------------------------------------------


@dataclass(frozen=True)
class ComposeResult:
    image: np.ndarray  # (H, W, 3) uint8
    report: dict

    def save(self, png_path: str | os.PathLike, sidecar_path: str | os.PathLike | None = None) -> None:
        Image.fromarray(self.image).save(png_path, compress_level=1)
        if sidecar_path is not None:
            Path(sidecar_path).write_text(json.dumps(self.report, indent=1, sort_keys=True))


def _text_strings(layout: Layout, record: PosterRecord | None, texts) -> list[str]:
    text_elements = layout.texts
    if texts is None:
        own = [e.text for e in text_elements]
        if all(t is not None for t in own):
            return list(own)
        texts = list(record.texts) if record is not None else []
    texts = list(texts)
    if len(text_elements) > len(texts):
        raise ValueError(
            f"layout has {len(text_elements)} text elements but only {len(texts)} strings "
            f"(short by {len(text_elements) - len(texts)})"
        )
    return texts[: len(text_elements)]


def compose_poster(record: PosterRecord, layout: Layout, seed: int, texts=None, draw_text: bool = True,
                   cutout: np.ndarray | None = None) -> ComposeResult:
    """Render a poster at the record's canvas size; deterministic per (record, layout, seed)."""
    W, H = record.canvas
    strings = _text_strings(layout, record, texts)
    cutout = record.cutout() if cutout is None else cutout
    palette = extract_palette(cutout)
    canvas = Image.fromarray(procedural_background(palette, (W, H), seed)).convert("RGBA")
    rng = np.random.default_rng([seed, 0xF0])

    overlay = Image.new("RGBA", (W, H), (0, 0, 0, 0))
    od = ImageDraw.Draw(overlay)
    for el in layout.of(Category.UNDERLAY):
        x0, y0, x1, y1 = box_to_pixels(el, W, H)
        if x1 > x0 and y1 > y0:
            radius = max(1, min(x1 - x0, y1 - y0) // 4)
            od.rounded_rectangle([x0, y0, x1 - 1, y1 - 1], radius=radius, fill=palette.accent + (UNDERLAY_ALPHA,))
    canvas = Image.alpha_composite(canvas, overlay)

    product = layout.product
    if product is not None and product.width > 0 and product.height > 0:
        placed = place_cutout(cutout, product, (W, H))
        canvas = Image.alpha_composite(canvas, Image.fromarray(placed, "RGBA"))

    report = {"id": record.id, "seed": int(seed), "canvas": [W, H], "palette": [list(c) + [w] for c, w in palette.colors],
              "elements": [], "missing_glyphs": 0}
    text_i = 0
    for idx, el in enumerate(layout.real_elements()):
        entry = {"index": idx, "category": el.category.label, "box_px": list(box_to_pixels(el, W, H))}
        report["elements"].append(entry)
        if el.category != Category.TEXT:
            continue
        text = strings[text_i]
        text_i += 1
        font_index = int(rng.integers(len(FONT_LIBRARY)))
        entry.update(text=text, font=FONT_LIBRARY[font_index][0], weight=FONT_LIBRARY[font_index][1])
        if not draw_text:
            continue
        x0, y0, x1, y1 = entry["box_px"]
        if x1 <= x0 or y1 <= y0:
            entry["skipped"] = "empty box"
            continue
        region = np.asarray(canvas)[y0:y1, x0:x1, :3]
        color = pick_text_color(region)
        mean = region.reshape(-1, 3).astype(np.float64).mean(axis=0)
        entry.update(color=list(color), region_mean=[float(v) for v in mean],
                     contrast=contrast_ratio(color, mean))
        rect = (x0 + INSET, y0 + INSET, x1 - INSET, y1 - INSET)
        fitted, shrink = None, 0
        while shrink < 4:
            fitted = fit_text(text, font_index, rect[2] - rect[0] - shrink, rect[3] - rect[1] - shrink)
            if fitted is None:
                break
            size, lines = fitted
            layer = Image.new("RGBA", (W, H), (0, 0, 0, 0))
            missing = _draw_block(layer, lines, font_index, size, 1.2, rect, color)
            ink = mask_bbox(np.asarray(layer)[..., 3])
            if ink is None or (ink[0] >= rect[0] and ink[1] >= rect[1] and ink[2] <= rect[2] and ink[3] <= rect[3]):
                break
            # rasterized ink spilled past the measured extents; refit in a slightly smaller area
            fitted = None
            shrink += 1
        if fitted is None:
            entry["skipped"] = "box too small for text"
            continue
        canvas = Image.alpha_composite(canvas, layer)
        entry.update(size=size, lines=lines, ink_px=list(ink) if ink else None, missing_glyphs=missing,
                     line_height=FontSpec(entry["font"], entry["weight"], size).line_height)
        report["missing_glyphs"] += missing
    return ComposeResult(np.asarray(canvas.convert("RGB")), report)
