"""Layout domain model: elements, quantization to token grids, validation and
dataset ingestion.

Coordinates are normalized fractions of the canvas with the origin at the top
left and y pointing down. Every element is described by five attributes
``(c, x, y, w, h)``; each attribute lives in its own categorical space whose
last id is reserved for the absorbing MASK state.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

E_MAX = 16
K_GEO = 64
QUANT_EPS = 1e-6
CANVAS_SLACK = 0.02
ATTRIBUTES = ("category", "x", "y", "w", "h")
N_ATTR = len(ATTRIBUTES)


class Category(enum.IntEnum):
    TEXT = 0
    UNDERLAY = 1
    PRODUCT = 2
    PAD = 3

    @classmethod
    def parse(cls, name: str) -> "Category":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown element category {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class Element:
    category: Category
    center_x: float = 0.0
    center_y: float = 0.0
    width: float = 0.0
    height: float = 0.0
    text: str | None = None

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.center_x, self.center_y, self.width, self.height)

    @property
    def ltrb(self) -> tuple[float, float, float, float]:
        hw, hh = self.width / 2, self.height / 2
        return (self.center_x - hw, self.center_y - hh, self.center_x + hw, self.center_y + hh)

    @property
    def area(self) -> float:
        return self.width * self.height

    @classmethod
    def pad(cls) -> "Element":
        return cls(Category.PAD)

    def to_json(self) -> dict:
        out = {"category": self.category.label, "box": [float(v) for v in self.box]}
        if self.text is not None:
            out["text"] = self.text
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Element":
        cat = Category.parse(obj["category"])
        box = obj.get("box", [0.0, 0.0, 0.0, 0.0])
        if len(box) != 4:
            raise ValueError(f"box must have 4 entries, got {len(box)}")
        return cls(cat, *(float(v) for v in box), text=obj.get("text"))


@dataclass(frozen=True)
class Layout:
    elements: tuple[Element, ...] = ()
    canvas_aspect: float = 750 / 513
    capacity: int = E_MAX

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))

    def __len__(self) -> int:
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def real_elements(self) -> list[Element]:
        return [e for e in self.elements if e.category != Category.PAD]

    def of(self, category: Category) -> list[Element]:
        return [e for e in self.elements if e.category == category]

    @property
    def texts(self) -> list[Element]:
        return self.of(Category.TEXT)

    @property
    def product(self) -> Element | None:
        products = self.of(Category.PRODUCT)
        return products[0] if products else None

    def to_json(self) -> dict:
        return {
            "canvas_aspect": self.canvas_aspect,
            "elements": [e.to_json() for e in self.real_elements()],
        }

    @classmethod
    def from_json(cls, obj: dict, capacity: int = E_MAX) -> "Layout":
        elements = tuple(Element.from_json(e) for e in obj.get("elements", []))
        return cls(elements, float(obj.get("canvas_aspect", 750 / 513)), capacity)


@dataclass(frozen=True)
class AttributeVocabulary:
    """Five independent categorical spaces, one per attribute.

    ``sizes[a]`` counts the non-MASK states of attribute ``a``; its MASK id is
    ``sizes[a]`` and the attribute has ``sizes[a] + 1`` states in total.
    """

    bins_geometry: int = K_GEO
    categories: int = len(Category)

    def __post_init__(self):
        if self.bins_geometry < 2 or self.categories < 2:
            raise ValueError("vocabulary needs at least 2 values per attribute")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.categories,) + (self.bins_geometry,) * 4

    @property
    def states(self) -> tuple[int, ...]:
        return tuple(k + 1 for k in self.sizes)

    def mask_id(self, attr: int) -> int:
        return self.sizes[attr]

    @property
    def mask_ids(self) -> np.ndarray:
        return np.asarray(self.sizes, dtype=np.int64)

    @property
    def pad_id(self) -> int:
        return int(Category.PAD)

    def to_json(self) -> dict:
        return {"bins_geometry": self.bins_geometry, "categories": self.categories}


@dataclass(frozen=True, eq=False)
class TokenGrid:
    tokens: np.ndarray
    timestep: int = 0

    def __post_init__(self):
        tok = np.array(self.tokens, dtype=np.int64)
        if tok.ndim != 2 or tok.shape[1] != N_ATTR:
            raise ValueError(f"token grid must be (E_max, {N_ATTR}), got {tok.shape}")
        tok.setflags(write=False)
        object.__setattr__(self, "tokens", tok)

    def __eq__(self, other):
        return (
            isinstance(other, TokenGrid)
            and self.timestep == other.timestep
            and np.array_equal(self.tokens, other.tokens)
        )

    def __hash__(self):
        return hash((self.timestep, self.tokens.tobytes()))

    @property
    def capacity(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def all_mask(cls, vocab: AttributeVocabulary, timestep: int, capacity: int = E_MAX):
        return cls(np.tile(vocab.mask_ids, (capacity, 1)), timestep)


def geometry_bin(v: float, k: int) -> int:
    return int(math.floor(min(max(v, 0.0), 1.0 - QUANT_EPS) * k))


def bin_center(b, k: int):
    return (b + 0.5) / k


def quantize_layout(layout: Layout, vocab: AttributeVocabulary | None = None) -> TokenGrid:
    vocab = vocab or AttributeVocabulary()
    k = vocab.bins_geometry
    if len(layout.elements) > layout.capacity:
        raise ValueError(f"layout has {len(layout.elements)} elements, capacity is {layout.capacity}")
    tokens = np.zeros((layout.capacity, N_ATTR), dtype=np.int64)
    tokens[:, 0] = vocab.pad_id
    for i, el in enumerate(layout.elements):
        if not all(math.isfinite(v) for v in el.box):
            raise ValueError(f"element {i} has non-finite geometry {el.box}")
        if el.category == Category.PAD:
            continue
        tokens[i, 0] = int(el.category)
        tokens[i, 1:] = [geometry_bin(v, k) for v in el.box]
    return TokenGrid(tokens, 0)


def dequantize_tokens(
    grid: TokenGrid,
    vocab: AttributeVocabulary | None = None,
    canvas_aspect: float = 750 / 513,
    texts: Sequence[str] | None = None,
) -> Layout:
    vocab = vocab or AttributeVocabulary()
    tok = grid.tokens
    masked = np.argwhere(tok == vocab.mask_ids[None, :])
    if len(masked):
        slot, attr = (int(v) for v in masked[0])
        raise ValueError(f"residual MASK token at slot {slot}, attribute {ATTRIBUTES[attr]!r}")
    k = vocab.bins_geometry
    text_iter = iter(texts or ())
    elements = []
    for row in tok:
        cat = Category(int(row[0]))
        if cat == Category.PAD:
            continue
        text = next(text_iter, None) if cat == Category.TEXT else None
        elements.append(Element(cat, *(float(bin_center(int(b), k)) for b in row[1:]), text=text))
    return Layout(tuple(elements), canvas_aspect, grid.capacity)


# --- validation -------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    index: int | None = None
    fatal: bool = True


@dataclass(frozen=True)
class DiagnosticsReport:
    items: tuple[Diagnostic, ...] = ()

    @property
    def ok(self) -> bool:
        return not any(d.fatal for d in self.items)

    def codes(self) -> list[str]:
        return [d.code for d in self.items]

    def __bool__(self) -> bool:
        return bool(self.items)

    def __len__(self) -> int:
        return len(self.items)


def validate_layout(layout: Layout) -> DiagnosticsReport:
    items: list[Diagnostic] = []
    n = len(layout.elements)
    if n > layout.capacity:
        items.append(Diagnostic("too_many_elements", f"{n} elements exceed capacity {layout.capacity}"))
    seen_pad = False
    n_product = 0
    lo, hi = -CANVAS_SLACK, 1.0 + CANVAS_SLACK
    for i, el in enumerate(layout.elements):
        if el.category == Category.PAD:
            seen_pad = True
            if el.width != 0 or el.height != 0:
                items.append(Diagnostic("pad_geometry", "pad element carries geometry", i))
            continue
        if seen_pad:
            items.append(Diagnostic("pad_not_trailing", "element follows a pad slot", i))
        if not all(math.isfinite(v) for v in el.box):
            items.append(Diagnostic("non_finite", f"non-finite box {el.box}", i))
            continue
        if el.category == Category.PRODUCT:
            n_product += 1
        if el.width <= 0 or el.height <= 0:
            items.append(Diagnostic("zero_area", f"box {el.box} has no area", i))
        x0, y0, x1, y1 = el.ltrb
        if not (0.0 <= el.center_x <= 1.0 and 0.0 <= el.center_y <= 1.0) or min(x0, y0) < lo or max(x1, y1) > hi:
            items.append(Diagnostic("out_of_canvas", f"box {el.box} leaves the canvas", i))
    if n_product == 0:
        items.append(Diagnostic("missing_product", "layout has no product element"))
    elif n_product > 1:
        items.append(Diagnostic("duplicate_product", f"layout has {n_product} product elements"))
    return DiagnosticsReport(tuple(items))


# --- embeddings -------------------------------------------------------------

EMBED_MAGIC = b"PRE1"


@dataclass(frozen=True, eq=False)
class EmbeddingBundle:
    text: np.ndarray
    image: np.ndarray

    def __post_init__(self):
        t = np.ascontiguousarray(self.text, dtype=np.float32)
        im = np.ascontiguousarray(self.image, dtype=np.float32)
        if t.ndim != 2 or im.ndim != 2:
            raise ValueError("embeddings must be 2-D (length, width)")
        if t.shape[0] and im.shape[0] and t.shape[1] != im.shape[1]:
            raise ValueError(f"text width {t.shape[1]} != image width {im.shape[1]}")
        if not (np.isfinite(t).all() and np.isfinite(im).all()):
            raise ValueError("embeddings contain non-finite values")
        t.setflags(write=False)
        im.setflags(write=False)
        object.__setattr__(self, "text", t)
        object.__setattr__(self, "image", im)

    @property
    def dim(self) -> int:
        return self.image.shape[1] if self.image.shape[0] else self.text.shape[1]

    def context(self) -> np.ndarray:
        """Concatenated text-then-image token matrix."""
        return np.concatenate([self.text.reshape(-1, self.dim), self.image], axis=0)

    def __eq__(self, other):
        return (
            isinstance(other, EmbeddingBundle)
            and self.text.shape == other.text.shape
            and self.image.shape == other.image.shape
            and self.text.tobytes() == other.text.tobytes()
            and self.image.tobytes() == other.image.tobytes()
        )

    def to_bytes(self) -> bytes:
        d = self.dim
        header = EMBED_MAGIC + struct.pack("<III", self.text.shape[0], self.image.shape[0], d)
        return header + self.text.astype("<f4").tobytes() + self.image.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EmbeddingBundle":
        if raw[:4] != EMBED_MAGIC:
            raise ValueError(f"bad embedding magic {raw[:4]!r}")
        lt, li, d = struct.unpack_from("<III", raw, 4)
        need = 16 + 4 * d * (lt + li)
        if len(raw) != need:
            raise ValueError(f"embedding file has {len(raw)} bytes, header implies {need}")
        payload = np.frombuffer(raw, dtype="<f4", offset=16)
        return cls(payload[: lt * d].reshape(lt, d), payload[lt * d :].reshape(li, d))


def write_embeddings(path: str | os.PathLike, bundle: EmbeddingBundle) -> None:
    Path(path).write_bytes(bundle.to_bytes())


def read_embeddings(path: str | os.PathLike) -> EmbeddingBundle:
    return EmbeddingBundle.from_bytes(Path(path).read_bytes())


# --- dataset ----------------------------------------------------------------


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Smallest pixel rectangle ``(x0, y0, x1, y1)`` (exclusive end) around nonzero pixels."""
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    if not len(ys):
        return None
    return int(xs[0]), int(ys[0]), int(xs[-1]) + 1, int(ys[-1]) + 1


@dataclass(frozen=True)
class PosterRecord:
    id: str
    canvas: tuple[int, int]
    ground_truth: Layout
    texts: tuple[str, ...]
    root: Path
    product_image: str
    product_mask: str
    embedding_ref: str
    product_box_px: tuple[int, int, int, int] = (0, 0, 0, 0)

    def load_rgba(self) -> np.ndarray:
        """Full-canvas RGBA raster of the product with alpha taken from the mask."""
        from PIL import Image

        with Image.open(self.root / self.product_image) as im:
            rgb = np.asarray(im.convert("RGB"))
        with Image.open(self.root / self.product_mask) as im:
            alpha = np.asarray(im.convert("L"))
        return np.dstack([rgb, alpha])

    def cutout(self) -> np.ndarray:
        x0, y0, x1, y1 = self.product_box_px
        return self.load_rgba()[y0:y1, x0:x1]

    def embeddings(self) -> EmbeddingBundle:
        return read_embeddings(self.root / self.embedding_ref)


@dataclass
class LoadReport:
    loaded: int = 0
    skipped: list[tuple[str, str]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.loaded + len(self.skipped)


def box_from_pixels(px: tuple[int, int, int, int], canvas: tuple[int, int]) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = px
    w, h = canvas
    return ((x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h)


def parse_annotation(path: Path) -> PosterRecord:
    from PIL import Image

    obj = json.loads(path.read_text())
    root = path.parent
    canvas = tuple(int(v) for v in obj["canvas"])
    if len(canvas) != 2 or min(canvas) <= 0:
        raise ValueError(f"bad canvas {obj['canvas']}")
    elements = [Element.from_json(e) for e in obj["elements"]]
    mask_path = root / obj["product_mask"]
    if not mask_path.is_file():
        raise FileNotFoundError(f"missing product mask {mask_path}")
    with Image.open(mask_path) as im:
        mask = np.asarray(im.convert("L")) > 0
    if mask.shape != (canvas[1], canvas[0]):
        raise ValueError(f"mask size {mask.shape[::-1]} != canvas {canvas}")
    px = mask_bbox(mask)
    if px is None:
        raise ValueError("product mask is empty")
    # the mask-derived rectangle is authoritative for the product location
    box = box_from_pixels(px, canvas)
    elements = [
        Element(Category.PRODUCT, *box) if e.category == Category.PRODUCT else e for e in elements
    ]
    layout = Layout(tuple(elements), canvas[1] / canvas[0])
    report = validate_layout(layout)
    if not report.ok:
        raise ValueError("invalid layout: " + "; ".join(d.message for d in report.items if d.fatal))
    texts = tuple(e.text or "" for e in elements if e.category == Category.TEXT)
    return PosterRecord(
        id=str(obj["id"]),
        canvas=canvas,
        ground_truth=layout,
        texts=texts,
        root=root,
        product_image=obj["product_image"],
        product_mask=obj["product_mask"],
        embedding_ref=obj["embeddings"],
        product_box_px=px,
    )


def annotation_files(path: str | os.PathLike) -> list[Path]:
    return sorted(p for p in Path(path).glob("*.json") if p.name != "manifest.json")


def scan_dataset(path: str | os.PathLike, jobs: int = 1) -> tuple[list[PosterRecord], LoadReport]:
    files = annotation_files(path)
    report = LoadReport()

    def load(p: Path):
        try:
            return parse_annotation(p), None
        except (ValueError, KeyError, TypeError, OSError, json.JSONDecodeError) as exc:
            return None, f"{type(exc).__name__}: {exc}"

    if jobs > 1 and len(files) > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(load, files))
    else:
        results = [load(p) for p in files]
    records = []
    for p, (rec, err) in zip(files, results):
        if rec is None:
            logger.warning("skipping %s: %s", p.name, err)
            report.skipped.append((p.name, err))
        else:
            records.append(rec)
    records.sort(key=lambda r: r.id)
    report.loaded = len(records)
    logger.info("loaded %d records, skipped %d", report.loaded, len(report.skipped))
    return records, report


def load_dataset(path: str | os.PathLike, jobs: int = 1) -> list[PosterRecord]:
    return scan_dataset(path, jobs)[0]


def layouts_to_json(layouts: Iterable[tuple[str, Layout]]) -> list[dict]:
    return [{"id": rid, **lay.to_json()} for rid, lay in layouts]
