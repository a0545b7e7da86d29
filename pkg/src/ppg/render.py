"""Geometric front-end of the renderer.

Layouts become binary mask planes (Text = plane 0, Underlay = plane 1), the
planes are fused patch-by-patch by a small transformer with an aggregation
token, and the repositioned product is encoded by a six-layer convolution
stack. Both branches end in a zero-initialized convolution and land on the
same latent shape, so the control condition is a plain sum.

Raster shapes are ``(height, width)``; feature maps are ``(B, C, height, width)``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .layout import Category, Element, Layout, PosterRecord
from .nn import F, Conv2d, FeedForward, Linear, Module, MultiHeadAttention, Tensor, no_grad, write_tensors
from .nn.modules import param
from .nn.tensor import ShapeError

PLANES = (Category.TEXT, Category.UNDERLAY)
NEUTRAL = 128


@dataclass(frozen=True)
class FusionConfig:
    channels: int = 320
    width: int = 128
    height: int = 192
    patch: int = 8
    depth: int = 2
    fusion_width: int = 320
    heads: int = 8
    latent_channels: int = 4
    product_channels: tuple[int, ...] = (16, 16, 32, 32, 96)

    def __post_init__(self):
        if self.width % self.patch or self.height % self.patch:
            raise ValueError(f"feature size {self.width}x{self.height} not divisible by patch {self.patch}")
        if self.width % 4 or self.height % 4:
            raise ValueError("feature size must be divisible by 4")
        if self.fusion_width % self.heads:
            raise ValueError("fusion width must be divisible by heads")

    @classmethod
    def paper(cls) -> "FusionConfig":
        return cls()

    @classmethod
    def desk(cls) -> "FusionConfig":
        return cls(channels=8, width=32, height=48, patch=8, depth=2, fusion_width=32, heads=4,
                   product_channels=(8, 8, 16, 16, 16))

    @property
    def planes(self) -> int:
        return len(PLANES)

    @property
    def patch_grid(self) -> tuple[int, int]:
        """Patches along (height, width)."""
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.patch_grid
        return gh * gw

    @property
    def image_size(self) -> tuple[int, int]:
        """Render input resolution ``(width, height)``: twice the feature map."""
        return 2 * self.width, 2 * self.height

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.latent_channels, self.height // 4, self.width // 4


def round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def box_to_pixels(el: Element, width: int, height: int) -> tuple[int, int, int, int]:
    """Pixel rectangle ``(x0, y0, x1, y1)``, exclusive ends, clipped to the raster."""
    x0 = round_half_away((el.center_x - el.width / 2) * width)
    x1 = round_half_away((el.center_x + el.width / 2) * width)
    y0 = round_half_away((el.center_y - el.height / 2) * height)
    y1 = round_half_away((el.center_y + el.height / 2) * height)
    return max(x0, 0), max(y0, 0), min(x1, width), min(y1, height)


@dataclass(frozen=True, eq=False)
class MaskStack:
    planes: np.ndarray  # (M, height, width) uint8 in {0, 1}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.planes.shape

    def save_png(self, out_dir: str | os.PathLike, stem: str) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for m, cat in enumerate(PLANES):
            p = out / f"{stem}_{cat.label}.png"
            Image.fromarray(self.planes[m] * 255).convert("1").save(p)
            paths.append(p)
        return paths


def rasterize_masks(layout: Layout, config: FusionConfig) -> MaskStack:
    planes = np.zeros((len(PLANES), config.height, config.width), dtype=np.uint8)
    for m, cat in enumerate(PLANES):
        boxes = [box_to_pixels(el, config.width, config.height) for el in layout.of(cat)]
        if boxes:
            kernels.fill_boxes(planes[m], np.array(boxes, dtype=np.int64), 1)
    return MaskStack(planes)


class SpatialFusion(Module):
    """Mask encoder, per-patch aggregation-token transformer and output convolutions."""

    def __init__(self, config: FusionConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        c, d = config.channels, config.fusion_width
        self.config = config
        self.encoder = [
            Conv2d(1, c, 3, rng, pad=1, dtype=dtype),
            Conv2d(c, c, 3, rng, pad=1, dtype=dtype),
            Conv2d(c, c, 3, rng, pad=1, dtype=dtype),
        ]
        patch_dim = c * config.patch * config.patch
        self.plane_proj = [Linear(patch_dim, d, rng, dtype=dtype) for _ in range(config.planes)]
        self.agg_token = param(rng.normal(0.0, 0.02, d), dtype)
        self.attn = [MultiHeadAttention(d, config.heads, rng, dtype=dtype) for _ in range(config.depth)]
        self.ff = [FeedForward(d, 4 * d, rng, dtype=dtype) for _ in range(config.depth)]
        self.patch_out = Linear(d, patch_dim, rng, dtype=dtype)
        self.decoder = [
            Conv2d(c, c, 3, rng, stride=2, pad=1, dtype=dtype),
            Conv2d(c, c, 3, rng, stride=2, pad=1, dtype=dtype),
            Conv2d(c, config.latent_channels, 3, rng, pad=1, zero_init=True, dtype=dtype),
        ]

    @property
    def dtype(self):
        return self.agg_token.dtype

    def patchify(self, feat: Tensor) -> Tensor:
        """``(B, C, H, W)`` -> ``(B * n_patches, C * P * P)`` in row-major patch order."""
        cfg = self.config
        b = feat.shape[0]
        gh, gw = cfg.patch_grid
        p = cfg.patch
        x = feat.reshape(b, cfg.channels, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b * gh * gw, cfg.channels * p * p)

    def unpatchify(self, tokens: Tensor, b: int) -> Tensor:
        cfg = self.config
        gh, gw = cfg.patch_grid
        p = cfg.patch
        x = tokens.reshape(b, gh, gw, cfg.channels, p, p).transpose(0, 3, 1, 4, 2, 5)
        return x.reshape(b, cfg.channels, cfg.height, cfg.width)

    def fuse(self, planes: np.ndarray) -> Tensor:
        """Fused layout representation ``L'`` of shape ``(B, C, H, W)``."""
        cfg = self.config
        planes = np.asarray(planes)
        if planes.ndim == 3:
            planes = planes[None]
        b, m = planes.shape[:2]
        if m != len(self.plane_proj):
            raise ShapeError(f"fusion module was built for {len(self.plane_proj)} planes, got {m}")
        if planes.shape[2:] != (cfg.height, cfg.width):
            raise ShapeError(f"mask size {planes.shape[2:]} != configured {(cfg.height, cfg.width)}")
        x = Tensor(planes.reshape(b * m, 1, cfg.height, cfg.width).astype(self.dtype))
        for i, conv in enumerate(self.encoder):
            x = conv(x)
            if i < len(self.encoder) - 1:
                x = F.silu(x)
        per_plane = x.reshape(b, m, cfg.channels, cfg.height, cfg.width)
        tokens = [self.plane_proj[k](self.patchify(per_plane[:, k])) for k in range(m)]
        n = tokens[0].shape[0]
        d = cfg.fusion_width
        agg = Tensor(np.zeros((n, 1, d), dtype=self.dtype)) + self.agg_token.reshape(1, 1, d)
        seq = F.concat([agg] + [t.reshape(n, 1, d) for t in tokens], axis=1)
        for attn, ff in zip(self.attn, self.ff):
            seq = attn(seq) + seq
            seq = ff(seq)
        fused = self.patch_out(seq[:, 0, :])
        return self.unpatchify(fused, b)

    def forward(self, planes: np.ndarray) -> Tensor:
        x = self.fuse(planes)
        for i, conv in enumerate(self.decoder):
            x = conv(x)
            if i < len(self.decoder) - 1:
                x = F.silu(x)
        return x


def fuse_layouts(stack: MaskStack | np.ndarray, model: SpatialFusion) -> np.ndarray:
    planes = stack.planes if isinstance(stack, MaskStack) else stack
    with no_grad():
        return model(planes).data


class ProductEncoder(Module):
    """Six 3x3 convolutions halving resolution three times; last layer zero-initialized."""

    STRIDES = (1, 2, 1, 2, 2, 1)

    def __init__(self, config: FusionConfig, seed: int = 1, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        chans = (4,) + tuple(config.product_channels) + (config.latent_channels,)
        self.layers = [
            Conv2d(chans[i], chans[i + 1], 3, rng, stride=s, pad=1, zero_init=(i == 5), dtype=dtype)
            for i, s in enumerate(self.STRIDES)
        ]

    def forward(self, v: np.ndarray) -> Tensor:
        w, h = self.config.image_size
        v = np.asarray(v)
        if v.ndim == 3:
            v = v[None]
        if v.shape[1:3] != (h, w):
            raise ShapeError(f"product raster must be {w}x{h} (width x height), got {v.shape[2]}x{v.shape[1]}")
        x = Tensor((v.astype(np.float32) / 255.0).transpose(0, 3, 1, 2).astype(self.layers[0].weight.dtype))
        for i, conv in enumerate(self.layers):
            x = conv(x)
            if i < len(self.layers) - 1:
                x = F.silu(x)
        return x


def encode_product(v: np.ndarray, model: ProductEncoder) -> np.ndarray:
    with no_grad():
        return model(v).data


def place_cutout(cutout: np.ndarray, box: Element, canvas: tuple[int, int]) -> np.ndarray:
    """Paste an RGBA cutout letterboxed inside ``box`` on a neutral ``canvas`` ``(w, h)``.

    Returns an RGBA raster whose color is the cutout composited over neutral
    gray and whose alpha is the cutout alpha at its new location.
    """
    if box.category != Category.PRODUCT:
        raise ValueError(f"product box must have category product, got {box.category.label}")
    W, H = canvas
    bx0, by0, bx1, by1 = box_to_pixels(box, W, H)
    bw, bh = bx1 - bx0, by1 - by0
    if bw <= 0 or bh <= 0:
        raise ValueError(f"degenerate product box {box.box}")
    ch, cw = cutout.shape[:2]
    if ch == 0 or cw == 0:
        raise ValueError("empty product cutout")
    scale = min(bw / cw, bh / ch)
    dw = min(bw, max(1, round_half_away(cw * scale)))
    dh = min(bh, max(1, round_half_away(ch * scale)))
    img = Image.fromarray(np.ascontiguousarray(cutout, dtype=np.uint8), "RGBA")
    if (dw, dh) != (cw, ch):
        img = img.resize((dw, dh), Image.Resampling.BILINEAR)
    ox = bx0 + (bw - dw) // 2
    oy = by0 + (bh - dh) // 2
    layer = Image.new("RGBA", (W, H), (0, 0, 0, 0))
    layer.paste(img, (ox, oy))
    comp = Image.alpha_composite(Image.new("RGBA", (W, H), (NEUTRAL, NEUTRAL, NEUTRAL, 255)), layer)
    arr = np.asarray(comp).copy()
    arr[..., 3] = np.asarray(layer)[..., 3]
    return arr


def reposition_product(record: PosterRecord, product_box: Element, canvas: tuple[int, int] | None = None) -> np.ndarray:
    return place_cutout(record.cutout(), product_box, canvas or record.canvas)


def to_render_input(v: np.ndarray, config: FusionConfig) -> np.ndarray:
    """Resize a canvas-size RGBA raster to the render input resolution."""
    w, h = config.image_size
    if v.shape[:2] == (h, w):
        return v
    return np.asarray(Image.fromarray(v, "RGBA").resize((w, h), Image.Resampling.BILINEAR))


def assemble_condition(z_t, z_l, z_v) -> np.ndarray:
    """``Z' = Z_t + (Z_L + Z_V)``; the condition terms are summed first so swapping them is exact."""
    z_t, z_l, z_v = (x.data if isinstance(x, Tensor) else np.asarray(x) for x in (z_t, z_l, z_v))
    if not (z_t.shape == z_l.shape == z_v.shape):
        raise ShapeError(f"condition shapes differ: Z_t {z_t.shape}, Z_L {z_l.shape}, Z_V {z_v.shape}")
    return z_t + (z_l + z_v)


def export_conditions(path, z_l: np.ndarray, z_v: np.ndarray, z_prime: np.ndarray | None = None) -> None:
    tensors = {"Z_L": np.asarray(z_l, np.float32), "Z_V": np.asarray(z_v, np.float32)}
    if z_prime is not None:
        tensors["Z_prime"] = np.asarray(z_prime, np.float32)
    write_tensors(path, tensors)
