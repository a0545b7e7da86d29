"""Deterministic hash embedder standing in for the pretrained text and image encoders.

Each text becomes one token; the product cutout becomes 4x4 patch tokens. The
first eight dimensions of every token are structured features:

====  ==========================================
dim   meaning
====  ==========================================
0     text marker
1     text length / 20 (capped at 2)
2-5   one-hot ordinal of the text (last slot absorbs the rest)
6     log aspect ratio of the cutout (image tokens)
7     image marker
====  ==========================================

The remaining dimensions carry seeded hash vectors of character bigrams for
text and a fixed random projection of patch color statistics for the image.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .layout import EmbeddingBundle

EMBED_DIM = 32
N_STRUCT = 8
GRID = 4


def _hash_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}:{token}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.standard_normal(dim)


def _projection(n_in: int, n_out: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x1A6E])
    return rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)


def text_tokens(texts, dim: int = EMBED_DIM, seed: int = 0) -> np.ndarray:
    out = np.zeros((len(texts), dim))
    free = dim - N_STRUCT
    for i, text in enumerate(texts):
        out[i, 0] = 1.0
        out[i, 1] = min(len(text) / 20.0, 2.0)
        out[i, 2 + min(i, 3)] = 1.0
        padded = f"^{text}$"
        acc = np.zeros(free)
        for a, b in zip(padded, padded[1:]):
            acc += _hash_vector(a + b, free, seed)
        norm = np.linalg.norm(acc)
        out[i, N_STRUCT:] = 0.5 * acc / norm if norm > 0 else 0.0
    return out


def patch_statistics(rgba: np.ndarray, grid: int = GRID) -> np.ndarray:
    """Per-patch mean color (alpha-weighted) and alpha coverage, ``(grid*grid, 4)``."""
    img = np.asarray(rgba, dtype=np.float64) / 255.0
    if img.ndim == 2:
        img = np.dstack([img, img, img, np.ones_like(img)])
    if img.shape[2] == 3:
        img = np.dstack([img, np.ones(img.shape[:2])])
    h, w = img.shape[:2]
    ys = np.linspace(0, h, grid + 1).round().astype(int)
    xs = np.linspace(0, w, grid + 1).round().astype(int)
    stats = np.zeros((grid * grid, 4))
    for r in range(grid):
        for c in range(grid):
            patch = img[ys[r] : max(ys[r + 1], ys[r] + 1), xs[c] : max(xs[c + 1], xs[c] + 1)]
            if patch.size == 0:
                continue
            alpha = patch[..., 3]
            cover = alpha.mean()
            if alpha.sum() > 0:
                color = (patch[..., :3] * alpha[..., None]).sum(axis=(0, 1)) / alpha.sum()
            else:
                color = np.zeros(3)
            stats[r * grid + c] = [*color, cover]
    return stats


def image_tokens(rgba: np.ndarray, dim: int = EMBED_DIM, seed: int = 0) -> np.ndarray:
    rgba = np.asarray(rgba)
    h, w = rgba.shape[:2]
    stats = patch_statistics(rgba)
    n = len(stats)
    rows, cols = np.divmod(np.arange(n), GRID)
    raw = np.column_stack([stats, rows / (GRID - 1), cols / (GRID - 1), np.ones(n)])
    out = np.zeros((n, dim))
    out[:, 6] = math.log(h / w) if h > 0 and w > 0 else 0.0
    out[:, 7] = 1.0
    out[:, N_STRUCT:] = np.tanh(raw @ _projection(raw.shape[1], dim - N_STRUCT, seed))
    return out


def hash_embedder(texts, product_image: np.ndarray, dim: int = EMBED_DIM, seed: int = 0) -> EmbeddingBundle:
    """Embed texts and a product cutout (RGBA, cropped to its mask) deterministically."""
    texts = list(texts)
    return EmbeddingBundle(text_tokens(texts, dim, seed).reshape(len(texts), dim), image_tokens(product_image, dim, seed))
