"""Layout planner: a transformer denoiser over attribute tokens, its training
step, and the constrained reverse-diffusion sampler."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffusion, kernels
from .embedder import EMBED_DIM
from .layout import (
    ATTRIBUTES,
    N_ATTR,
    AttributeVocabulary,
    Category,
    EmbeddingBundle,
    Layout,
    TokenGrid,
    dequantize_tokens,
    geometry_bin,
)
from .nn import F, AdaLN, Dropout, Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Tensor
from .nn import ParameterStore, no_grad
from .nn.tensor import ShapeError

MASK_LOGIT = -1e9
PARAMETERIZATIONS = ("x0", "direct")


@dataclass(frozen=True)
class DecoderConfig:
    blocks: int = 4
    heads: int = 8
    width: int = 512
    hidden: int = 2048
    dropout: float = 0.1
    T_P: int = 100
    E_max: int = 16
    vocab: AttributeVocabulary = field(default_factory=AttributeVocabulary)
    emb_dim: int = EMBED_DIM
    parameterization: str = "x0"
    slot_encoding: bool = True
    schedule: str = "linear-mask"
    lr: float = 5.0e-4
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")

    @classmethod
    def paper(cls, **kw) -> "DecoderConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "DecoderConfig":
        base = dict(blocks=2, heads=4, width=64, hidden=256, dropout=0.1, T_P=20)
        base.update(kw)
        return cls(**base)

    def to_json(self) -> dict:
        d = asdict(self)
        d["vocab"] = self.vocab.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "DecoderConfig":
        obj = dict(obj)
        if "vocab" in obj:
            obj["vocab"] = AttributeVocabulary(**obj["vocab"])
        return cls(**obj)


def make_schedules(config: DecoderConfig) -> list[diffusion.DiffusionSchedule]:
    """One schedule per attribute, sharing the horizon."""
    cache: dict[int, diffusion.DiffusionSchedule] = {}
    out = []
    for k in config.vocab.sizes:
        if k not in cache:
            cache[k] = diffusion.make_schedule(config.T_P, k, config.schedule)
        out.append(cache[k])
    return out


class DecoderBlock(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, dtype):
        self.adaln = AdaLN(cfg.width, rng, dtype=dtype)
        self.self_attn = MultiHeadAttention(cfg.width, cfg.heads, rng, dtype=dtype)
        self.cross_attn = MultiHeadAttention(cfg.width, cfg.heads, rng, dtype=dtype)
        self.drop = Dropout(cfg.dropout)
        self.ff = FeedForward(cfg.width, cfg.hidden, rng, cfg.dropout, dtype=dtype)

    def forward(self, e: Tensor, t: np.ndarray, ctx: Tensor, ctx_mask: np.ndarray) -> Tensor:
        h = self.adaln(e, t)
        a = h + self.drop(self.self_attn(h))
        return self.ff(a + self.drop(self.cross_attn(a, ctx, ctx_mask)))


@dataclass(frozen=True, eq=False)
class Context:
    """Batched conditioning tokens: text then image, padded to a common length."""

    tokens: np.ndarray  # (B, L, emb_dim)
    mask: np.ndarray  # (B, L) valid positions
    kind: np.ndarray  # (B, L) 0 = text, 1 = image

    @classmethod
    def collate(cls, bundles: Sequence[EmbeddingBundle], emb_dim: int) -> "Context":
        if not bundles:
            raise ValueError("empty batch")
        for b in bundles:
            for part in (b.text, b.image):
                if part.shape[0] and part.shape[1] != emb_dim:
                    raise ShapeError(f"embedding width {part.shape[1]} != expected {emb_dim}")
        lengths = [b.text.shape[0] + b.image.shape[0] for b in bundles]
        n = max(max(lengths), 1)
        tokens = np.zeros((len(bundles), n, emb_dim), dtype=np.float32)
        mask = np.zeros((len(bundles), n), dtype=bool)
        kind = np.zeros((len(bundles), n), dtype=np.int64)
        for i, b in enumerate(bundles):
            lt, li = b.text.shape[0], b.image.shape[0]
            if lt:
                tokens[i, :lt] = b.text
            if li:
                tokens[i, lt : lt + li] = b.image
            mask[i, : lt + li] = True
            kind[i, lt : lt + li] = 1
        mask[~mask.any(axis=1), 0] = True  # keep softmax defined for empty conditioning
        return cls(tokens, mask, kind)

    def take(self, idx) -> "Context":
        return Context(self.tokens[idx], self.mask[idx], self.kind[idx])


class LayoutDecoder(Module):
    """Token embedding FC, ``N`` AdaLN/self-attention/cross-attention blocks and per-attribute output FCs."""

    def __init__(self, config: DecoderConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        cfg = config
        states = cfg.vocab.states
        self._offsets = np.concatenate([[0], np.cumsum(states)[:-1]]).astype(np.int64)
        self.token_emb = Embedding(int(sum(states)), cfg.width, rng, dtype=dtype)
        self.attr_emb = Embedding(N_ATTR, cfg.width, rng, dtype=dtype)
        self.slot_emb = Embedding(cfg.E_max, cfg.width, rng, dtype=dtype) if cfg.slot_encoding else None
        self.input_fc = Linear(cfg.width, cfg.width, rng, dtype=dtype)
        self.ctx_proj = Linear(cfg.emb_dim, cfg.width, rng, dtype=dtype)
        self.ctx_type = Embedding(2, cfg.width, rng, dtype=dtype)
        self.blocks = [DecoderBlock(cfg, rng, dtype) for _ in range(cfg.blocks)]
        self.final_norm = LayerNorm(cfg.width, dtype=dtype)
        direct = cfg.parameterization == "direct"
        self.heads = [Linear(cfg.width, k + 1 if direct else k, rng, dtype=dtype) for k in cfg.vocab.sizes]

    @property
    def dtype(self):
        return self.token_emb.weight.dtype

    def forward(self, tokens: np.ndarray, t: np.ndarray, ctx: Context) -> list[Tensor]:
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        b, e, a = tokens.shape
        if e != cfg.E_max or a != N_ATTR:
            raise ShapeError(f"expected token grid (B, {cfg.E_max}, {N_ATTR}), got {tokens.shape}")
        if ctx.tokens.shape[0] != b or ctx.tokens.shape[2] != cfg.emb_dim:
            raise ShapeError(f"context shape {ctx.tokens.shape} does not match batch {b} / width {cfg.emb_dim}")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
        x = self.token_emb(tokens + self._offsets) + self.attr_emb.weight
        if self.slot_emb is not None:
            x = x + self.slot_emb.weight.reshape(e, 1, cfg.width)
        x = self.input_fc(x.reshape(b, e * a, cfg.width))
        c = self.ctx_proj(Tensor(ctx.tokens.astype(self.dtype))) + self.ctx_type(ctx.kind)
        for block in self.blocks:
            x = block(x, t, c, ctx.mask)
        x = self.final_norm(x).reshape(b, e, a, cfg.width)
        out = []
        for ai, head in enumerate(self.heads):
            logits = head(x[:, :, ai, :])
            if cfg.parameterization == "x0":
                pad = Tensor(np.full((b, e, 1), MASK_LOGIT, dtype=self.dtype))
                logits = F.concat([logits, pad], axis=2)
            out.append(logits)
        return out


def denoise_step(grid: TokenGrid, t: int, emb: EmbeddingBundle, model: LayoutDecoder) -> list[np.ndarray]:
    """Logits for every token of one grid, ``E_max x K_attr`` per attribute."""
    if grid.timestep != t:
        raise ValueError(f"grid timestep {grid.timestep} != requested t={t}")
    ctx = Context.collate([emb], model.config.emb_dim)
    with no_grad():
        logits = model(grid.tokens[None], np.array([t]), ctx)
    return [lg.data[0] for lg in logits]


# --- training -----------------------------------------------------------------


def corrupt(z0: np.ndarray, t: np.ndarray, schedules, rng: np.random.Generator, keep: np.ndarray | None = None) -> np.ndarray:
    """Forward-sample every attribute token of ``(B, E, 5)`` grids at per-sample times."""
    zt = np.empty_like(z0)
    tt = np.broadcast_to(t[:, None], z0.shape[:2])
    for a in range(N_ATTR):
        zt[:, :, a] = diffusion.forward_sample_many(z0[:, :, a], tt, schedules[a], rng)
    if keep is not None:
        zt = np.where(keep, z0, zt)
    return zt


def posterior_targets(z0: np.ndarray, zt: np.ndarray, t: np.ndarray, s: diffusion.DiffusionSchedule) -> np.ndarray:
    """``q(z_{t-1} | z_t, z_0)`` rows for flat token arrays (direct parameterization target)."""
    out = np.zeros((z0.size, s.K + 1))
    for tv in np.unique(t):
        sel = t == tv
        tv = int(tv)
        num = diffusion.transition_matrix(s, tv)[zt[sel], :] * diffusion.cumulative_matrix(s, tv - 1)[:, z0[sel]].T
        out[sel] = num / num.sum(axis=1, keepdims=True)
    return out


def training_loss(model: LayoutDecoder, z0: np.ndarray, ctx: Context, schedules, rng: np.random.Generator,
                  keep: np.ndarray | None = None, t: np.ndarray | None = None) -> Tensor:
    cfg = model.config
    b = z0.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    if t is None:
        t = rng.integers(1, cfg.T_P + 1, size=b)
    zt = corrupt(z0, t, schedules, rng, keep)
    logits = model(zt, t, ctx)
    corrupted = zt != z0
    weight = np.where(corrupted, 1.0, 1e-2)
    total = weight.sum()
    loss = None
    for a in range(N_ATTR):
        w_a = weight[:, :, a]
        if cfg.parameterization == "x0":
            target = z0[:, :, a]
        else:
            tt = np.broadcast_to(t[:, None], z0.shape[:2]).ravel()
            target = posterior_targets(z0[:, :, a].ravel(), zt[:, :, a].ravel(), tt, schedules[a])
            target = target.reshape(logits[a].shape)
        term = F.cross_entropy(logits[a], target, w_a) * (w_a.sum() / total)
        loss = term if loss is None else loss + term
    return loss


def train_step(model: LayoutDecoder, store: ParameterStore, z0: np.ndarray, ctx: Context, schedules,
               rng: np.random.Generator, keep: np.ndarray | None = None) -> float:
    """One corrupted-batch update; returns the weighted cross-entropy."""
    model.train(rng)
    store.zero_grad()
    loss = training_loss(model, z0, ctx, schedules, rng, keep)
    loss.backward()
    store.step()
    return float(loss.data)


def uniform_loss_baseline(vocab: AttributeVocabulary) -> float:
    """Mean per-token cross-entropy of uniform logits, averaged over attributes."""
    return float(np.mean(np.log(vocab.sizes)))


# --- constraints and sampling ---------------------------------------------------


@dataclass(frozen=True)
class LayoutConstraint:
    fixed: dict = field(default_factory=dict)  # (slot, attr) -> token id

    def validate(self, vocab: AttributeVocabulary, capacity: int) -> None:
        for (slot, attr), tok in self.fixed.items():
            if not (0 <= slot < capacity):
                raise ValueError(f"constraint slot {slot} outside [0, {capacity})")
            if not (0 <= attr < N_ATTR):
                raise ValueError(f"constraint attribute {attr} outside [0, {N_ATTR})")
            if not (0 <= tok < vocab.sizes[attr]):
                raise ValueError(
                    f"infeasible constraint token {tok} for {ATTRIBUTES[attr]} at slot {slot}; "
                    f"valid ids are [0, {vocab.sizes[attr]})"
                )

    def arrays(self, capacity: int) -> tuple[np.ndarray, np.ndarray]:
        mask = np.zeros((capacity, N_ATTR), dtype=bool)
        values = np.zeros((capacity, N_ATTR), dtype=np.int64)
        for (slot, attr), tok in self.fixed.items():
            mask[slot, attr] = True
            values[slot, attr] = tok
        return mask, values

    @classmethod
    def from_json(cls, obj: dict, vocab: AttributeVocabulary | None = None) -> "LayoutConstraint":
        vocab = vocab or AttributeVocabulary()
        fixed = {}
        for entry in obj.get("fix", []):
            slot = int(entry["slot"])
            if entry.get("category") is not None:
                fixed[(slot, 0)] = int(Category.parse(entry["category"]))
            box = entry.get("box") or []
            if len(box) > 4:
                raise ValueError(f"constraint box has {len(box)} entries, expected at most 4")
            for i, v in enumerate(box):
                if v is not None:
                    fixed[(slot, i + 1)] = geometry_bin(float(v), vocab.bins_geometry)
        return cls(fixed)

    @classmethod
    def load(cls, path: str | os.PathLike, vocab: AttributeVocabulary | None = None) -> "LayoutConstraint":
        return cls.from_json(json.loads(Path(path).read_text()), vocab)


def sample_grids(model: LayoutDecoder, ctx: Context, schedules, rng: np.random.Generator,
                 constraints: Sequence[LayoutConstraint | None] | LayoutConstraint | None = None,
                 temperature: float = 1.0) -> np.ndarray:
    """Run the reverse chain from all-MASK grids for a batch; returns clean ``(B, E, 5)`` tokens.

    ``temperature`` divides the predicted logits before the reverse step.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    cfg = model.config
    b = ctx.tokens.shape[0]
    e = cfg.E_max
    if schedules[0].T != cfg.T_P:
        raise ValueError(f"schedule horizon {schedules[0].T} != decoder T_P {cfg.T_P}")
    if constraints is None or isinstance(constraints, LayoutConstraint):
        constraints = [constraints] * b
    fix_mask = np.zeros((b, e, N_ATTR), dtype=bool)
    fix_val = np.zeros((b, e, N_ATTR), dtype=np.int64)
    for i, c in enumerate(constraints):
        if c is not None:
            c.validate(cfg.vocab, e)
            fix_mask[i], fix_val[i] = c.arrays(e)
    z = np.broadcast_to(cfg.vocab.mask_ids, (b, e, N_ATTR)).copy()
    z = np.where(fix_mask, fix_val, z)
    model.eval()
    with no_grad():
        for t in range(cfg.T_P, 0, -1):
            logits = model(z, np.full(b, t), ctx)
            nxt = np.empty_like(z)
            for a in range(N_ATTR):
                s = schedules[a]
                lg = logits[a].data.astype(np.float64).reshape(b * e, -1) / temperature
                zt = z[:, :, a].ravel()
                if cfg.parameterization == "x0":
                    lg = lg[:, : s.K]
                    p0 = np.exp(lg - lg.max(axis=1, keepdims=True))
                    p0 /= p0.sum(axis=1, keepdims=True)
                    probs = diffusion.reverse_probs(s, t, zt, p0)
                else:
                    probs = np.exp(lg - lg.max(axis=1, keepdims=True))
                    if t == 1:
                        probs[:, s.K] = 0.0
                    # MASK is absorbing: a visible token cannot come from MASK
                    probs[zt != s.K, s.K] = 0.0
                    probs /= probs.sum(axis=1, keepdims=True)
                nxt[:, :, a] = kernels.sample_categorical(probs, rng.random(b * e)).reshape(b, e)
            z = np.where(fix_mask, fix_val, nxt)
    return z


def sample_layout(emb: EmbeddingBundle, constraints: LayoutConstraint | None, model: LayoutDecoder, schedules,
                  rng: np.random.Generator, texts: Sequence[str] | None = None, canvas_aspect: float = 750 / 513,
                  temperature: float = 1.0) -> Layout:
    ctx = Context.collate([emb], model.config.emb_dim)
    z = sample_grids(model, ctx, schedules, rng, constraints, temperature)[0]
    return dequantize_tokens(TokenGrid(z, 0), model.config.vocab, canvas_aspect, texts)


# --- persistence ------------------------------------------------------------------


def save_planner(path, model: LayoutDecoder, store: ParameterStore) -> None:
    meta = json.dumps(model.config.to_json(), sort_keys=True).encode("utf-8")
    store.save(path, extra={"meta/config": np.frombuffer(meta, dtype=np.uint8)})


def load_planner(path, dtype=np.float32) -> tuple[LayoutDecoder, ParameterStore]:
    from .nn import read_tensors

    tensors = read_tensors(path)
    if "meta/config" not in tensors:
        raise ValueError(f"{path} is not a planner checkpoint")
    cfg = DecoderConfig.from_json(json.loads(tensors["meta/config"].tobytes().decode("utf-8")))
    model = LayoutDecoder(cfg, dtype=dtype)
    store = ParameterStore(model.parameters_dict(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    store.load_state(tensors)
    return model, store


def with_parameterization(config: DecoderConfig, kind: str) -> DecoderConfig:
    return replace(config, parameterization=kind)
