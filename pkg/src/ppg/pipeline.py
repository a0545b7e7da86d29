"""Run configuration and the synth / train / plan / compose / eval stages.

Every stage writes into one output directory and refreshes ``manifest.json``
there with the config hash, seed, corpus hash and per-stage artifact hashes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .composer import compose_poster
from .layout import Layout, PosterRecord, TokenGrid, dequantize_tokens, quantize_layout, scan_dataset
from .metrics import evaluate
from .nn import ParameterStore
from .plannet import (
    Context,
    DecoderConfig,
    LayoutConstraint,
    LayoutDecoder,
    load_planner,
    make_schedules,
    sample_grids,
    save_planner,
    train_step,
)
from .render import (
    FusionConfig,
    ProductEncoder,
    SpatialFusion,
    assemble_condition,
    encode_product,
    export_conditions,
    fuse_layouts,
    rasterize_masks,
    reposition_product,
    to_render_input,
)
from .synth import SyntheticGrammar, synth_corpus

logger = logging.getLogger(__name__)

PROFILES = ("desk", "paper")
LOCKED = {
    "paper": dict(blocks=4, heads=8, width=512, hidden=2048, T_P=100),
    "desk": dict(blocks=2, width=64, T_P=20),
}
PLAN_BATCH = 64
# Sharper sampling trades diversity for grammar validity on small planners.
SAMPLE_TEMPERATURE = 0.5


class BadInput(Exception):
    """Invalid or missing user input; carries a remediation hint."""

    def __init__(self, message: str, hint: str = ""):
        super().__init__(message)
        self.hint = hint

    def __str__(self) -> str:
        msg = super().__str__()
        return f"{msg} (hint: {self.hint})" if self.hint else msg


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    profile: str = "desk"
    out: str = "ppg_run"
    dataset: str | None = None
    checkpoint: str | None = None
    decoder: DecoderConfig = field(default_factory=DecoderConfig.desk)
    synth_records: int = 256
    train_steps: int = 100
    batch_size: int = 32
    num_samples: int = 1
    constraints: str | None = None
    temperature: float = SAMPLE_TEMPERATURE
    jobs: int = 0
    export_conditions: bool = True

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise BadInput(f"unknown profile {self.profile!r}", f"use one of {', '.join(PROFILES)}")
        for key, want in LOCKED[self.profile].items():
            got = getattr(self.decoder, key)
            if got != want:
                raise BadInput(f"profile {self.profile} locks decoder {key}={want}, config sets {got}",
                               "drop the override or switch profile")
        if not (0 <= self.seed < 2**64):
            raise BadInput(f"seed {self.seed} is not an unsigned 64-bit integer")
        for name in ("synth_records", "batch_size", "num_samples"):
            if getattr(self, name) < 1:
                raise BadInput(f"{name} must be at least 1")
        if self.train_steps < 0 or self.temperature <= 0:
            raise BadInput("train_steps must be >= 0 and temperature > 0")

    @classmethod
    def for_profile(cls, profile: str, **kw) -> "RunConfig":
        dec = DecoderConfig.paper() if profile == "paper" else DecoderConfig.desk()
        if "decoder" in kw and isinstance(kw["decoder"], dict):
            dec = DecoderConfig.from_json({**dec.to_json(), **kw.pop("decoder")})
        return cls(profile=profile, decoder=dec, **kw)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def dataset_dir(self) -> Path:
        return Path(self.dataset) if self.dataset else self.out_dir / "corpus"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.out_dir / "planner.prck"

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig.paper() if self.profile == "paper" else FusionConfig.desk()

    @property
    def workers(self) -> int:
        return self.jobs if self.jobs > 0 else (os.cpu_count() or 1)

    def to_json(self) -> dict:
        d = asdict(self)
        d["decoder"] = self.decoder.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        obj = dict(obj.get("config", obj))  # a manifest is accepted as a config
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise BadInput(f"unknown config keys: {', '.join(sorted(unknown))}")
        profile = obj.pop("profile", "desk")
        return cls.for_profile(profile, **obj)

    def hash(self) -> str:
        # jobs and out only affect where and how fast, not what is produced
        d = self.to_json()
        d.pop("jobs")
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def load_config(path: str | os.PathLike | None, **overrides) -> RunConfig:
    obj: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise BadInput(f"config file {p} not found", "pass an existing JSON file to --config")
        try:
            obj = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise BadInput(f"config file {p} is not valid JSON: {exc}") from exc
        obj = dict(obj.get("config", obj))
    for k, v in overrides.items():
        if v is not None:
            obj[k] = v
    try:
        return RunConfig.from_json(obj)
    except (TypeError, ValueError) as exc:
        raise BadInput(f"invalid config: {exc}") from exc


# --- hashing and manifest -----------------------------------------------------------


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def corpus_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.iterdir()):
        if p.is_file() and p.name != "manifest.json":
            h.update(p.name.encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def layout_hash(obj: dict) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def versions() -> dict:
    import PIL

    return {"ppg": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "pillow": PIL.__version__, "kernels": kernels.BACKEND}


def update_manifest(config: RunConfig, stage: str, artifacts: dict) -> dict:
    path = config.out_dir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.is_file() else {}
    manifest.update(config=config.to_json(), config_hash=config.hash(), seed=config.seed, versions=versions())
    if config.dataset_dir.is_dir():
        manifest["corpus_hash"] = corpus_hash(config.dataset_dir)
    manifest.setdefault("stages", {})[stage] = artifacts
    config.out_dir.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


# --- stages -----------------------------------------------------------------------


def _load_records(config: RunConfig) -> list[PosterRecord]:
    root = config.dataset_dir
    if not root.is_dir():
        raise BadInput(f"dataset directory {root} not found", "run `ppg synth` first or pass a dataset path in the config")
    records, report = scan_dataset(root, jobs=1)
    if not records:
        raise BadInput(f"no loadable records in {root}", f"{len(report.skipped)} skipped; check annotation files")
    return records


def run_synth(config: RunConfig) -> dict:
    t0 = time.perf_counter()
    root = synth_corpus(SyntheticGrammar(), config.synth_records, config.seed, config.dataset_dir)
    return update_manifest(config, "synth", {"records": config.synth_records, "path": str(root),
                                             "seconds": time.perf_counter() - t0})


def train_planner(records, config: RunConfig, steps: int | None = None, log=None):
    """Train a fresh decoder on ``records``; returns ``(model, store, losses)``."""
    cfg = config.decoder
    model = LayoutDecoder(cfg, seed=config.seed % 2**32)
    store = ParameterStore(model.parameters_dict(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    schedules = make_schedules(cfg)
    z0 = np.stack([quantize_layout(r.ground_truth, cfg.vocab).tokens for r in records])
    ctx = Context.collate([r.embeddings() for r in records], cfg.emb_dim)
    rng = np.random.default_rng([config.seed, 0x7A])
    bs = min(config.batch_size, len(records))
    losses = []
    for step in range(config.train_steps if steps is None else steps):
        idx = rng.choice(len(records), bs, replace=False)
        losses.append(train_step(model, store, z0[idx], ctx.take(idx), schedules, rng))
        if log is not None and (step + 1) % 50 == 0:
            log(step + 1, float(np.mean(losses[-50:])))
    return model, store, losses


def run_train(config: RunConfig) -> dict:
    records = _load_records(config)
    t0 = time.perf_counter()
    model, store, losses = train_planner(records, config,
                                         log=lambda s, l: logger.info("step %d loss %.4f", s, l))
    config.out_dir.mkdir(parents=True, exist_ok=True)
    save_planner(config.checkpoint_path, model, store)
    with open(config.out_dir / "train_loss.csv", "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i + 1},{l!r}\n" for i, l in enumerate(losses))
    return update_manifest(config, "train", {
        "steps": len(losses), "final_loss": losses[-1] if losses else None,
        "checkpoint": str(config.checkpoint_path), "checkpoint_hash": file_hash(config.checkpoint_path),
        "seconds": time.perf_counter() - t0,
    })


def plan_layouts(records, model: LayoutDecoder, config: RunConfig,
                 constraint: LayoutConstraint | None = None) -> list[tuple[str, Layout]]:
    """One layout per record and sample; batches are fixed-size so results do not depend on ``jobs``."""
    cfg = model.config
    schedules = make_schedules(cfg)
    jobs = [(r, k) for r in records for k in range(config.num_samples)]
    out = []
    for start in range(0, len(jobs), PLAN_BATCH):
        chunk = jobs[start : start + PLAN_BATCH]
        ctx = Context.collate([r.embeddings() for r, _ in chunk], cfg.emb_dim)
        rng = np.random.default_rng([config.seed, 0x91A, start])
        z = sample_grids(model, ctx, schedules, rng, constraint, temperature=config.temperature)
        for (r, k), grid in zip(chunk, z):
            lay = dequantize_tokens(TokenGrid(grid, 0), cfg.vocab, r.ground_truth.canvas_aspect, r.texts)
            rid = r.id if config.num_samples == 1 else f"{r.id}_s{k}"
            out.append((rid, lay))
    return out


def run_plan(config: RunConfig) -> dict:
    records = _load_records(config)
    if not config.checkpoint_path.is_file():
        raise BadInput(f"checkpoint {config.checkpoint_path} not found", "run `ppg train` first")
    constraint = None
    if config.constraints:
        cpath = Path(config.constraints)
        if not cpath.is_file():
            raise BadInput(f"constraints file {cpath} not found")
        try:
            constraint = LayoutConstraint.load(cpath, config.decoder.vocab)
            constraint.validate(config.decoder.vocab, config.decoder.E_max)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise BadInput(f"invalid constraints file {cpath}: {exc}") from exc
    t0 = time.perf_counter()
    model, _ = load_planner(config.checkpoint_path)
    planned = plan_layouts(records, model, config, constraint)
    items = [{"id": rid, **lay.to_json()} for rid, lay in planned]
    path = config.out_dir / "layouts.json"
    path.write_text(json.dumps({"layouts": items}, indent=1, sort_keys=True))
    return update_manifest(config, "plan", {
        "layouts": str(path), "count": len(items), "layouts_hash": file_hash(path),
        "layout_hashes": {it["id"]: layout_hash(it) for it in items},
        "seconds": time.perf_counter() - t0,
    })


def read_layouts(path: Path) -> list[tuple[str, Layout]]:
    if not path.is_file():
        raise BadInput(f"layout file {path} not found", "run `ppg plan` first")
    try:
        items = json.loads(path.read_text())["layouts"]
        return [(it["id"], Layout.from_json(it)) for it in items]
    except (KeyError, ValueError, TypeError) as exc:
        raise BadInput(f"malformed layout file {path}: {exc}") from exc


def _base_id(rid: str, ids: set[str]) -> str:
    if rid in ids:
        return rid
    head, _, tail = rid.rpartition("_s")
    if head in ids and tail.isdigit():
        return head
    raise BadInput(f"layout id {rid} has no record in the dataset")


def _compose_one(args):
    record, rid, layout, seed, out_dir, fusion, export = args
    texts = [e.text for e in layout.texts]
    if any(t is None for t in texts) or len(texts) > len(record.texts):
        # more planned text boxes than strings: the surplus boxes are left empty
        keep = list(record.texts)
        elements, n = [], 0
        for el in layout.elements:
            if el.category.label == "text":
                if n >= len(keep):
                    continue
                el = replace(el, text=keep[n])
                n += 1
            elements.append(el)
        dropped = len(layout.texts) - n
        layout = Layout(tuple(elements), layout.canvas_aspect)
    else:
        dropped = 0
    cutout = record.cutout()
    result = compose_poster(record, layout, seed, cutout=cutout)
    result.report["dropped_text_boxes"] = dropped
    result.save(out_dir / "posters" / f"{rid}.png", out_dir / "posters" / f"{rid}.json")
    if export:
        fusion_model, product_model = _render_models(fusion, seed)
        z_l = fuse_layouts(rasterize_masks(layout, fusion), fusion_model)
        prod = layout.product
        if prod is not None and prod.width > 0 and prod.height > 0:
            v = to_render_input(reposition_product(record, prod), fusion)
        else:
            w, h = fusion.image_size
            v = np.zeros((h, w, 4), np.uint8)
        z_v = encode_product(v, product_model)
        z_t = np.random.default_rng([seed, 0x2]).standard_normal(z_l.shape).astype(np.float32)
        export_conditions(out_dir / "conditions" / f"{rid}.prck", z_l, z_v, assemble_condition(z_t, z_l, z_v))
    return rid, file_hash(out_dir / "posters" / f"{rid}.png"), result.report["missing_glyphs"], dropped


_RENDER_CACHE: dict = {}


def _render_models(fusion: FusionConfig, seed: int):
    key = fusion
    if key not in _RENDER_CACHE:
        _RENDER_CACHE[key] = (SpatialFusion(fusion, seed=0), ProductEncoder(fusion, seed=1))
    return _RENDER_CACHE[key]


def run_compose(config: RunConfig) -> dict:
    records = {r.id: r for r in _load_records(config)}
    planned = read_layouts(config.out_dir / "layouts.json")
    t0 = time.perf_counter()
    for sub in ("posters", "conditions"):
        (config.out_dir / sub).mkdir(parents=True, exist_ok=True)
    ids = set(records)
    tasks = [
        (records[_base_id(rid, ids)], rid, lay, int(np.random.default_rng([config.seed, i]).integers(2**31)),
         config.out_dir, config.fusion, config.export_conditions)
        for i, (rid, lay) in enumerate(planned)
    ]
    if config.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_compose_one, tasks, chunksize=max(1, len(tasks) // (4 * config.workers))))
    else:
        results = [_compose_one(t) for t in tasks]
    return update_manifest(config, "compose", {
        "posters": {rid: h for rid, h, _, _ in results},
        "missing_glyphs": int(sum(m for _, _, m, _ in results)),
        "dropped_text_boxes": int(sum(d for _, _, _, d in results)),
        "seconds": time.perf_counter() - t0,
    })


def run_eval(config: RunConfig) -> dict:
    records = {r.id: r for r in _load_records(config)}
    planned = read_layouts(config.out_dir / "layouts.json")
    ids = set(records)
    pairs = [(rid, lay, records[_base_id(rid, ids)].ground_truth) for rid, lay in planned]
    report = evaluate(pairs)
    report.write(config.out_dir / "eval.json", config.out_dir / "eval.csv")
    return update_manifest(config, "eval", report.to_json())


STAGES = {"synth": run_synth, "train": run_train, "plan": run_plan, "compose": run_compose, "eval": run_eval}


def run_end_to_end(config: RunConfig, stages=("synth", "train", "plan", "compose", "eval")) -> dict:
    manifest: dict = {}
    for name in stages:
        t0 = time.perf_counter()
        manifest = STAGES[name](config)
        logger.info("%s finished in %.2fs", name, time.perf_counter() - t0)
    return manifest
