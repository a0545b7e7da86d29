"""AdamW, the parameter store and the ``PRCK`` tensor container format."""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

CKPT_MAGIC = b"PRCK"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v.newbyteorder("="): k for k, v in _DTYPES.items()}


def write_tensors(path: str | os.PathLike | io.BufferedIOBase, tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    data = buf.getvalue()
    if hasattr(path, "write"):
        path.write(data)
    else:
        Path(path).write_bytes(data)


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"not a PRCK file (magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported PRCK version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(raw):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + n].decode("utf-8")
        pos += n
        code, rank = struct.unpack_from("<BI", raw, pos)
        pos += 5
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        dt = _DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(dims).copy()
        pos += count * dt.itemsize
        out[name] = arr.astype(dt.newbyteorder("="))
    return out


class ParameterStore:
    """Named parameters plus decoupled-weight-decay Adam state."""

    def __init__(self, params: dict[str, Tensor], lr: float = 5.0e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": p.data for k, p in self.params.items()}
        out.update({f"adam_m/{k}": a for k, a in self.m.items()})
        out.update({f"adam_v/{k}": a for k, a in self.v.items()})
        out["adam/step"] = np.array([self.step_count], dtype=np.int64)
        return out

    def save(self, path, extra: dict[str, np.ndarray] | None = None) -> None:
        tensors = self.state_tensors()
        if extra:
            tensors.update(extra)
        write_tensors(path, tensors)

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            key = f"param/{k}"
            if key not in tensors:
                raise KeyError(f"checkpoint lacks parameter {k!r}")
            if tensors[key].shape != p.data.shape:
                raise ValueError(f"parameter {k!r}: checkpoint shape {tensors[key].shape} != {p.data.shape}")
            p.data = tensors[key].astype(p.data.dtype, copy=True)
            if f"adam_m/{k}" in tensors:
                self.m[k] = tensors[f"adam_m/{k}"].astype(p.data.dtype, copy=True)
                self.v[k] = tensors[f"adam_v/{k}"].astype(p.data.dtype, copy=True)
        if "adam/step" in tensors:
            self.step_count = int(tensors["adam/step"][0])

    def load(self, path) -> dict[str, np.ndarray]:
        tensors = read_tensors(path)
        self.load_state(tensors)
        return tensors
