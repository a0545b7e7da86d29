"""Compare the compiled kernels with the pure-Python fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is timed on the
same inputs through both backends and the outputs are checked for agreement.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from ppg import _kernels_py

try:
    from ppg import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(rng: np.random.Generator) -> dict:
    def boxes(n):
        xy = rng.uniform(0, 0.8, (n, 2))
        wh = rng.uniform(0.02, 0.2, (n, 2))
        return np.hstack([xy, xy + wh])

    probs = rng.dirichlet(np.ones(65), size=2048)
    raster_boxes = rng.integers(0, 96, (16, 2))
    raster_boxes = np.hstack([raster_boxes, raster_boxes + rng.integers(1, 32, (16, 2))]).astype(np.int64)
    return {
        "assign_max 16x16": ("assign_max", (rng.random((16, 16)),)),
        "assign_max 64x64": ("assign_max", (rng.random((64, 64)),)),
        "pairwise_iou 64x64": ("pairwise_iou", (boxes(64), boxes(64))),
        "sample_categorical 2048x65": ("sample_categorical", (probs, rng.random(2048))),
        "union_area 32": ("union_area", (boxes(32),)),
        "fill_boxes 16 on 192x128": ("fill_boxes", (None, raster_boxes, 1)),
    }


def run(fn_name, args, module):
    fn = getattr(module, fn_name)
    if fn_name == "fill_boxes":
        raster = np.zeros((192, 128), np.uint8)
        fn(raster, *args[1:])
        return raster
    return fn(*args)


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=0, atol=1e-12)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    backends = [("python", _kernels_py)] + ([("cython", _kernels)] if _kernels is not None else [])
    print(f"{'kernel':32s}" + "".join(f"{name:>14s}" for name, _ in backends) + "   speedup  agree")
    for label, (fn_name, fargs) in cases(np.random.default_rng(args.seed)).items():
        times, outs = [], []
        for _, mod in backends:
            number = 3
            t = min(timeit.repeat(lambda: run(fn_name, fargs, mod), number=number, repeat=args.repeat)) / number
            times.append(t)
            outs.append(run(fn_name, fargs, mod))
        speed = f"{times[0] / times[1]:8.1f}x" if len(times) > 1 else "       -"
        agree = same(outs[0], outs[1]) if len(outs) > 1 else True
        print(f"{label:32s}" + "".join(f"{t * 1e3:12.3f}ms" for t in times) + f"  {speed}  {agree}")


if __name__ == "__main__":
    main()
