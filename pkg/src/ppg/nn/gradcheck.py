"""Finite-difference verification of recorded gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

# a power of two keeps x +/- h exact for O(1) inputs
FD_STEP = 2.0**-17
SUBSAMPLE_ABOVE = 10_000
# gradients that vanish identically (e.g. key biases under softmax) are compared absolutely
SCALE_FLOOR = 1e-6


class GradientCheckError(AssertionError):
    pass


def gradient_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    tolerance: float | None = None,
    step: float = FD_STEP,
    seed: int = 0,
    name: str = "op",
    max_coords: int | None = None,
) -> float:
    """Worst relative error between backprop and central differences.

    ``fn`` recomputes the output from ``inputs`` (which must be float64 and
    require grad). The output is contracted with a fixed random cotangent so a
    single backward pass covers every coordinate. The relative error of one
    input is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6)``.
    Inputs above 10^4 coordinates are checked on a random 1% subsample;
    ``max_coords`` caps the per-input sample further for large models.
    """
    rng = np.random.default_rng(seed)
    for x in inputs:
        if x.dtype != np.float64:
            raise GradientCheckError(f"{name}: gradient check needs float64 inputs, got {x.dtype}")
        x.grad = None
    out = fn()
    cot = rng.standard_normal(out.shape)
    out.backward(cot)
    worst = 0.0
    for idx_in, x in enumerate(inputs):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        if not np.isfinite(analytic).all():
            raise GradientCheckError(f"{name}: non-finite gradient for input {idx_in}")
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > SUBSAMPLE_ABOVE:
            coords = np.sort(rng.choice(flat.size, size=max(1, flat.size // 100), replace=False))
        if max_coords is not None and len(coords) > max_coords:
            coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
        numeric = np.empty(len(coords))
        for n, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            plus = fn().data.copy()
            flat[c] = orig - step
            minus = fn().data
            flat[c] = orig
            numeric[n] = np.sum((plus - minus) * cot) / (2 * step)
        a = analytic.reshape(-1)[coords]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), SCALE_FLOOR)
        err = float(np.abs(a - numeric).max(initial=0.0) / scale)
        worst = max(worst, err)
    for x in inputs:
        x.grad = None
    if tolerance is not None and worst > tolerance:
        raise GradientCheckError(f"{name}: relative gradient error {worst:.3e} exceeds {tolerance:.1e}")
    return worst


def directional_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    directions: int = 4,
    tolerance: float | None = None,
    step: float = FD_STEP,
    seed: int = 0,
    name: str = "op",
) -> float:
    """Compare ``<grad, v>`` with a central difference along random joint directions ``v``.

    Every coordinate of every input moves at once, so this covers the whole
    parameter set at the cost of two evaluations per direction.
    """
    rng = np.random.default_rng(seed)
    for x in inputs:
        if x.dtype != np.float64:
            raise GradientCheckError(f"{name}: directional check needs float64 inputs, got {x.dtype}")
        x.grad = None
    out = fn()
    cot = rng.standard_normal(out.shape)
    out.backward(cot)
    grads = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in inputs]
    for x in inputs:
        x.grad = None
    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(x.shape) for x in inputs]
        analytic = float(sum(np.sum(g * v) for g, v in zip(grads, vs)))
        originals = [x.data.copy() for x in inputs]
        for x, v, o in zip(inputs, vs, originals):
            x.data[...] = o + step * v
        plus = float(np.sum(fn().data * cot))
        for x, v, o in zip(inputs, vs, originals):
            x.data[...] = o - step * v
        minus = float(np.sum(fn().data * cot))
        for x, o in zip(inputs, originals):
            x.data[...] = o
        numeric = (plus - minus) / (2 * step)
        scale = max(abs(analytic), abs(numeric), SCALE_FLOOR)
        worst = max(worst, abs(analytic - numeric) / scale)
    if tolerance is not None and worst > tolerance:
        raise GradientCheckError(f"{name}: directional gradient error {worst:.3e} exceeds {tolerance:.1e}")
    return worst
