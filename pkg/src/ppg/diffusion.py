"""Absorbing-state categorical diffusion.

States ``0..K-1`` are ordinary values, state ``K`` is MASK. Matrices are
column-stochastic: column ``j`` of ``Q_t`` is the distribution of ``z_t`` given
``z_{t-1} = j``. The one-step matrix has ``alpha`` on the diagonal, ``beta``
elsewhere in the value block and ``gamma`` in the MASK row; the MASK column is
the unit vector on MASK.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

SCHEDULE_KINDS = ("linear-mask", "cosine-mask")


class ImpossiblePairError(ValueError):
    """Raised when ``q(z_t | z_0) = 0`` so the posterior is undefined."""


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    K: int
    alpha: np.ndarray  # index 0 unused; steps 1..T
    beta: np.ndarray
    gamma: np.ndarray
    cum_alpha: np.ndarray  # index 0..T, cum_alpha[0] = 1
    cum_beta: np.ndarray
    cum_gamma: np.ndarray
    kind: str = "linear-mask"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def mask(self) -> int:
        return self.K

    @property
    def n_states(self) -> int:
        return self.K + 1

    def check_t(self, t: int, lo: int = 1) -> None:
        if not (lo <= t <= self.T):
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "alpha", "beta", "gamma", "cum_alpha", "cum_gamma"])
        for t in range(1, self.T + 1):
            writer.writerow(
                [t] + [repr(float(v)) for v in (self.alpha[t], self.beta[t], self.gamma[t], self.cum_alpha[t], self.cum_gamma[t])]
            )
        return buf.getvalue()


def _cumulative_curves(T: int, kind: str, decay: float) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(T + 1, dtype=np.float64)
    if kind == "linear-mask":
        cum_gamma = t / T
    elif kind == "cosine-mask":
        cum_gamma = 1.0 - np.cos(0.5 * np.pi * t / T)
        cum_gamma[-1] = 1.0
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    cum_alpha = (1.0 - cum_gamma) * decay**t
    return cum_alpha, cum_gamma


def make_schedule(T: int, K: int, kind: str = "linear-mask", decay: float = 0.999) -> DiffusionSchedule:
    """Build a schedule from cumulative curves and back out the per-step probabilities.

    The cumulative MASK mass follows the chosen curve (``t/T`` for linear-mask)
    and the cumulative keep probability is ``(1 - cum_gamma) * decay**t``.
    Writing ``d = alpha - beta``, per-step values follow from
    ``1 - cum_gamma_t = (1 - gamma_t)(1 - cum_gamma_{t-1})`` and
    ``d_bar_t = d_t * d_bar_{t-1}``.
    """
    if T < 1 or K < 2:
        raise ValueError(f"need T >= 1 and K >= 2, got T={T}, K={K}")
    cum_alpha, cum_gamma = _cumulative_curves(T, kind, decay)
    cum_beta = (1.0 - cum_alpha - cum_gamma) / (K - 1)
    cum_beta[0] = 0.0
    alpha = np.zeros(T + 1)
    beta = np.zeros(T + 1)
    gamma = np.zeros(T + 1)
    for t in range(1, T + 1):
        keep_prev = 1.0 - cum_gamma[t - 1]
        gamma[t] = 1.0 - (1.0 - cum_gamma[t]) / keep_prev
        d_prev = cum_alpha[t - 1] - cum_beta[t - 1]
        d = (cum_alpha[t] - cum_beta[t]) / d_prev if d_prev != 0 else 0.0
        beta[t] = ((1.0 - gamma[t]) - d) / K
        alpha[t] = beta[t] + d
        if beta[t] < -1e-15 or alpha[t] < -1e-15 or not (-1e-15 <= gamma[t] <= 1 + 1e-15):
            raise ValueError(
                f"infeasible schedule at t={t}: alpha={alpha[t]:.3g}, beta={beta[t]:.3g}, gamma={gamma[t]:.3g}"
            )
        beta[t] = max(beta[t], 0.0)
        alpha[t] = max(alpha[t], 0.0)
        gamma[t] = min(max(gamma[t], 0.0), 1.0)
    return DiffusionSchedule(T, K, alpha, beta, gamma, cum_alpha, cum_beta, cum_gamma, kind)


def build_matrix(K: int, alpha: float, beta: float, gamma: float) -> np.ndarray:
    q = np.full((K + 1, K + 1), beta, dtype=np.float64)
    np.fill_diagonal(q, alpha)
    q[K, :] = gamma
    q[:, K] = 0.0
    q[K, K] = 1.0
    return q


def transition_matrix(s: DiffusionSchedule, t: int) -> np.ndarray:
    s.check_t(t)
    key = ("Q", t)
    if key not in s._cache:
        q = build_matrix(s.K, s.alpha[t], s.beta[t], s.gamma[t])
        q.setflags(write=False)
        s._cache[key] = q
    return s._cache[key]


def cumulative_matrix(s: DiffusionSchedule, t: int) -> np.ndarray:
    """``Q_t Q_{t-1} ... Q_1``; ``t = 0`` gives the identity."""
    s.check_t(t, lo=0)
    key = ("Qbar", t)
    if key not in s._cache:
        if t == 0:
            out = np.eye(s.K + 1)
        else:
            out = transition_matrix(s, t) @ cumulative_matrix(s, t - 1)
        out.setflags(write=False)
        s._cache[key] = out
    return s._cache[key]


def forward_sample(z0: int, t: int, s: DiffusionSchedule, rng: np.random.Generator) -> int:
    if not (0 <= z0 < s.K):
        raise ValueError(f"z0={z0} must be a non-MASK state in [0, {s.K})")
    return int(forward_sample_many(np.array([z0]), t, s, rng)[0])


def forward_sample_many(z0: np.ndarray, t, s: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Corrupt an array of clean tokens; ``t`` is a scalar or broadcastable array."""
    z0 = np.asarray(z0, dtype=np.int64)
    if z0.size and (z0.min() < 0 or z0.max() >= s.K):
        raise ValueError("forward sampling needs non-MASK clean tokens")
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), z0.shape)
    flat_z, flat_t = z0.ravel(), t_arr.ravel()
    probs = np.empty((flat_z.size, s.K + 1))
    for tv in np.unique(flat_t):
        sel = flat_t == tv
        probs[sel] = cumulative_matrix(s, int(tv))[:, flat_z[sel]].T
    u = rng.random(flat_z.size)
    return kernels.sample_categorical(probs, u).reshape(z0.shape)


def posterior(z_t: int, z0: int, t: int, s: DiffusionSchedule) -> np.ndarray:
    """Exact ``q(z_{t-1} | z_t, z_0)`` over all ``K + 1`` states."""
    if not (2 <= t <= s.T):
        raise ValueError(f"posterior needs 2 <= t <= {s.T}, got {t}")
    if not (0 <= z0 < s.K) or not (0 <= z_t <= s.K):
        raise ValueError(f"bad state pair z_t={z_t}, z0={z0}")
    q_t = transition_matrix(s, t)
    denom = cumulative_matrix(s, t)[z_t, z0]
    if denom <= 0.0:
        raise ImpossiblePairError(f"q(z_t={z_t} | z_0={z0}) = 0 at t={t}")
    num = q_t[z_t, :] * cumulative_matrix(s, t - 1)[:, z0]
    out = num / denom
    return out / out.sum()


def reverse_probs(s: DiffusionSchedule, t: int, z_t: np.ndarray, p0: np.ndarray) -> np.ndarray:
    """``p(z_{t-1} | z_t) = sum_{z0} q(z_{t-1} | z_t, z0) p(z0 | z_t)`` per token.

    ``z_t`` has shape ``(N,)`` and ``p0`` shape ``(N, K)``. Clean states that
    cannot reach ``z_t`` are dropped from ``p0`` before mixing. ``t = 1`` yields
    the predicted clean distribution restricted the same way.
    """
    s.check_t(t)
    z_t = np.asarray(z_t, dtype=np.int64)
    reach = cumulative_matrix(s, t)[z_t, : s.K]  # q(z_t | z0) per token, (N, K)
    valid = reach > 0
    w = np.where(valid, p0 / np.where(valid, reach, 1.0), 0.0)
    mixed = w @ cumulative_matrix(s, t - 1)[:, : s.K].T  # (N, K+1)
    out = transition_matrix(s, t)[z_t, :] * mixed
    total = out.sum(axis=1, keepdims=True)
    bad = total[:, 0] <= 0
    if bad.any():
        # predicted mass sits entirely on unreachable states; fall back to the prior posterior mix
        w_fb = np.where(valid, 1.0 / np.where(valid, reach, 1.0), 0.0)[bad]
        out[bad] = transition_matrix(s, t)[z_t[bad], :] * (w_fb @ cumulative_matrix(s, t - 1)[:, : s.K].T)
        total = out.sum(axis=1, keepdims=True)
        stuck = total[:, 0] <= 0
        if stuck.any():
            # no clean state reaches z_t at all (a clamped token at t = T): keep it
            out[stuck] = 0.0
            out[stuck, z_t[stuck]] = 1.0
            total = out.sum(axis=1, keepdims=True)
    return out / total


def posterior_oracle(z_t: int, z0: int, t: int, s: DiffusionSchedule) -> np.ndarray:
    """Posterior by brute-force enumeration over ``z_{t-1}``.

    Builds every one-step matrix from the schedule's scalars and multiplies
    them with plain loops, independent of the cached matrix path.
    """
    K, T = s.K, s.T
    if K > 8 or T > 12:
        raise ValueError(f"oracle limited to K <= 8, T <= 12 (got K={K}, T={T})")
    if not (2 <= t <= T):
        raise ValueError(f"posterior needs 2 <= t <= {T}, got {t}")
    n = K + 1

    def one_step(step):
        a, b, g = float(s.alpha[step]), float(s.beta[step]), float(s.gamma[step])
        rows = []
        for i in range(n):
            row = []
            for j in range(n):
                if j == K:
                    row.append(1.0 if i == K else 0.0)
                elif i == K:
                    row.append(g)
                else:
                    row.append(a if i == j else b)
            rows.append(row)
        return rows

    def matmul(x, y):
        return [[math.fsum(x[i][k] * y[k][j] for k in range(n)) for j in range(n)] for i in range(n)]

    eye = [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    prefix = [eye]
    for step in range(1, t + 1):
        prefix.append(matmul(one_step(step), prefix[-1]))
    q_step = one_step(t)
    # q(z_t | z0) = sum over z_{t-1} of q(z_t | z_{t-1}) q(z_{t-1} | z0)
    joint = [q_step[z_t][k] * prefix[t - 1][k][z0] for k in range(n)]
    evidence = math.fsum(joint)
    if evidence <= 0.0:
        raise ImpossiblePairError(f"q(z_t={z_t} | z_0={z0}) = 0 at t={t}")
    return np.array([j / evidence for j in joint])
