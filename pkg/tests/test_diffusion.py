import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppg import diffusion as D


@pytest.mark.parametrize("kind", D.SCHEDULE_KINDS)
@pytest.mark.parametrize("K,T", [(2, 4), (5, 10), (64, 20), (4, 100)])
def test_cumulative_matrix_is_column_stochastic(kind, K, T):
    s = D.make_schedule(T, K, kind)
    for t in range(T + 1):
        q = D.cumulative_matrix(s, t)
        assert np.abs(q.sum(axis=0) - 1).max() < 1e-12
        assert q.min() >= 0


@pytest.mark.parametrize("K,T", [(3, 10), (64, 20)])
def test_cumulative_curves_match_closed_form(K, T):
    s = D.make_schedule(T, K)
    for t in range(T + 1):
        q = D.cumulative_matrix(s, t)
        want_alpha = (1 - t / T) * 0.999**t
        assert q[0, 0] == pytest.approx(want_alpha, abs=1e-12)
        assert q[K, 0] == pytest.approx(t / T, abs=1e-12)
        assert q[1, 0] == pytest.approx((1 - want_alpha - t / T) / (K - 1), abs=1e-12)


def test_mask_column_is_absorbing():
    s = D.make_schedule(10, 5)
    for t in range(1, 11):
        col = D.transition_matrix(s, t)[:, s.mask]
        assert col[s.mask] == 1.0 and col[: s.mask].sum() == 0.0


def test_matrices_are_read_only():
    s = D.make_schedule(4, 3)
    with pytest.raises(ValueError):
        D.transition_matrix(s, 2)[0, 0] = 0.5


def test_invalid_arguments():
    with pytest.raises(ValueError):
        D.make_schedule(0, 4)
    with pytest.raises(ValueError):
        D.make_schedule(4, 1)
    with pytest.raises(ValueError, match="unknown schedule"):
        D.make_schedule(4, 4, "zigzag")
    s = D.make_schedule(4, 3)
    with pytest.raises(ValueError):
        D.transition_matrix(s, 5)
    with pytest.raises(ValueError):
        D.posterior(0, 0, 1, s)
    with pytest.raises(ValueError):
        D.forward_sample(s.mask, 2, s, np.random.default_rng(0))


def test_infeasible_decay_is_rejected():
    with pytest.raises(ValueError, match="infeasible"):
        D.make_schedule(10, 3, decay=1.5)


@pytest.mark.parametrize("K,T", [(2, 4), (3, 10), (5, 4)])
def test_posterior_matches_enumeration(K, T):
    s = D.make_schedule(T, K)
    for t in range(2, T + 1):
        for z0 in range(K):
            for zt in range(K + 1):
                if D.cumulative_matrix(s, t)[zt, z0] == 0:
                    with pytest.raises(D.ImpossiblePairError):
                        D.posterior(zt, z0, t, s)
                    continue
                got = D.posterior(zt, z0, t, s)
                want = D.posterior_oracle(zt, z0, t, s)
                assert np.abs(got - want).max() < 1e-10


def test_posterior_from_mask_is_spread_between_mask_and_clean():
    s = D.make_schedule(10, 4)
    p = D.posterior(s.mask, 1, 5, s)
    # from MASK at t=5 the previous state is MASK with probability (t-1)/t under linear masking
    assert p[s.mask] == pytest.approx(4 / 5, rel=1e-9)
    assert p.sum() == pytest.approx(1.0)


def test_impossible_pair_raises():
    s = D.make_schedule(10, 4, decay=1.0)  # no uniform replacement: a visible z_t must equal z0
    with pytest.raises(D.ImpossiblePairError):
        D.posterior(2, 1, 3, s)


def test_forward_sample_absorbs_at_T():
    s = D.make_schedule(20, 64)
    z = D.forward_sample_many(np.zeros(5000, np.int64), 20, s, np.random.default_rng(0))
    assert (z == s.mask).all()


def test_forward_sample_frequencies_follow_cumulative_matrix():
    s = D.make_schedule(10, 3)
    n, t = 60000, 6
    z = D.forward_sample_many(np.full(n, 1), t, s, np.random.default_rng(3))
    expect = D.cumulative_matrix(s, t)[:, 1]
    freq = np.bincount(z, minlength=4) / n
    sigma = np.sqrt(expect * (1 - expect) / n)
    assert (np.abs(freq - expect) <= 5 * sigma + 1e-12).all()


def test_reverse_probs_reduces_to_posterior_for_one_hot():
    s = D.make_schedule(10, 5)
    for t in (2, 6, 10):
        for z0 in range(5):
            for zt in (z0, s.mask):
                if D.cumulative_matrix(s, t)[zt, z0] == 0:
                    continue
                p0 = np.eye(5)[[z0]]
                got = D.reverse_probs(s, t, np.array([zt]), p0)[0]
                assert np.allclose(got, D.posterior(zt, z0, t, s), atol=1e-12)


def test_reverse_probs_at_t1_never_returns_mask():
    s = D.make_schedule(10, 5)
    p0 = np.random.default_rng(0).dirichlet(np.ones(5), size=7)
    out = D.reverse_probs(s, 1, np.full(7, s.mask), p0)
    assert np.allclose(out[:, s.mask], 0.0)
    assert np.allclose(out.sum(axis=1), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.integers(2, 30), st.sampled_from(D.SCHEDULE_KINDS), st.data())
def test_reverse_probs_is_a_distribution(K, T, kind, data):
    s = D.make_schedule(T, K, kind)
    t = data.draw(st.integers(1, T))
    zt = np.array(data.draw(st.lists(st.integers(0, K), min_size=1, max_size=6)))
    p0 = np.random.default_rng(data.draw(st.integers(0, 99))).dirichlet(np.ones(K), size=len(zt))
    out = D.reverse_probs(s, t, zt, p0)
    if t == T:
        # visible tokens cannot occur at T; they are kept as they are
        assert np.allclose(out[zt < K], np.eye(K + 1)[zt[zt < K]])
    assert np.isfinite(out).all() and (out >= 0).all()
    assert np.allclose(out.sum(axis=1), 1.0)


def test_schedule_csv_round_trip():
    s = D.make_schedule(8, 4)
    rows = list(csv.DictReader(io.StringIO(s.to_csv())))
    assert [int(r["t"]) for r in rows] == list(range(1, 9))
    for r in rows:
        t = int(r["t"])
        assert float(r["cum_gamma"]) == s.cum_gamma[t]
        assert float(r["alpha"]) == s.alpha[t]
        assert math.isclose(float(r["alpha"]) + 3 * float(r["beta"]) + float(r["gamma"]), 1.0, abs_tol=1e-12)
