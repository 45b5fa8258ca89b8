import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from msat.channel_bank import (BUSY, IDLE, ChannelParams, ChannelProcess, advance_states, belief_update,
                               derive_sampled, stationary_draw, step_slot)

import oracles

NOMINAL = ChannelParams(**oracles.NOMINAL)

rates = st.floats(0.01, 5.0)
slots = st.floats(0.01, 2.0)


def test_nominal_sampled_values():
    sc = derive_sampled(NOMINAL)
    assert sc.v0 == pytest.approx(0.6, abs=1e-15)
    assert sc.p_stay_idle_slot == pytest.approx(math.exp(-1 / 12), abs=1e-15)
    assert sc.p_stay_idle_slot == pytest.approx(0.92004, abs=5e-6)


@settings(max_examples=60, deadline=None)
@given(rates, rates, slots)
def test_transition_matches_matrix_exponential(lam, mu, T):
    sc = derive_sampled(ChannelParams(1, lam, mu, T))
    P = oracles.sampled_transition(lam, mu, T)
    assert sc.p_ii == pytest.approx(P[0, 0], abs=1e-12)
    assert sc.p_bi == pytest.approx(P[1, 0], abs=1e-12)
    np.testing.assert_allclose(sc.transition, P, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(rates, rates, slots)
def test_busy_to_idle_below_idle_to_idle(lam, mu, T):
    sc = derive_sampled(ChannelParams(2, lam, mu, T))
    assert sc.p_bi < sc.p_ii
    assert sc.p_stay_idle_slot <= sc.p_ii


def test_short_slot_limit():
    sc = derive_sampled(ChannelParams(2, 1 / 3, 1 / 2, 1e-9))
    assert sc.p_ii == pytest.approx(1.0, abs=1e-8)
    assert sc.p_bi == pytest.approx(0.0, abs=1e-8)
    assert sc.p_stay_idle_slot == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("kw", [dict(mu=0.0), dict(slot_len=0.0), dict(lam=-1.0), dict(n_channels=0),
                                dict(bits_per_slot=0.0)])
def test_invalid_params(kw):
    base = dict(oracles.NOMINAL)
    base.update(kw)
    with pytest.raises(ValueError):
        ChannelParams(**base)


def test_never_busy_channel_stays_idle():
    rng = np.random.default_rng(0)
    p = ChannelParams(3, 0.0, 0.5, 0.25)
    for _ in range(100):
        out = step_slot(np.zeros(3, dtype=np.uint8), p, rng)
        assert out.idle_throughout.all()
        assert (out.end_state == IDLE).all()


def test_busy_start_never_idle_throughout():
    rng = np.random.default_rng(1)
    out = advance_states(np.ones(10_000, dtype=np.uint8), 1 / 3, 1 / 2, 0.25, rng)
    assert not out.idle_throughout.any()


def test_idle_throughout_frequency():
    rng = np.random.default_rng(2)
    n = 1_000_000
    out = advance_states(np.zeros(n, dtype=np.uint8), 1 / 3, 1 / 2, 0.25, rng)
    q = math.exp(-1 / 12)
    assert abs(out.idle_throughout.mean() - q) <= 3 * math.sqrt(q * (1 - q) / n)


def test_end_state_law_chi_square():
    rng = np.random.default_rng(3)
    n = 200_000
    P = oracles.sampled_transition(1 / 3, 1 / 2, 0.25)
    for start in (IDLE, BUSY):
        out = advance_states(np.full(n, start, dtype=np.uint8), 1 / 3, 1 / 2, 0.25, rng)
        counts = np.bincount(out.end_state, minlength=2)
        assert stats.chisquare(counts, n * P[start]).pvalue > 1e-3


def test_step_slot_checks_length():
    with pytest.raises(ValueError):
        step_slot(np.zeros(3, dtype=np.uint8), NOMINAL, np.random.default_rng(0))


def test_stationary_draw():
    rng = np.random.default_rng(4)
    assert stationary_draw(NOMINAL, rng).shape == (2,)
    assert stationary_draw(ChannelParams(3, 1 / 3, 1 / 2, 0.25), rng).shape == (3,)
    big = ChannelParams(500_000, 1 / 3, 1 / 2, 0.25)
    idle = (stationary_draw(big, rng) == IDLE).mean()
    assert abs(idle - 0.6) <= 3 * math.sqrt(0.24 / 500_000)
    fast = ChannelParams(1000, 1e-9, 1e6, 0.25)
    assert (stationary_draw(fast, rng) == IDLE).all()


def test_process_marginals_and_autocorrelation():
    """Slot-start states of the event-driven process follow the sampled chain."""
    p = ChannelParams(2, 1 / 3, 1 / 2, 0.25)
    proc = ChannelProcess(p, np.random.default_rng(5))
    path = proc.advance(1_000_000)
    s = path.start_state[:, 0]
    assert abs((s == IDLE).mean() - 0.6) < 0.01
    P = oracles.sampled_transition(1 / 3, 1 / 2, 0.25)
    prev, nxt = s[:-1], s[1:]
    emp_ii = np.mean(nxt[prev == IDLE] == IDLE)
    assert emp_ii == pytest.approx(P[0, 0], abs=0.003)
    # idle throughout only ever happens from an idle start, with probability q
    it = path.idle_throughout[:, 0]
    assert not it[s == BUSY].any()
    assert it[s == IDLE].mean() == pytest.approx(math.exp(-1 / 12), abs=0.002)


def test_process_is_deterministic_per_seed():
    p = ChannelParams(3, 0.7, 0.4, 0.5)
    a = ChannelProcess(p, np.random.default_rng(6), initial_state=[0, 1, 0])
    b = ChannelProcess(p, np.random.default_rng(6), initial_state=[0, 1, 0])
    for k in (1, 999, 3000):
        x, y = a.advance(k), b.advance(k)
        np.testing.assert_array_equal(x.start_state, y.start_state)
        np.testing.assert_array_equal(x.idle_throughout, y.idle_throughout)
    np.testing.assert_array_equal(a.state, b.state)


def test_process_is_prefix_consistent():
    p = ChannelParams(3, 0.7, 0.4, 0.5)
    a = ChannelProcess(p, np.random.default_rng(6), initial_state=[0, 1, 0])
    b = ChannelProcess(p, np.random.default_rng(6), initial_state=[0, 1, 0])
    whole = a.advance(50_000)
    parts = [b.advance(k) for k in (1, 999, 30_000, 19_000)]
    np.testing.assert_array_equal(whole.start_state, np.concatenate([x.start_state for x in parts]))
    np.testing.assert_array_equal(whole.idle_throughout, np.concatenate([x.idle_throughout for x in parts]))


def test_process_respects_initial_state():
    p = ChannelParams(3, 0.7, 0.4, 0.5)
    path = ChannelProcess(p, np.random.default_rng(7), initial_state=[1, 0, 1]).advance(1)
    np.testing.assert_array_equal(path.start_state[0], [1, 0, 1])
    with pytest.raises(ValueError):
        ChannelProcess(p, np.random.default_rng(7), initial_state=[1, 0])


# ---------------------------------------------------------------------------
# belief update

def test_belief_fixed_point_and_sensed_components():
    sc = derive_sampled(NOMINAL)
    out = belief_update([sc.v0, sc.v0], None, None, sc)
    np.testing.assert_allclose(out, [sc.v0, sc.v0], atol=1e-15)
    assert belief_update([0.3, 0.9], 0, IDLE, sc)[0] == sc.p_ii
    assert belief_update([0.3, 0.9], 1, BUSY, sc)[1] == sc.p_bi
    assert belief_update([1.0, 0.2], 1, BUSY, sc)[0] == pytest.approx(sc.p_ii, abs=1e-15)


def test_belief_rejects_bad_input():
    sc = derive_sampled(NOMINAL)
    with pytest.raises(ValueError):
        belief_update([0.2, 1.2], None, None, sc)
    with pytest.raises(ValueError):
        belief_update([0.2, 0.3], 0, None, sc)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6), rates, rates, slots, st.data())
def test_belief_stays_in_band(omega, lam, mu, T, data):
    sc = derive_sampled(ChannelParams(len(omega), lam, mu, T))
    a = data.draw(st.integers(0, len(omega) - 1))
    obs = data.draw(st.sampled_from([IDLE, BUSY]))
    out = belief_update(omega, a, obs, sc)
    lo, hi = sc.p_bi, sc.p_ii
    assert np.all(out >= lo - 1e-15) and np.all(out <= hi + 1e-15)
    # unobserved channels move towards v0
    for j, w in enumerate(omega):
        if j != a:
            assert abs(out[j] - sc.v0) <= abs(w - sc.v0) + 1e-15


def test_belief_converges_geometrically():
    sc = derive_sampled(NOMINAL)
    w = np.array([0.0, 1.0])
    rate = sc.p_ii - sc.p_bi
    for k in range(1, 30):
        w = belief_update(w, None, None, sc)
        assert np.max(np.abs(w - sc.v0)) <= rate ** k + 1e-15
