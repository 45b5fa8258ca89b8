import math

import numpy as np
import pytest

from msat.channel_bank import BUSY, IDLE, ChannelParams
from msat.policies import (ATParams, DebtCounter, MTParams, MyopicSensingState, PolicyConfig, at_decide,
                           calibrate_mt, debt_advance, mt_decide, myopic_next)

import oracles

NOMINAL = ChannelParams(**oracles.NOMINAL)


def test_myopic_stays_on_idle_and_wraps_on_busy():
    s = MyopicSensingState.start(3)
    assert myopic_next(s, IDLE).current_channel == 0
    s = MyopicSensingState(2, (0, 1, 2))
    assert myopic_next(s, BUSY).current_channel == 0
    one = MyopicSensingState.start(1)
    assert myopic_next(one, BUSY).current_channel == 0


def test_myopic_follows_custom_order():
    s = MyopicSensingState.start(3, (2, 0, 1))
    assert s.current_channel == 2
    s = myopic_next(s, BUSY)
    assert s.current_channel == 0
    s = myopic_next(myopic_next(s, BUSY), BUSY)
    assert s.current_channel == 2


def test_myopic_rejects_bad_order():
    with pytest.raises(ValueError):
        MyopicSensingState(0, (0, 0, 1))
    with pytest.raises(ValueError):
        MyopicSensingState(3, (0, 1, 2))


def test_at_decisions():
    assert at_decide(DebtCounter(0.0, 1), ATParams(0.3), IDLE)
    assert not at_decide(DebtCounter(0.0, 1), ATParams(0.3), BUSY)
    assert not at_decide(DebtCounter(0.0, 1), ATParams(0.0), IDLE)
    assert at_decide(DebtCounter(1e9, 1), ATParams(math.inf), IDLE)
    # a tie with the target means silence
    assert not at_decide(DebtCounter(1.0, 2), ATParams(0.5), IDLE)
    assert at_decide(DebtCounter(1.0, 3), ATParams(0.5), IDLE)


def test_at_params_validation():
    with pytest.raises(ValueError):
        ATParams(-0.1)
    with pytest.raises(ValueError):
        ATParams(math.nan)
    assert ATParams(math.inf).infinite


def test_mt_decisions():
    rng = np.random.default_rng(0)
    assert mt_decide(MTParams(1.0), IDLE, rng)
    assert not mt_decide(MTParams(0.0), IDLE, rng)
    assert not mt_decide(MTParams(1.0), BUSY, rng)
    with pytest.raises(ValueError):
        MTParams(1.5)


def test_mt_transmit_fraction():
    rng = np.random.default_rng(2)
    loop = sum(mt_decide(MTParams(0.5), IDLE, rng) for _ in range(20_000))
    assert abs(loop / 20_000 - 0.5) <= 3 * math.sqrt(0.25 / 20_000)


def test_debt_advance():
    d = debt_advance(DebtCounter(5.0, 10), 1.0)
    assert (d.a, d.t) == (6.0, 11)
    d = debt_advance(DebtCounter(5.0, 10), 0.0)
    assert (d.a, d.t) == (5.0, 11)
    d = DebtCounter()
    for _ in range(7):
        d = debt_advance(d, 2.5)
    assert d.a == 17.5 and d.t == 8
    with pytest.raises(ValueError):
        debt_advance(DebtCounter(), -1.0)


def test_policy_config():
    assert PolicyConfig.at(math.inf).kind == "at_inf"
    assert PolicyConfig.at(0.3).effective_tau == 0.3
    assert PolicyConfig.at_inf().effective_tau == math.inf
    assert not PolicyConfig.mt(0.4).deterministic
    assert "MT" in PolicyConfig.mt(0.4).describe()
    with pytest.raises(ValueError):
        PolicyConfig("nope")
    with pytest.raises(ValueError):
        PolicyConfig.mt(2.0)


def test_calibrate_loose_gamma_gives_full_probability():
    res = calibrate_mt(10.0, NOMINAL, horizon=20_000, seed=0)
    assert res.params.p_tx == 1.0
    assert res.iterations == 1


def test_calibrate_meets_cap_and_shrinks_with_gamma():
    a = calibrate_mt(0.02, NOMINAL, horizon=50_000, seed=3, tol=1e-3)
    b = calibrate_mt(0.005, NOMINAL, horizon=50_000, seed=3, tol=1e-3)
    assert a.collision_max <= 0.02
    assert b.collision_max <= 0.005
    assert 0 < b.params.p_tx < a.params.p_tx < 1
    # bisection history is monotone on the common path: feasible probes sit below infeasible ones
    feas = [p for p, c in a.history if c <= 0.02]
    infeas = [p for p, c in a.history if c > 0.02]
    assert max(feas) < min(infeas)


def test_calibrate_rejects_nonpositive_gamma():
    with pytest.raises(ValueError):
        calibrate_mt(0.0, NOMINAL)
