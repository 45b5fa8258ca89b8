"""Sensing and transmission policies.

Myopic sensing (stay on idle, advance cyclically on busy) paired with
either the debt-based adaptive transmission rule (AT) or the memoryless
transmission rule (MT).  Channel indices are 0-based.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .channel_bank import BUSY, IDLE, ChannelParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MyopicSensingState:
    current_channel: int
    channel_order: Tuple[int, ...]

    def __post_init__(self):
        if self.current_channel not in self.channel_order:
            raise ValueError("current_channel must belong to channel_order")
        if sorted(self.channel_order) != list(range(len(self.channel_order))):
            raise ValueError("channel_order must be a permutation of 0..N-1")

    @classmethod
    def start(cls, n_channels: int, channel_order=None) -> "MyopicSensingState":
        order = tuple(range(n_channels)) if channel_order is None else tuple(channel_order)
        return cls(order[0], order)


def myopic_next(state: MyopicSensingState, last_sensed: int) -> MyopicSensingState:
    if last_sensed == IDLE:
        return state
    order = state.channel_order
    k = order.index(state.current_channel)
    return replace(state, current_channel=order[(k + 1) % len(order)])


@dataclass(frozen=True)
class ATParams:
    """Adaptive transmission target ``tau`` in bits/slot (``inf`` = always transmit)."""

    tau: float

    def __post_init__(self):
        if math.isnan(self.tau) or self.tau < 0:
            raise ValueError(f"tau must be non-negative, got {self.tau}")

    @property
    def infinite(self) -> bool:
        return math.isinf(self.tau)


@dataclass(frozen=True)
class MTParams:
    p_tx: float

    def __post_init__(self):
        if not 0.0 <= self.p_tx <= 1.0:
            raise ValueError(f"p_tx must lie in [0, 1], got {self.p_tx}")


@dataclass(frozen=True)
class DebtCounter:
    """Successful bits acknowledged before slot ``t`` (``a``), and ``t`` itself."""

    a: float = 0.0
    t: int = 1


def at_decide(debt: DebtCounter, params: ATParams, sensed: int) -> bool:
    if sensed == BUSY:
        return False
    if params.infinite:
        return True
    # strict: a tie with the target means balance, stay silent
    return debt.a < params.tau * debt.t


def mt_decide(params: MTParams, sensed: int, rng: np.random.Generator) -> bool:
    if sensed == BUSY:
        return False
    return bool(rng.random() < params.p_tx)


def debt_advance(debt: DebtCounter, success_bits: float) -> DebtCounter:
    if success_bits < 0:
        raise ValueError("success_bits must be non-negative")
    return DebtCounter(debt.a + success_bits, debt.t + 1)


@dataclass(frozen=True)
class PolicyConfig:
    """Which transmission rule runs on top of myopic sensing.

    ``kind`` is one of ``"at"``, ``"mt"``, ``"at_inf"``.  ``"at_le"`` is AT
    with the comparison flipped to ``<=``; it exists only as a negative
    control for the interval checks.
    """

    kind: str
    tau: float = math.inf
    p_tx: float = 1.0
    channel_order: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in ("at", "mt", "at_inf", "at_le"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind in ("at", "at_le"):
            ATParams(self.tau)
        if self.kind == "mt":
            MTParams(self.p_tx)

    @classmethod
    def at(cls, tau: float, channel_order=None) -> "PolicyConfig":
        return cls("at_inf" if math.isinf(tau) else "at", tau=tau, channel_order=channel_order)

    @classmethod
    def at_inf(cls, channel_order=None) -> "PolicyConfig":
        return cls("at_inf", channel_order=channel_order)

    @classmethod
    def mt(cls, p_tx: float, channel_order=None) -> "PolicyConfig":
        return cls("mt", p_tx=p_tx, channel_order=channel_order)

    @property
    def deterministic(self) -> bool:
        return self.kind != "mt"

    @property
    def effective_tau(self) -> float:
        return math.inf if self.kind == "at_inf" else self.tau

    def describe(self) -> str:
        if self.kind == "mt":
            return f"MS-MT(p_tx={self.p_tx:g})"
        if self.kind == "at_inf":
            return "MS-AT(inf)"
        return f"MS-AT(tau={self.tau:g})"


@dataclass
class CalibrationResult:
    params: MTParams
    collision_max: float
    iterations: int
    history: list = field(default_factory=list)


def calibrate_mt(gamma: float, params: ChannelParams, horizon: int = 200_000, seed: int = 0,
                 tol: float = 1e-3, burn_in: int = 1000) -> CalibrationResult:
    """Largest memoryless transmission probability meeting the collision cap.

    Bisection on ``p_tx`` with every probe simulated on the same seed, so
    the per-channel collision counts are pathwise monotone in ``p_tx``.
    """
    from .simulator import collision_measure, run

    if not gamma > 0:
        raise ValueError("gamma must be positive")

    def worst(p):
        tr = run(PolicyConfig.mt(p), params, horizon, seed)
        return float(np.max(collision_measure(tr, params, burn_in=burn_in).values))

    history = []
    c1 = worst(1.0)
    history.append((1.0, c1))
    if c1 <= gamma:
        return CalibrationResult(MTParams(1.0), c1, 1, history)
    lo, hi = 0.0, 1.0
    c_lo = 0.0
    it = 1
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        c = worst(mid)
        history.append((mid, c))
        it += 1
        if c <= gamma:
            lo, c_lo = mid, c
        else:
            hi = mid
    if lo == 0.0:
        c_small = worst(tol)
        if c_small > gamma:
            raise RuntimeError(
                f"no feasible p_tx found: collision {c_small:.4g} at p_tx={tol} exceeds gamma={gamma}")
    log.debug("calibrated p_tx=%.4f after %d probes", lo, it)
    return CalibrationResult(MTParams(lo), c_lo, it, history)
