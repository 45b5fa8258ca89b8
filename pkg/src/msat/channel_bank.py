"""On/off continuous-time Markov channels observed at slot boundaries.

Channel state convention: 0 = idle, 1 = busy.  Rates are in 1/ms and the
slot length in ms.  Idle holding times are Exp(lam), busy holding times
are Exp(mu).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

IDLE = 0
BUSY = 1


@dataclass(frozen=True)
class ChannelParams:
    n_channels: int
    lam: float  # idle -> busy rate
    mu: float  # busy -> idle rate
    slot_len: float
    bits_per_slot: float = 1.0

    def __post_init__(self):
        if int(self.n_channels) != self.n_channels or self.n_channels < 1:
            raise ValueError(f"n_channels must be a positive integer, got {self.n_channels}")
        # lam == 0 is admitted as the degenerate never-busy channel
        if not self.lam >= 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not self.slot_len > 0:
            raise ValueError(f"slot_len must be positive, got {self.slot_len}")
        if not self.bits_per_slot > 0:
            raise ValueError(f"bits_per_slot must be positive, got {self.bits_per_slot}")

    @property
    def v0(self) -> float:
        """Stationary idle probability mu / (lam + mu)."""
        return self.mu / (self.lam + self.mu)

    @property
    def q(self) -> float:
        """P(idle throughout a slot | idle at its start) = exp(-lam T)."""
        return math.exp(-self.lam * self.slot_len)


@dataclass(frozen=True)
class SampledChannel:
    """Slot-sampled view of one channel."""

    p_stay_idle_slot: float
    p_ii: float
    p_bi: float
    v0: float

    @property
    def transition(self) -> np.ndarray:
        """2x2 slot-boundary transition matrix indexed [from, to] with 0 = idle."""
        return np.array([[self.p_ii, 1.0 - self.p_ii], [self.p_bi, 1.0 - self.p_bi]])


def derive_sampled(params: ChannelParams) -> SampledChannel:
    lam, mu, T = params.lam, params.mu, params.slot_len
    v0 = mu / (lam + mu)
    decay = math.exp(-(lam + mu) * T)
    return SampledChannel(
        p_stay_idle_slot=math.exp(-lam * T),
        p_ii=v0 + (1.0 - v0) * decay,
        p_bi=v0 * (1.0 - decay),
        v0=v0,
    )


class SlotChannelOutcome(NamedTuple):
    """Per-channel slot outcomes, one array entry per channel."""

    start_state: np.ndarray  # uint8, 0 idle / 1 busy at the sensing instant
    idle_throughout: np.ndarray  # bool
    end_state: np.ndarray  # uint8, state at the next slot boundary


def _holding(states: np.ndarray, lam: float, mu: float, rng: np.random.Generator) -> np.ndarray:
    """Exponential holding times for channels currently in ``states``."""
    e = rng.standard_exponential(states.shape[0])
    out = np.empty_like(e)
    busy = states == BUSY
    out[busy] = e[busy] / mu
    if lam > 0:
        out[~busy] = e[~busy] / lam
    else:
        out[~busy] = np.inf
    return out


def advance_states(states, lam: float, mu: float, horizon: float, rng: np.random.Generator) -> SlotChannelOutcome:
    """Event-driven advance of independent channels over ``[0, horizon]``.

    Works on an arbitrary number of channels; the first residual holding
    time decides ``idle_throughout``, then holding times alternate until
    the horizon is passed.
    """
    start = np.asarray(states, dtype=np.uint8).copy()
    cur = start.copy()
    elapsed = _holding(cur, lam, mu, rng)
    idle_throughout = (start == IDLE) & (elapsed >= horizon)
    active = np.flatnonzero(elapsed < horizon)
    while active.size:
        cur[active] ^= 1
        elapsed[active] += _holding(cur[active], lam, mu, rng)
        active = active[elapsed[active] < horizon]
    return SlotChannelOutcome(start, idle_throughout, cur)


def step_slot(state, params: ChannelParams, rng: np.random.Generator) -> SlotChannelOutcome:
    state = np.asarray(state)
    if state.shape != (params.n_channels,):
        raise ValueError(f"state must have length {params.n_channels}, got shape {state.shape}")
    return advance_states(state, params.lam, params.mu, params.slot_len, rng)


def stationary_draw(params: ChannelParams, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. stationary occupancy vector (idle with probability v0)."""
    return (rng.random(params.n_channels) >= params.v0).astype(np.uint8)


def belief_update(omega, sensed: Optional[int], observation: Optional[int], sc: SampledChannel) -> np.ndarray:
    """One-slot update of the channel information state.

    ``omega[j]`` is the probability channel j is idle at the next sensing
    instant.  The sensed channel collapses to ``p_ii`` or ``p_bi`` given the
    observation; every other channel is pushed through the two-state
    transition.
    """
    if (sensed is None) != (observation is None):
        raise ValueError("observation must be given iff a channel was sensed")
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0) or np.any(omega > 1):
        raise ValueError("belief components must lie in [0, 1]")
    out = omega * sc.p_ii + (1.0 - omega) * sc.p_bi
    if sensed is not None:
        out[sensed] = sc.p_ii if observation == IDLE else sc.p_bi
    return out


# ---------------------------------------------------------------------------
# long sample paths

class ChannelPath(NamedTuple):
    """Slot-indexed view of a channel sample path, shape (n_slots, N)."""

    start_state: np.ndarray  # uint8
    idle_throughout: np.ndarray  # bool


class ChannelProcess:
    """Exact sample path generator driven by per-channel switch times.

    Each channel owns a generator and a buffer of future switch instants on
    an absolute clock, refilled in fixed-size batches.  The realisation is
    therefore independent of how the horizon is split into ``advance``
    calls: the first n slots of a longer path equal an n-slot path.
    """

    REFILL = 4096  # even, so a refill never changes the parity bookkeeping

    def __init__(self, params: ChannelParams, rng: np.random.Generator, initial_state=None):
        self.params = params
        if initial_state is None:
            state = stationary_draw(params, rng)
        else:
            state = np.asarray(initial_state, dtype=np.uint8)
            if state.shape != (params.n_channels,):
                raise ValueError(f"initial_state must have length {params.n_channels}")
            if np.any(state > BUSY):
                raise ValueError("initial_state entries must be 0 (idle) or 1 (busy)")
        self.state = state.copy()  # state at the current slot boundary
        seeds = rng.integers(0, 2 ** 63, size=params.n_channels)
        self._rngs = [np.random.default_rng(int(x)) for x in seeds]
        self._switches = [np.empty(0) for _ in range(params.n_channels)]
        self._tail = [0.0] * params.n_channels  # last generated switch instant
        self._tail_state = [int(x) for x in self.state]  # state entered after it
        self.slot = 0  # slots generated so far

    def _rate(self, state: int) -> float:
        return self.params.mu if state == BUSY else self.params.lam

    def _refill(self, j: int, until: float) -> None:
        parts = [self._switches[j]]
        while self._tail[j] <= until:
            s = self._tail_state[j]
            e = self._rngs[j].standard_exponential(self.REFILL)
            rates = np.empty(self.REFILL)
            rates[0::2] = self._rate(s)
            rates[1::2] = self._rate(s ^ 1)
            with np.errstate(divide="ignore"):
                gaps = np.where(rates > 0, e / np.where(rates > 0, rates, 1.0), np.inf)
            times = self._tail[j] + np.cumsum(gaps)
            parts.append(times)
            self._tail[j] = float(times[-1])
        self._switches[j] = np.concatenate(parts)

    def advance(self, n_slots: int) -> ChannelPath:
        p = self.params
        bounds = np.arange(self.slot, self.slot + n_slots + 1) * p.slot_len
        start = np.empty((n_slots, p.n_channels), dtype=np.uint8)
        idle = np.empty((n_slots, p.n_channels), dtype=bool)
        for j in range(p.n_channels):
            self._refill(j, bounds[-1])
            sw = self._switches[j]
            cnt = np.searchsorted(sw, bounds, side="left")
            s = (self.state[j] ^ (cnt & 1)).astype(np.uint8)
            start[:, j] = s[:-1]
            idle[:, j] = (s[:-1] == IDLE) & (cnt[1:] == cnt[:-1])
            self.state[j] = s[-1]
            self._switches[j] = sw[cnt[-1]:]
        self.slot += n_slots
        return ChannelPath(start, idle)
