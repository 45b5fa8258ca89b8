"""Slot-level simulation of myopic sensing + AT/MT transmission.

The channel sample path and the policy use separate random streams
spawned from one 64-bit seed: stream 0 drives the channels, stream 1 the
memoryless transmission coin.  AT is deterministic given the sensing
history, so two AT runs with the same seed see the same channel path.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .channel_bank import ChannelParams, ChannelPath, ChannelProcess
from .policies import (ATParams, DebtCounter, MTParams, MyopicSensingState, PolicyConfig, at_decide,
                       debt_advance, mt_decide, myopic_next)

MAX_RECORDED_SLOTS = 10_000_000
DEFAULT_CHUNK = 1 << 18

_KIND_CODE = {"at": 0, "at_inf": 1, "mt": 2, "at_le": 3}

TRACE_CSV_HEADER = ("t", "sensed_channel", "sensed_state", "transmitted", "success_bits", "collision", "debt_a")


class SlotRecord(NamedTuple):
    t: int
    sensed_channel: int
    sensed_state: int
    transmitted: bool
    success_bits: float
    collision_channel: Optional[int]
    debt_a: float


@dataclass
class Trace:
    """Per-slot outcome arrays of one run; slot ``t`` lives at index ``t - 1``."""

    params: ChannelParams
    policy: PolicyConfig
    seed: int
    sensed_channel: np.ndarray
    sensed_state: np.ndarray
    transmitted: np.ndarray
    success: np.ndarray
    collision: np.ndarray
    debt_a: np.ndarray  # A_t: bits acknowledged before slot t
    final_debt: float  # A_{n+1}

    @property
    def n(self) -> int:
        return self.success.shape[0]

    @property
    def t(self) -> np.ndarray:
        return np.arange(1, self.n + 1)

    @property
    def success_bits(self) -> np.ndarray:
        return self.success * self.params.bits_per_slot

    def record(self, t: int) -> SlotRecord:
        k = t - 1
        ch = int(self.sensed_channel[k])
        return SlotRecord(t, ch, int(self.sensed_state[k]), bool(self.transmitted[k]),
                          float(self.success_bits[k]), ch if self.collision[k] else None,
                          float(self.debt_a[k]))

    def records(self) -> Iterator[SlotRecord]:
        for t in range(1, self.n + 1):
            yield self.record(t)

    def to_csv(self, path, every: int = 1, limit: Optional[int] = None) -> None:
        """Write one row per slot; ``every`` downsamples, ``limit`` keeps slots ``t <= limit``."""
        if every < 1:
            raise ValueError("every must be at least 1")
        stop = self.n if not limit else min(self.n, int(limit))
        idx = np.arange(0, stop, every)
        c = self.params.bits_per_slot
        fmt = _num_fmt(c)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_CSV_HEADER)
            for k in idx:
                w.writerow((k + 1, int(self.sensed_channel[k]), int(self.sensed_state[k]),
                            int(self.transmitted[k]), fmt(self.success[k] * c),
                            int(self.collision[k]), fmt(self.debt_a[k])))


def _num_fmt(c: float):
    if float(c).is_integer():
        return lambda x: str(int(round(x)))
    return lambda x: repr(float(x))


@njit(cache=True)
def _policy_kernel(start_state, idle_through, order, pos, a, t0, kind, tau, p_tx, c, uniforms,
                   out_ch, out_state, out_tx, out_succ, out_coll, out_debt):
    n_slots = start_state.shape[0]
    n_ch = order.shape[0]
    u = 0
    for k in range(n_slots):
        t = t0 + k
        ch = order[pos]
        s = start_state[k, ch]
        out_ch[k] = ch
        out_state[k] = s
        out_debt[k] = a
        tx = False
        if s == 0:
            if kind == 0:
                tx = a < tau * t
            elif kind == 1:
                tx = True
            elif kind == 2:
                tx = uniforms[u] < p_tx
                u += 1
            else:
                tx = a <= tau * t
        ok = idle_through[k, ch]
        out_tx[k] = tx
        out_succ[k] = tx and ok
        out_coll[k] = tx and not ok
        if tx and ok:
            a += c
        if s == 1:
            pos = (pos + 1) % n_ch
    return pos, a


class _Chunk(NamedTuple):
    ch: np.ndarray
    state: np.ndarray
    tx: np.ndarray
    succ: np.ndarray
    coll: np.ndarray
    debt: np.ndarray


class _PolicyRunner:
    """Holds policy state across chunks of one run."""

    def __init__(self, policy: PolicyConfig, params: ChannelParams, policy_rng: np.random.Generator):
        self.policy = policy
        self.params = params
        self.rng = policy_rng
        order = policy.channel_order or tuple(range(params.n_channels))
        MyopicSensingState(order[0], tuple(order))  # validates the permutation
        if len(order) != params.n_channels:
            raise ValueError("channel_order length must equal n_channels")
        self.order = np.asarray(order, dtype=np.int64)
        self.pos = 0
        self.a = 0.0
        self.t = 1
        self.kind = _KIND_CODE[policy.kind]
        self.tau = policy.tau if policy.kind in ("at", "at_le") else math.inf

    def step(self, path: ChannelPath) -> _Chunk:
        n = path.start_state.shape[0]
        if self.kind == 2:
            uniforms = self.rng.random(n)
        else:
            uniforms = np.empty(0)
        ch = np.empty(n, dtype=np.int16)
        st = np.empty(n, dtype=np.uint8)
        tx = np.empty(n, dtype=np.bool_)
        succ = np.empty(n, dtype=np.bool_)
        coll = np.empty(n, dtype=np.bool_)
        debt = np.empty(n, dtype=np.float64)
        self.pos, self.a = _policy_kernel(path.start_state, path.idle_throughout, self.order, self.pos, self.a,
                                          self.t, self.kind, self.tau, self.policy.p_tx,
                                          float(self.params.bits_per_slot), uniforms, ch, st, tx, succ, coll, debt)
        self.t += n
        return _Chunk(ch, st, tx, succ, coll, debt)


def _streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    ch_ss, pol_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(ch_ss), np.random.default_rng(pol_ss)


def _chunks(policies: Sequence[PolicyConfig], params: ChannelParams, n: int, seed: int,
            initial_state=None, chunk: int = DEFAULT_CHUNK) -> Iterator[List[_Chunk]]:
    if n < 1:
        raise ValueError("horizon must be at least one slot")
    ch_rng, pol_rng = _streams(seed)
    process = ChannelProcess(params, ch_rng, initial_state)
    runners = [_PolicyRunner(p, params, pol_rng) for p in policies]
    done = 0
    while done < n:
        m = min(chunk, n - done)
        path = process.advance(m)
        yield [r.step(path) for r in runners]
        done += m


def _assemble(policy, params, seed, parts: List[_Chunk], final_debt: float) -> Trace:
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    return Trace(params, policy, seed, cat("ch"), cat("state"), cat("tx"), cat("succ"), cat("coll"),
                 cat("debt"), final_debt)


def run(policy: PolicyConfig, params: ChannelParams, n: int, seed: int, initial_state=None,
        chunk: int = DEFAULT_CHUNK) -> Trace:
    """Simulate ``n`` slots and keep every slot record.

    Deterministic in ``(policy, params, n, seed, initial_state)``; the
    channel starts from a stationary draw unless ``initial_state`` is given.
    """
    if n > MAX_RECORDED_SLOTS:
        raise ValueError(f"horizon {n} exceeds {MAX_RECORDED_SLOTS} recorded slots; use run_summary")
    parts = [c for (c,) in _chunks([policy], params, n, seed, initial_state, chunk)]
    last = parts[-1]
    final = last.debt[-1] + (params.bits_per_slot if last.succ[-1] else 0.0)
    return _assemble(policy, params, seed, parts, final)


def run_ensemble(policy: PolicyConfig, params: ChannelParams, n: int, seeds: Sequence[int], **kw) -> List[Trace]:
    return [run(policy, params, n, s, **kw) for s in seeds]


@dataclass
class RunSummary:
    """Streaming statistics of a run too long to record slot by slot."""

    n: int
    burn_in: int
    block_len: int
    successes: int
    collisions: np.ndarray  # per channel, after burn-in
    block_sums: np.ndarray  # success bits per complete block after burn-in


def run_summary(policy: PolicyConfig, params: ChannelParams, n: int, seed: int, burn_in: int = 1000,
                block_len: int = 1000, initial_state=None, chunk: int = DEFAULT_CHUNK) -> RunSummary:
    succ_total = 0
    coll = np.zeros(params.n_channels, dtype=np.int64)
    blocks = []
    carry = np.empty(0)
    offset = 0
    for (c,) in _chunks([policy], params, n, seed, initial_state, chunk):
        m = c.succ.shape[0]
        lo = max(0, burn_in - offset)
        offset += m
        if lo >= m:
            continue
        succ = c.succ[lo:]
        succ_total += int(succ.sum())
        np.add.at(coll, c.ch[lo:][c.coll[lo:]], 1)
        buf = np.concatenate([carry, succ * params.bits_per_slot])
        k = buf.shape[0] // block_len
        if k:
            blocks.append(buf[:k * block_len].reshape(k, block_len).sum(axis=1))
        carry = buf[k * block_len:]
    sums = np.concatenate(blocks) if blocks else np.empty(0)
    return RunSummary(n, burn_in, block_len, succ_total, coll, sums)


# ---------------------------------------------------------------------------
# reference loop

def reference_run(policy: PolicyConfig, params: ChannelParams, path: ChannelPath,
                  policy_rng: Optional[np.random.Generator] = None) -> Trace:
    """Slot loop written directly in terms of the policy state machines.

    Slow; exists to cross-check the compiled kernel on a given channel path.
    """
    n = path.start_state.shape[0]
    sensing = MyopicSensingState.start(params.n_channels, policy.channel_order)
    debt = DebtCounter()
    c = params.bits_per_slot
    at = ATParams(policy.effective_tau) if policy.kind != "mt" else None
    mt = MTParams(policy.p_tx) if policy.kind == "mt" else None
    out = {k: [] for k in ("ch", "state", "tx", "succ", "coll", "debt")}
    for k in range(n):
        ch = sensing.current_channel
        s = int(path.start_state[k, ch])
        tx = at_decide(debt, at, s) if at is not None else mt_decide(mt, s, policy_rng)
        ok = bool(path.idle_throughout[k, ch])
        out["ch"].append(ch)
        out["state"].append(s)
        out["tx"].append(tx)
        out["succ"].append(tx and ok)
        out["coll"].append(tx and not ok)
        out["debt"].append(debt.a)
        debt = debt_advance(debt, c if (tx and ok) else 0.0)
        sensing = myopic_next(sensing, s)
    return Trace(params, policy, -1, np.array(out["ch"]), np.array(out["state"], dtype=np.uint8),
                 np.array(out["tx"]), np.array(out["succ"]), np.array(out["coll"]), np.array(out["debt"]),
                 debt.a)


def channel_path(params: ChannelParams, n: int, seed: int, initial_state=None) -> ChannelPath:
    """The channel sample path that ``run`` with the same seed would see."""
    ch_rng, _ = _streams(seed)
    return ChannelProcess(params, ch_rng, initial_state).advance(n)


# ---------------------------------------------------------------------------
# measures on traces

@dataclass
class CollisionMeasure:
    values: np.ndarray  # scaled average collision per channel
    stderr: np.ndarray  # batch-means standard error per channel


def collision_measure(trace: Trace, params: Optional[ChannelParams] = None, burn_in: int = 0,
                      n_batches: int = 20) -> CollisionMeasure:
    params = params or trace.params
    if trace.n <= burn_in:
        raise ValueError("trace shorter than burn-in")
    busy_mass = 1.0 - params.v0 * params.q
    # a never-busy primary (lambda = 0) has nothing to scale by; report raw rates
    scale = 1.0 / busy_mass if busy_mass > 0 else 1.0
    ch = trace.sensed_channel[burn_in:]
    coll = trace.collision[burn_in:]
    m = coll.shape[0]
    values = np.bincount(ch[coll], minlength=params.n_channels) / m * scale
    stderr = np.zeros(params.n_channels)
    b = m // n_batches
    if n_batches >= 2 and b > 0:
        onehot = np.zeros((n_batches * b, params.n_channels))
        sel = np.flatnonzero(coll[:n_batches * b])
        onehot[sel, ch[sel]] = 1.0
        bm = onehot.reshape(n_batches, b, -1).mean(axis=1) * scale
        stderr = bm.std(axis=0, ddof=1) / math.sqrt(n_batches)
    return CollisionMeasure(values, stderr)


@njit(cache=True)
def _lindley(a, r, q):
    level = 0.0
    q[0] = 0.0
    for k in range(r.shape[0]):
        level = level + a - r[k]
        if level < 0.0:
            level = 0.0
        q[k + 1] = level


@dataclass
class QueueTrace:
    arrival_rate: float
    q: np.ndarray  # q[0] = Q_0 = 0, q[t] = Q_t

    def exceedance(self, xs, burn_in: int = 0) -> np.ndarray:
        """Empirical P(Q > x) over slots after burn-in, for each x."""
        tail = np.sort(self.q[1 + burn_in:])
        return 1.0 - np.searchsorted(tail, np.asarray(xs, dtype=float), side="right") / tail.shape[0]


def queue_sim(trace: Trace, arrival_rate: float) -> QueueTrace:
    if arrival_rate < 0:
        raise ValueError("arrival rate must be non-negative")
    q = np.empty(trace.n + 1)
    _lindley(float(arrival_rate), trace.success_bits.astype(np.float64), q)
    return QueueTrace(float(arrival_rate), q)


# ---------------------------------------------------------------------------
# interval structure of AT

@dataclass
class IntervalDecomposition:
    """Alternating debt (B) and balance (I) runs; slot indices are 1-based.

    The final interval of either kind may be cut off by the horizon; its
    ``*_complete`` flag is then False.
    """

    tau: float
    busy_starts: np.ndarray
    busy_lengths: np.ndarray
    busy_complete: np.ndarray
    idle_starts: np.ndarray
    idle_lengths: np.ndarray
    idle_complete: np.ndarray

    def mean_busy_length(self) -> float:
        done = self.busy_lengths[self.busy_complete]
        return float(done.mean()) if done.size else math.nan


def decompose_intervals(trace: Trace, tau: float) -> IntervalDecomposition:
    if not (0 < tau < math.inf):
        raise ValueError("interval decomposition needs a finite positive tau")
    in_debt = trace.debt_a < tau * trace.t
    if not in_debt[0]:
        raise ValueError("slot 1 must be in debt; trace was not produced by MS-AT")
    change = np.flatnonzero(np.diff(in_debt.astype(np.int8))) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [trace.n]])
    lengths = ends - starts
    complete = ends < trace.n
    debt_run = in_debt[starts]
    return IntervalDecomposition(
        tau,
        starts[debt_run] + 1, lengths[debt_run], complete[debt_run],
        starts[~debt_run] + 1, lengths[~debt_run], complete[~debt_run],
    )


@dataclass
class IntervalCheck:
    boundary_violations: int  # the four boundary inequalities at b_k, i_k
    idle_length_violations: int  # |I_k| >= c / tau
    band_violations: int  # A_{b_k} < tau (b_k - 1) or A_{i_k} >= tau (i_k - 1) + c
    debt_bound_violations: int  # A_{t+1} >= tau t + c

    @property
    def total(self) -> int:
        return (self.boundary_violations + self.idle_length_violations + self.band_violations
                + self.debt_bound_violations)


def check_intervals(trace: Trace, dec: IntervalDecomposition) -> IntervalCheck:
    tau = dec.tau
    c = trace.params.bits_per_slot
    # A indexed by slot: A[0] = 0 by convention, A[t] = debt before slot t, A[n+1] = final
    A = np.concatenate([[0.0], trace.debt_a, [trace.final_debt]])
    b, i = dec.busy_starts, dec.idle_starts
    boundary = (np.count_nonzero(~(A[i] >= i * tau)) + np.count_nonzero(~(A[b] < b * tau))
             + np.count_nonzero(~(A[i - 1] < (i - 1) * tau)) + np.count_nonzero(~(A[b - 1] >= (b - 1) * tau)))
    idle_len = np.count_nonzero(dec.idle_lengths >= c / tau)
    # written with the same float products the policy compares against, so
    # rounding in tau * b - tau cannot fake a violation
    band = np.count_nonzero(A[b] < tau * (b - 1)) + np.count_nonzero(~(A[i] - c < tau * (i - 1)))
    t = trace.t
    bound = np.count_nonzero(~(A[t + 1] - c < tau * t))
    return IntervalCheck(int(boundary), int(idle_len), int(band), int(bound))


# ---------------------------------------------------------------------------
# coupling

def coupled_run(tau_1: float, tau_2: float, params: ChannelParams, n: int, seed: int,
                initial_state=None) -> Tuple[Trace, Trace]:
    """Two AT runs over one channel realisation."""
    if not tau_1 <= tau_2:
        raise ValueError("coupled_run expects tau_1 <= tau_2")
    pols = [PolicyConfig.at(tau_1), PolicyConfig.at(tau_2)]
    if not all(p.deterministic for p in pols):
        raise ValueError("coupling is only defined for deterministic transmission rules")
    parts = ([], [])
    for c1, c2 in _chunks(pols, params, n, seed, initial_state):
        parts[0].append(c1)
        parts[1].append(c2)
    out = []
    for pol, ps in zip(pols, parts):
        last = ps[-1]
        final = last.debt[-1] + (params.bits_per_slot if last.succ[-1] else 0.0)
        out.append(_assemble(pol, params, seed, ps, final))
    return out[0], out[1]


def dominance_violations(lower: Trace, upper: Trace) -> int:
    """Number of prefixes where ``lower`` has strictly more successes than ``upper``."""
    return int(np.count_nonzero(np.cumsum(lower.success) > np.cumsum(upper.success)))
