"""Finite-horizon multiplicative DP over channel beliefs.

Objective: minimise ``E exp(theta * sum_k X_k)`` (theta < 0) over sensing
policies, where ``X_k`` is 1 when the sensed channel is idle.  A belief
``omega`` holds, per channel, the probability of being idle at the next
sensing instant.  Beliefs are plain tuples so they can key the memo.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .channel_bank import BUSY, IDLE, SampledChannel, belief_update

Belief = Tuple[float, ...]

ACTION_ATOL = 1e-13
DEFAULT_MEMO_BUDGET = 2_000_000
ENUMERATION_CAP = 20_000_000


class MemoBudgetExceeded(RuntimeError):
    pass


def _next(omega: Belief, a: int, obs: int, sc: SampledChannel) -> Belief:
    return tuple(belief_update(omega, a, obs, sc).tolist())


def myopic_action(omega: Belief) -> int:
    """Index of the largest belief, lowest index on ties."""
    return int(np.argmax(omega))


@dataclass
class DpSolution:
    horizon: int
    theta: float
    start: Belief
    value: float  # V_1(start)
    values: Dict[Tuple[int, Belief], float] = field(repr=False)
    optimal_actions: Dict[Tuple[int, Belief], FrozenSet[int]] = field(repr=False)


def solve_dp(start: Sequence[float], K: int, theta: float, sc: SampledChannel,
             memo_budget: int = DEFAULT_MEMO_BUDGET, atol: float = ACTION_ATOL) -> DpSolution:
    """Backward multiplicative recursion over every belief reachable from ``start``."""
    if not theta < 0:
        raise ValueError("theta must be negative")
    if K < 1:
        raise ValueError("horizon must be at least 1")
    start = tuple(float(w) for w in start)
    if any(not 0.0 <= w <= 1.0 for w in start):
        raise ValueError("beliefs must lie in [0, 1]")
    e = math.exp(theta)
    n = len(start)
    values: Dict[Tuple[int, Belief], float] = {}
    actions: Dict[Tuple[int, Belief], FrozenSet[int]] = {}

    def V(t: int, omega: Belief) -> float:
        key = (t, omega)
        hit = values.get(key)
        if hit is not None:
            return hit
        if len(values) >= memo_budget:
            raise MemoBudgetExceeded(f"more than {memo_budget} memoised beliefs")
        q = np.empty(n)
        for a in range(n):
            w = omega[a]
            if t == K:
                q[a] = w * e + (1.0 - w)
            else:
                q[a] = (w * e * V(t + 1, _next(omega, a, IDLE, sc))
                        + (1.0 - w) * V(t + 1, _next(omega, a, BUSY, sc)))
        best = float(q.min())
        values[key] = best
        actions[key] = frozenset(int(a) for a in np.flatnonzero(q <= best + atol))
        return best

    v1 = V(1, start)
    return DpSolution(K, theta, start, v1, values, actions)


def myopic_value(start: Sequence[float], K: int, theta: float, sc: SampledChannel) -> float:
    """Exact value of always sensing the largest belief."""
    e = math.exp(theta)
    memo: Dict[Tuple[int, Belief], float] = {}

    def W(t: int, omega: Belief) -> float:
        key = (t, omega)
        if key in memo:
            return memo[key]
        a = myopic_action(omega)
        w = omega[a]
        if t == K:
            val = w * e + (1.0 - w)
        else:
            val = (w * e * W(t + 1, _next(omega, a, IDLE, sc))
                   + (1.0 - w) * W(t + 1, _next(omega, a, BUSY, sc)))
        memo[key] = val
        return val

    return W(1, tuple(float(w) for w in start))


@dataclass
class MyopicReport:
    n_channels: int
    horizon: int
    theta: float
    dp_value: float
    myopic_value: float
    max_gap: float
    violations: int  # reachable (t, omega) whose myopic action is not optimal
    first_violation: Optional[Tuple[int, Belief]] = None

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.max_gap <= 1e-12


def verify_myopic(start: Sequence[float], K: int, theta: float, sc: SampledChannel,
                  memo_budget: int = DEFAULT_MEMO_BUDGET) -> MyopicReport:
    sol = solve_dp(start, K, theta, sc, memo_budget)
    mv = myopic_value(start, K, theta, sc)
    violations = 0
    first = None
    # set membership, so equal beliefs never produce false alarms
    for key, acts in sol.optimal_actions.items():
        if myopic_action(key[1]) not in acts:
            violations += 1
            if first is None:
                first = key
    return MyopicReport(len(sol.start), K, theta, sol.value, mv, abs(mv - sol.value), violations, first)


# ---------------------------------------------------------------------------
# brute force over policy trees

def _history_weights(start: Sequence[float], K: int, theta: float, sc: SampledChannel) -> np.ndarray:
    """``c[a1, o1, ..., aK, oK]`` = P(o | a) * exp(theta * #idle observations).

    Computed by propagating the joint law of the hidden occupancy vector,
    without any belief arithmetic.
    """
    n = len(start)
    P = sc.transition
    states = np.array(list(itertools.product((IDLE, BUSY), repeat=n)), dtype=np.int8)
    p0 = np.prod(np.where(states == IDLE, np.asarray(start), 1.0 - np.asarray(start)), axis=1)
    # joint slot-to-slot transition of the whole vector
    T = np.ones((len(states), len(states)))
    for j in range(n):
        T *= P[states[:, j][:, None], states[:, j][None, :]]
    e = math.exp(theta)
    c = np.zeros((n, 2) * K)

    def walk(depth: int, dist: np.ndarray, weight: float, prefix: tuple):
        if depth == K:
            c[prefix] = weight * dist.sum()
            return
        for a in range(n):
            for o in (IDLE, BUSY):
                part = dist * (states[:, a] == o)
                nxt = part @ T
                walk(depth + 1, nxt, weight * (e if o == IDLE else 1.0), prefix + (a, o))

    walk(0, p0, 1.0, ())
    return c


def count_policies(n_channels: int, K: int) -> int:
    return n_channels ** (2 ** K - 1)


def exhaustive_policy_oracle(start: Sequence[float], K: int, theta: float, sc: SampledChannel,
                             cap: int = ENUMERATION_CAP) -> float:
    """Minimum of ``E exp(theta sum X)`` over every deterministic sensing policy tree.

    A policy assigns an action to each of the ``2**K - 1`` observation
    prefixes; all ``N**(2**K - 1)`` of them are evaluated.
    """
    if not theta < 0:
        raise ValueError("theta must be negative")
    n = len(start)
    total = count_policies(n, K)
    if total > cap:
        raise ValueError(f"{total} policies exceed the enumeration cap of {cap}")
    c = _history_weights(start, K, theta, sc).reshape(-1)
    n_nodes = 2 ** K - 1
    # node id of an observation prefix: heap layout, root 0, children 2i+1 (idle) and 2i+2 (busy)
    obs_seqs = np.array(list(itertools.product((IDLE, BUSY), repeat=K)), dtype=np.int64)
    path_nodes = np.zeros((len(obs_seqs), K), dtype=np.int64)
    for d in range(1, K):
        path_nodes[:, d] = 2 * path_nodes[:, d - 1] + 1 + obs_seqs[:, d - 1]
    dims = (n, 2) * K
    strides = np.array([int(np.prod(dims[k + 1:])) for k in range(2 * K)], dtype=np.int64)
    return float(_enumerate_min(c, n, n_nodes, obs_seqs, path_nodes, strides, total))


@njit(cache=True)
def _enumerate_min(c, n, n_nodes, obs_seqs, path_nodes, strides, total):
    acts = np.zeros(n_nodes, dtype=np.int64)  # mixed-radix counter = current policy
    best = np.inf
    for _ in range(total):
        val = 0.0
        for s in range(obs_seqs.shape[0]):
            flat = 0
            for d in range(obs_seqs.shape[1]):
                flat += acts[path_nodes[s, d]] * strides[2 * d] + obs_seqs[s, d] * strides[2 * d + 1]
            val += c[flat]
        if val < best:
            best = val
        k = n_nodes - 1
        while k >= 0:
            acts[k] += 1
            if acts[k] < n:
                break
            acts[k] = 0
            k -= 1
    return best


def risk_neutral_value(start: Sequence[float], K: int, sc: SampledChannel) -> float:
    """Maximum expected number of idle sensings over K slots (additive DP)."""
    memo: Dict[Tuple[int, Belief], float] = {}

    def U(t: int, omega: Belief) -> float:
        key = (t, omega)
        if key in memo:
            return memo[key]
        best = -math.inf
        for a, w in enumerate(omega):
            val = w
            if t < K:
                val += w * U(t + 1, _next(omega, a, IDLE, sc)) + (1 - w) * U(t + 1, _next(omega, a, BUSY, sc))
            best = max(best, val)
        memo[key] = best
        return best

    return U(1, tuple(float(w) for w in start))
