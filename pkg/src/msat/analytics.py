"""Closed forms, spectral limits and trace estimators for MS-AT / MS-MT.

The joint chain (channel occupancy vector s, sensing pointer i) is Markov
under myopic sensing.  Its tilted kernels give the Gartner-Ellis limits:

* ``mode="x"`` weights a row by ``exp(theta_tilde * 1{s_i idle})`` and
  moves every channel with the slot-sampled transition matrix.
* ``mode="r"`` is the exact kernel of the success process: the sensed
  idle channel carries ``exp(theta)`` only on the idle-throughout branch,
  which always ends idle.

The two agree when the success event is independent of the next channel
state, which continuous-time channels do not satisfy exactly.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .channel_bank import ChannelParams, derive_sampled

log = logging.getLogger(__name__)

MAX_KERNEL_CHANNELS = 12


@dataclass(frozen=True)
class EbParams:
    """QoS pair (epsilon, b) or a direct exponent ``theta = log(epsilon)/b``."""

    theta: float
    epsilon: Optional[float] = None
    buffer_b: Optional[float] = None

    def __post_init__(self):
        if not self.theta < 0:
            raise ValueError(f"theta must be negative, got {self.theta}")
        if self.epsilon is not None and self.buffer_b is not None:
            if not math.isclose(self.theta, math.log(self.epsilon) / self.buffer_b, rel_tol=1e-12):
                raise ValueError("theta inconsistent with (epsilon, buffer_b)")

    @classmethod
    def from_qos(cls, epsilon: float, buffer_b: float) -> "EbParams":
        if not 0 < epsilon < 1 or not buffer_b > 0:
            raise ValueError("need 0 < epsilon < 1 and buffer_b > 0")
        return cls(math.log(epsilon) / buffer_b, epsilon, buffer_b)


# ---------------------------------------------------------------------------
# closed forms

def theta_tilde(theta: float, params: ChannelParams) -> float:
    c = params.bits_per_slot
    return math.log1p(-params.q * (-math.expm1(c * theta)))


def tau_star(gamma: float, params: ChannelParams) -> float:
    """AT target meeting collision level ``gamma`` on every channel."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    q, v0 = params.q, params.v0
    return params.n_channels * gamma * q * (1.0 - v0 * q) / (1.0 - q)


def gamma_for_tau(tau: float, params: ChannelParams) -> float:
    """Inverse of :func:`tau_star`."""
    return tau / tau_star(1.0, params)


# ---------------------------------------------------------------------------
# tilted joint-chain kernel

class TiltedKernel:
    """Structured (2^N * N)-state tilted kernel acting on row vectors.

    Vectors are shaped ``(2,)*N + (N,)``: one axis per channel occupancy
    (0 idle, 1 busy) followed by the sensing pointer.  The channel order
    is the identity.
    """

    def __init__(self, params: ChannelParams, tilt: float, mode: str = "x",
                 max_channels: int = MAX_KERNEL_CHANNELS):
        if mode not in ("x", "r"):
            raise ValueError("mode must be 'x' or 'r'")
        n = params.n_channels
        if n > max_channels:
            raise ValueError(f"joint chain with N={n} exceeds the cap of {max_channels} channels")
        self.params = params
        self.tilt = float(tilt)
        self.mode = mode
        self.n = n
        sc = derive_sampled(params)
        self.P = sc.transition
        P_sensed = self.P.copy()
        if mode == "x":
            P_sensed[0] *= math.exp(tilt)
        else:
            q = params.q
            P_sensed[0, 0] = q * math.exp(tilt) + (sc.p_ii - q)
        self.P_sensed = P_sensed
        self.shape = (2,) * n + (n,)
        self.size = 2 ** n * n

    @staticmethod
    def _along(x: np.ndarray, M: np.ndarray, axis: int) -> np.ndarray:
        return np.moveaxis(np.tensordot(x, M, axes=([axis], [0])), -1, axis)

    def _channels(self, x: np.ndarray, sensed: int, M_sensed: np.ndarray) -> np.ndarray:
        for j in range(self.n):
            x = self._along(x, M_sensed if j == sensed else self.P, j)
        return x

    def _idle_mask(self, i: int) -> np.ndarray:
        shape = [1] * self.n
        shape[i] = 2
        return np.array([1.0, 0.0]).reshape(shape)

    def lmul(self, v: np.ndarray) -> np.ndarray:
        """Row vector times kernel, ``v @ A``."""
        v = v.reshape(self.shape)
        out = np.zeros(self.shape)
        for i in range(self.n):
            xi = v[..., i]
            mask = self._idle_mask(i)
            # sensed idle: stay on channel i; sensed busy: move to the next channel
            out[..., i] += self._channels(xi * mask, i, self.P_sensed)
            out[..., (i + 1) % self.n] += self._channels(xi * (1.0 - mask), i, self.P)
        return out.reshape(-1)

    def dense(self) -> np.ndarray:
        if self.size > 4096:
            raise ValueError("dense kernel only for small state spaces")
        eye = np.eye(self.size)
        return np.stack([self.lmul(eye[k]) for k in range(self.size)])

    def idle_indicator(self) -> np.ndarray:
        """1{s_i idle} per joint state, flattened."""
        ind = np.zeros(self.shape)
        for i in range(self.n):
            idx = [slice(None)] * self.n + [i]
            idx[i] = 0
            ind[tuple(idx)] = 1.0
        return ind.reshape(-1)


@dataclass
class PerronResult:
    log_root: float
    lower: float  # Collatz-Wielandt bracket on the root
    upper: float
    vector: np.ndarray  # left Perron vector, sums to one
    iterations: int


class ConvergenceError(RuntimeError):
    pass


def perron_root(kernel: TiltedKernel, tol: float = 1e-10, max_iter: int = 200_000,
                start: Optional[np.ndarray] = None) -> PerronResult:
    """Power iteration on row vectors with a certified relative bracket."""
    v = np.full(kernel.size, 1.0 / kernel.size) if start is None else np.asarray(start, float).copy()
    v /= v.sum()
    lo = hi = math.nan
    for it in range(1, max_iter + 1):
        w = kernel.lmul(v)
        ratio = w / v
        lo, hi = ratio.min(), ratio.max()
        v = w / w.sum()
        if hi - lo <= tol * lo:
            root = 0.5 * (lo + hi)
            return PerronResult(math.log(root), lo, hi, v, it)
    raise ConvergenceError(f"power iteration stalled after {max_iter} steps: bracket [{lo!r}, {hi!r}]")


def psi_x_spectral(theta_tilde_value: float, params: ChannelParams, tol: float = 1e-10,
                   max_channels: int = MAX_KERNEL_CHANNELS, mode: str = "x") -> float:
    """Log Perron root of the tilted joint-chain kernel."""
    if theta_tilde_value == 0.0:
        return 0.0
    return perron_root(TiltedKernel(params, theta_tilde_value, mode, max_channels), tol).log_root


def psi_r_exact(theta: float, params: ChannelParams, tol: float = 1e-10) -> float:
    """Gartner-Ellis limit of the success process itself (``mode="r"``)."""
    return psi_x_spectral(theta, params, tol, mode="r")


def stationary_law(params: ChannelParams, tol: float = 1e-13) -> np.ndarray:
    """Stationary distribution of the untilted joint chain, flattened."""
    return perron_root(TiltedKernel(params, 0.0), tol).vector


def ms_inf_throughput(params: ChannelParams) -> float:
    """Long-run success rate (bits/slot) of always-transmit myopic access."""
    k = TiltedKernel(params, 0.0)
    pi = stationary_law(params)
    return float(pi @ k.idle_indicator()) * params.q * params.bits_per_slot


def psi_two_state(tilt: float, params: ChannelParams) -> float:
    """Closed-form log Perron root for a single channel (2x2 kernel)."""
    sc = derive_sampled(params)
    w = math.exp(tilt)
    a, b = w * sc.p_ii, w * (1 - sc.p_ii)
    c, d = sc.p_bi, 1 - sc.p_bi
    tr, det = a + d, a * d - b * c
    return math.log(0.5 * (tr + math.sqrt(tr * tr - 4 * det)))


# ---------------------------------------------------------------------------
# closed-form assembly

@dataclass(frozen=True)
class TheoremOneResult:
    gamma: float
    theta: float
    tau_star: float
    theta_tilde: float
    psi_x: float
    eb_loose: float  # psi_x / theta
    eb_star: float
    th_inf: float  # always-transmit throughput
    th_star: float
    knee_gamma: float


def knee_gamma(eb_loose: float, params: ChannelParams) -> float:
    q, v0 = params.q, params.v0
    return eb_loose * (1.0 - q) / (params.n_channels * q * (1.0 - v0 * q))


def theorem_one(gamma: float, theta: float, params: ChannelParams, psi_x: Optional[float] = None,
                th_inf: Optional[float] = None) -> TheoremOneResult:
    """Optimal EB and throughput at collision level ``gamma``.

    ``psi_x`` and ``th_inf`` depend only on (theta, params) and may be
    passed in when sweeping gamma.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if not theta < 0:
        raise ValueError("theta must be negative")
    tt = theta_tilde(theta, params)
    if psi_x is None:
        psi_x = psi_x_spectral(tt, params)
    if th_inf is None:
        th_inf = ms_inf_throughput(params)
    ts = tau_star(gamma, params)
    eb_loose = psi_x / theta
    return TheoremOneResult(
        gamma=gamma, theta=theta, tau_star=ts, theta_tilde=tt, psi_x=psi_x, eb_loose=eb_loose,
        eb_star=min(ts, eb_loose), th_inf=th_inf, th_star=min(ts, th_inf),
        knee_gamma=knee_gamma(eb_loose, params),
    )


# ---------------------------------------------------------------------------
# estimators

@dataclass(frozen=True)
class Estimate:
    value: float
    ci_lo: float
    ci_hi: float
    n_samples: int

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci_hi - self.ci_lo)

    def contains(self, x: float) -> bool:
        return self.ci_lo <= x <= self.ci_hi


def _success_bits(trace) -> np.ndarray:
    if hasattr(trace, "success_bits"):
        return np.asarray(trace.success_bits, dtype=float)
    return np.asarray(trace, dtype=float)


def block_sums(ensemble, block_len: int, burn_in: int = 0, split: int = 1) -> np.ndarray:
    """Reward sums over consecutive non-overlapping blocks of every trace.

    With ``split > 1`` each block of ``block_len * split`` slots is
    returned as a row of ``split`` sub-block sums, shape ``(B, split)``.
    ``ensemble`` may also hold ``RunSummary`` objects, whose precomputed
    block sums are used when ``split == 1``.
    """
    out = []
    for tr in ensemble:
        if hasattr(tr, "block_sums"):
            if tr.block_len != block_len or split != 1:
                raise ValueError("RunSummary blocks do not match the requested layout")
            out.append(tr.block_sums.reshape(-1, 1))
            continue
        r = _success_bits(tr)[burn_in:]
        k = r.shape[0] // (block_len * split)
        out.append(r[:k * block_len * split].reshape(k, split, block_len).sum(axis=2))
    sums = np.concatenate(out) if out else np.empty((0, split))
    return sums[:, 0] if split == 1 else sums


def log_mgf_rate(sums: np.ndarray, theta: float, block_len: int) -> float:
    return (logsumexp(theta * sums) - math.log(sums.shape[0])) / block_len


def effective_sample_size(sums: np.ndarray, theta: float) -> float:
    """Kish effective size of the weights ``exp(theta S_b)``."""
    x = theta * np.asarray(sums, dtype=float)
    w = np.exp(x - x.max())
    return float(w.sum() ** 2 / (w * w).sum())


def choose_block_len(ensemble, theta: float, burn_in: int = 0, min_ess: float = 1000.0,
                     richardson: bool = True, base: int = 50, max_doublings: int = 16) -> int:
    """Largest block length whose exponential weights keep ``min_ess`` effective blocks.

    Long blocks shrink the O(1/m) boundary bias but let a handful of
    blocks dominate the log-mean-exp; this picks the longest block that
    is still well sampled.  Candidates are ``base * 2**j``, then
    ``base / 2**j`` when even ``base`` is too long.
    """
    split = 2 if richardson else 1
    best = None
    for j in range(max_doublings + 1):
        m = base * 2 ** j
        sums = block_sums(ensemble, m * split, burn_in)
        if sums.shape[0] < min_ess or effective_sample_size(sums, theta) < min_ess:
            break
        best = m
    m = base // 2
    while best is None and m >= 1:
        # strongly tilted or short data: fall back to shorter blocks
        sums = block_sums(ensemble, m * split, burn_in)
        if sums.shape[0] >= min_ess and effective_sample_size(sums, theta) >= min_ess:
            best = m
        m //= 2
    if best is None:
        raise ValueError(f"not enough data for {min_ess:g} effective blocks even at block length 1")
    return best


def estimate_eb(ensemble, theta: float, block_len: Union[int, str] = 10_000, burn_in: int = 0,
                n_boot: int = 1000, conf: float = 0.95, seed: int = 0, richardson: bool = False,
                min_ess: float = 1000.0) -> Estimate:
    """Block log-MGF estimate of the effective bandwidth.

    ``(1/m) log mean_b exp(theta S_b)`` divided by theta, with a
    percentile bootstrap over blocks.  ``richardson=True`` combines block
    lengths m and 2m as ``2 L(2m) - L(m)`` to cancel the 1/m boundary
    term; the bootstrap then resamples the 2m blocks with their halves.
    ``block_len="auto"`` defers to :func:`choose_block_len`.
    """
    if not theta < 0:
        raise ValueError("theta must be negative")
    if block_len == "auto":
        block_len = choose_block_len(ensemble, theta, burn_in, min_ess, richardson)
    m = int(block_len)
    split = 2 if richardson else 1
    sums = block_sums(ensemble, m, burn_in, split).reshape(-1, split)
    B = sums.shape[0]
    if B < 2:
        raise ValueError("need at least two complete blocks")
    x = theta * sums.sum(axis=1)
    span = (x.max() - x.min()) / math.log(10)
    if span > 30:
        warnings.warn(f"block exponentials span {span:.0f} orders of magnitude; estimate is "
                      "dominated by a few blocks", RuntimeWarning, stacklevel=2)

    # shifted weights: every log-mean-exp below is log(sum of gathered weights) + shift
    x_shift = x.max()
    w_whole = np.exp(x - x_shift)
    if split == 2:
        h = theta * sums
        h_shift = h.max()
        w_half = np.exp(h - h_shift).sum(axis=1)

    def rate(idx) -> np.ndarray:
        n = B if idx is None else idx.shape[-1]
        pick = (lambda w: w.sum()) if idx is None else (lambda w: w[idx].sum(axis=-1))
        whole = (np.log(pick(w_whole)) + x_shift - math.log(n)) / (m * split)
        if split == 1:
            return whole
        half = (np.log(pick(w_half)) + h_shift - math.log(2 * n)) / m
        return 2.0 * whole - half

    value = float(rate(None)) / theta
    rng = np.random.default_rng(seed)
    boot = np.empty(n_boot)
    step = max(1, 4_000_000 // B)
    for k in range(0, n_boot, step):
        idx = rng.integers(0, B, size=(min(step, n_boot - k), B))
        boot[k:k + idx.shape[0]] = rate(idx) / theta
    alpha = 1.0 - conf
    lo, hi = np.quantile(boot, [alpha / 2, 1 - alpha / 2])
    return Estimate(value, float(lo), float(hi), B)


def _batch_ci(batch_means: np.ndarray, conf: float):
    k = batch_means.shape[0]
    m = float(batch_means.mean())
    if k < 2:
        return m, m, m
    se = batch_means.std(ddof=1) / math.sqrt(k)
    h = stats.t.ppf(0.5 + conf / 2, k - 1) * se
    return m, m - h, m + h


def estimate_throughput(ensemble, burn_in: int = 0, n_batches: int = 20, conf: float = 0.95) -> Estimate:
    """Mean success bits per slot, CI from batch means pooled over traces."""
    if hasattr(ensemble, "success") or isinstance(ensemble, np.ndarray):
        ensemble = [ensemble]
    means = []
    for tr in ensemble:
        r = _success_bits(tr)[burn_in:]
        if r.shape[0] == 0:
            raise ValueError("empty trace after burn-in")
        b = r.shape[0] // n_batches
        if b == 0:
            means.append(np.array([r.mean()]))
        else:
            means.append(r[:b * n_batches].reshape(n_batches, b).mean(axis=1))
    m, lo, hi = _batch_ci(np.concatenate(means), conf)
    return Estimate(m, lo, hi, sum(x.shape[0] for x in means))


# ---------------------------------------------------------------------------
# finiteness of sup_n M_n(theta) exp(-theta tau n)

@dataclass
class SupremumCheck:
    tau: float
    log_values: np.ndarray  # log(M_n e^{-theta tau n}), n = 1..n_max
    bounded: bool
    eventually_decreasing: bool
    violation_index: Optional[int]  # first n whose value exceeds the ceiling

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    @property
    def sup(self) -> float:
        return float(np.exp(self.log_values.max()))


def mgf_sequence(theta: float, params: ChannelParams, n_max: int, mode: str = "r") -> np.ndarray:
    """``log M_n(theta)`` for n = 1..n_max from the stationary joint law.

    ``mode="r"`` propagates the exact success-process kernel at ``theta``;
    ``mode="x"`` uses the idle-sensing kernel at ``theta_tilde(theta)``.
    """
    tilt = theta if mode == "r" else theta_tilde(theta, params)
    k = TiltedKernel(params, tilt, mode)
    v = stationary_law(params)
    out = np.empty(n_max)
    acc = 0.0
    for n in range(n_max):
        v = k.lmul(v)
        s = v.sum()
        acc += math.log(s)
        v /= s
        out[n] = acc
    return out


def check_supremum_bound(theta: float, tau: float, params: ChannelParams, n_max: int = 10_000,
                         ceiling: float = 1e3, mode: str = "r") -> SupremumCheck:
    """Track ``M_n(theta) exp(-theta tau n)`` up to ``n_max``.

    Bounded means the sequence never exceeds ``ceiling`` times its first
    value; the violation index is the first n where it does.
    """
    log_m = mgf_sequence(theta, params, n_max, mode)
    n = np.arange(1, n_max + 1)
    lv = log_m - theta * tau * n
    over = np.flatnonzero(lv > lv[0] + math.log(ceiling))
    viol = int(over[0]) + 1 if over.size else None
    tail = lv[n_max // 2:]
    return SupremumCheck(tau, lv, viol is None, bool(np.all(np.diff(tail) <= 0)), viol)
