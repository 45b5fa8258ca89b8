"""Experiment configuration: INI file + presets + command-line overrides.

Units follow the channel model: rates in 1/ms, slot length in ms, payload
in bits per successful slot.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, Optional, Tuple, Union

from .analytics import EbParams
from .channel_bank import ChannelParams

POLICIES = ("ms-at", "ms-mt", "ms-at-inf")


@dataclass(frozen=True)
class ExperimentConfig:
    # channel
    n_channels: int = 2
    lam: float = 1 / 3
    mu: float = 1 / 2
    slot_len: float = 0.25
    bits_per_slot: float = 1.0
    # effective bandwidth exponent; epsilon/buffer_b take precedence when both set
    theta: Optional[float] = -0.08
    epsilon: Optional[float] = None
    buffer_b: Optional[float] = None
    # experiment
    policy: str = "ms-at"
    gammas: Tuple[float, ...] = (0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.08, 0.1, 0.15, 0.3, 0.6)
    horizon: int = 1_000_000
    replications: int = 20
    seed: int = 1
    burn_in: int = 1000
    initial_state: Optional[Tuple[int, ...]] = None  # None = stationary draw
    workers: int = 1
    # estimators
    eb_block_len: Union[int, str] = "auto"
    eb_richardson: bool = True
    eb_min_ess: float = 1000.0
    n_batches: int = 20
    bootstrap: int = 1000
    # MT calibration
    calibration_horizon: int = 200_000
    # histogram
    hist_bin: float = 0.25
    # output
    out_dir: str = "out"
    trace_every: int = 1
    trace_max_slots: int = 10_000  # 0 exports the whole trace

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if len(self.gammas) == 0:
            raise ValueError("gamma grid is empty")
        if any(g < 0 for g in self.gammas):
            raise ValueError("gammas must be non-negative")
        if self.horizon < 1 or self.replications < 1:
            raise ValueError("horizon and replications must be positive")
        if self.horizon < self.burn_in:
            raise ValueError("horizon must be at least the burn-in")
        if not self.resolved_theta < 0:
            raise ValueError("theta must be negative")
        if self.eb_block_len != "auto" and int(self.eb_block_len) < 1:
            raise ValueError("eb_block_len must be 'auto' or a positive integer")
        self.channel  # validates the channel parameters

    @property
    def resolved_theta(self) -> float:
        if self.epsilon is not None and self.buffer_b is not None:
            return EbParams.from_qos(self.epsilon, self.buffer_b).theta
        if self.theta is None:
            raise ValueError("set theta or both epsilon and buffer_b")
        return self.theta

    @property
    def channel(self) -> ChannelParams:
        return ChannelParams(self.n_channels, self.lam, self.mu, self.slot_len, self.bits_per_slot)


PRESETS: Dict[str, dict] = {
    "paper-fig2a": dict(policy="ms-at"),
    "paper-fig2b": dict(policy="ms-mt"),
    "paper-fig3": dict(policy="ms-at", gammas=(0.03,)),
}

# INI layout: section -> field names
_SECTIONS = {
    "channel": ("n_channels", "lam", "mu", "slot_len", "bits_per_slot"),
    "effective_bandwidth": ("theta", "epsilon", "buffer_b"),
    "experiment": ("policy", "gammas", "horizon", "replications", "seed", "burn_in", "initial_state", "workers"),
    "estimator": ("eb_block_len", "eb_richardson", "eb_min_ess", "n_batches", "bootstrap", "calibration_horizon",
                  "hist_bin"),
    "output": ("out_dir", "trace_every", "trace_max_slots"),
}
# accepted spellings in files / --set keys
_ALIASES = {"lambda": "lam", "t": "slot_len", "c": "bits_per_slot", "n": "n_channels", "dir": "out_dir"}
_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(name: str, raw: str):
    raw = raw.strip()
    default = getattr(ExperimentConfig(), name)
    if name == "gammas":
        return tuple(_parse_float(x) for x in raw.replace(",", " ").split())
    if raw.lower() in ("", "none"):
        return None
    if name == "initial_state":
        return tuple(int(x) for x in raw.replace(",", " ").split())
    if name == "eb_block_len":
        return "auto" if raw == "auto" else int(raw)
    if name in ("policy", "out_dir"):
        return raw
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(float(raw))
    return _parse_float(raw)


def _parse_float(raw: str) -> float:
    if "/" in raw:
        num, den = raw.split("/", 1)
        return float(num) / float(den)
    return float(raw)


def _field_name(key: str) -> str:
    key = key.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in _FIELD_TYPES:
        raise KeyError(f"unknown config key {key!r}")
    return key


def apply_overrides(cfg: ExperimentConfig, overrides: Dict[str, str]) -> ExperimentConfig:
    """Apply ``key=value`` strings (``section.key`` or bare ``key``)."""
    kw = {}
    for key, raw in overrides.items():
        name = _field_name(key.split(".")[-1])
        kw[name] = _parse_value(name, raw)
    return replace(cfg, **kw)


def load_config(path: Optional[str] = None, preset: Optional[str] = None,
                overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    """Defaults, then preset, then file, then overrides."""
    cfg = ExperimentConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = replace(cfg, **PRESETS[preset])
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        flat = {}
        for section in parser.sections():
            for key, raw in parser.items(section):
                flat[key] = raw
        cfg = apply_overrides(cfg, flat)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    values = asdict(cfg)
    for section, names in _SECTIONS.items():
        parser[section] = {name: _format(values[name]) for name in names}
    buf = io.StringIO()
    buf.write("# rates in 1/ms, slot_len in ms, bits_per_slot in bits\n")
    parser.write(buf)
    return buf.getvalue()
