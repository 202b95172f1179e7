"""Wideband multipath channel generation and imperfect-CSI corruption.

Channels follow a clustered multipath model: L paths per user with standard
circular complex Gaussian gains, uniform angles of arrival/departure, and
uniform delays that induce a per-resource-block phase rotation
exp(-j 2 pi tau f_s b / B). The path sum carries a 1/sqrt(L) factor so the
mean channel energy is one per antenna pair regardless of the path count
(benchmark SNRs and estimation-error variances are calibrated against
unit-energy entries). Both arrays are uniform linear arrays with
half-wavelength spacing. Path parameters are drawn once per user and shared
by all resource blocks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .core import ChannelSet, ConfigError, SystemConfig


@dataclass(frozen=True)
class ChannelParams:
    """Multipath model parameters (delays in nanoseconds, rate in Hz)."""

    n_paths: int = 10
    delay_min_ns: float = 0.0
    delay_max_ns: float = 100.0
    sample_rate_hz: float = 0.32e9
    n_rb: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_paths < 1:
            raise ConfigError("n_paths must be >= 1")
        if not 0.0 <= self.delay_min_ns <= self.delay_max_ns:
            raise ConfigError("delay range must satisfy 0 <= min <= max")
        if self.sample_rate_hz <= 0.0:
            raise ConfigError("sample_rate_hz must be positive")
        if self.n_rb < 1:
            raise ConfigError("n_rb must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelParams":
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class CsiNoiseModel:
    """Additive circular complex Gaussian estimation error, per entry."""

    error_var: float = 0.0

    def __post_init__(self):
        if self.error_var < 0.0:
            raise ConfigError("error_var must be nonnegative")


def steering_vector(angle: float, n_elems: int) -> np.ndarray:
    """Uniform-linear-array response, half-wavelength spacing, unit modulus."""
    if n_elems < 1:
        raise ConfigError("n_elems must be >= 1")
    return np.exp(1j * np.pi * np.arange(n_elems) * np.sin(angle))


def _user_rng(seed: int, user: int) -> np.random.Generator:
    # Fixed splitting rule so per-user draws are order- and thread-independent.
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(user,)))


def gen_channel(params: ChannelParams, cfg: SystemConfig, seed: int) -> ChannelSet:
    """Draw one channel realization for every user and resource block.

    Deterministic given (params, cfg, seed). The same per-user path set
    (gains, delays, angles) generates all B resource blocks; only the
    delay-induced phase differs across blocks.
    """
    if params.n_rb != cfg.granularity:
        raise ConfigError("params.n_rb must match cfg.granularity")
    k_users, b_rb = cfg.n_users, cfg.granularity
    data = np.zeros((k_users, b_rb, cfg.n_rx, cfg.n_tx), dtype=np.complex128)
    b_idx = np.arange(1, b_rb + 1)
    for k in range(k_users):
        rng = _user_rng(seed, k)
        L = params.n_paths
        gains = (rng.standard_normal(L) + 1j * rng.standard_normal(L)) / np.sqrt(2.0)
        delays = rng.uniform(params.delay_min_ns, params.delay_max_ns, size=L) * 1e-9
        aoa = rng.uniform(0.0, 2.0 * np.pi, size=L)
        aod = rng.uniform(0.0, 2.0 * np.pi, size=L)
        a_rx = np.stack([steering_vector(t, cfg.n_rx) for t in aoa])  # (L, N_r)
        a_tx = np.stack([steering_vector(t, cfg.n_tx) for t in aod])  # (L, N_t)
        # phase[l, b] = exp(-j 2 pi tau_l f_s b / B)
        phase = np.exp(-2j * np.pi * delays[:, None] * params.sample_rate_hz * b_idx / b_rb)
        data[k] = np.einsum("lb,lr,lt->brt", gains[:, None] * phase, a_rx, a_tx) / np.sqrt(L)
    return ChannelSet(data, is_noisy=False)


def add_csi_noise(channels: ChannelSet, noise: CsiNoiseModel, seed: int) -> ChannelSet:
    """Return a noisy copy H + n with i.i.d. CN(0, error_var) entries."""
    if channels.is_noisy:
        raise ConfigError("channels are already a noisy copy")
    if noise.error_var == 0.0:
        return ChannelSet(channels.data.copy(), is_noisy=True)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x5A,)))
    shape = channels.data.shape
    std = np.sqrt(noise.error_var / 2.0)
    n = std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return ChannelSet(channels.data + n, is_noisy=True)


# ---------------------------------------------------------------------------
# Binary channel files: one JSON header line, then little-endian float64
# interleaved (re, im) in C order of the array (count, K, B, N_r, N_t).
# ---------------------------------------------------------------------------

_FORMAT = "lcp-channels/1"


def save_channels(path, realizations: list[ChannelSet], params: ChannelParams,
                  cfg: SystemConfig, seed: int):
    arr = np.stack([c.data for c in realizations])
    count, k, b, nr, nt = arr.shape
    header = {
        "format": _FORMAT,
        "K": k, "N_r": nr, "N_t": nt, "B": b,
        "count": count,
        "seed": int(seed),
        "params": asdict(params),
    }
    interleaved = np.empty(arr.shape + (2,), dtype="<f8")
    interleaved[..., 0] = arr.real
    interleaved[..., 1] = arr.imag
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(interleaved.tobytes())


def load_channels(path) -> tuple[list[ChannelSet], dict]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("format") != _FORMAT:
            raise ConfigError(f"unexpected file format {header.get('format')!r}")
        shape = (header["count"], header["K"], header["B"], header["N_r"], header["N_t"], 2)
        raw = np.frombuffer(f.read(), dtype="<f8").reshape(shape)
    data = raw[..., 0] + 1j * raw[..., 1]
    return [ChannelSet(data[i]) for i in range(header["count"])], header
