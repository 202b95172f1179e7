"""Domain types, weighted sum-rate evaluation and Gram-matrix input packing.

Conventions used throughout the package:
  - channels are row-convention: a single-antenna (virtual) channel is a
    1 x N_t row vector h, the per-user MIMO channel is N_r x N_t;
  - precoders are column-convention: one N_t column per data stream;
  - rates are in bits/s/Hz (log base 2);
  - the total power budget is normalized to 1.0 by default and the noise
    variance is derived from an SNR in dB as 10**(-snr_db/10).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# Tolerance tiers: pure linear-algebra identities vs. solver-level identities.
LINALG_TOL = 1e-12
SOLVER_TOL = 1e-9

_LN2 = math.log(2.0)


class PrecodingError(Exception):
    """Base error for this package."""


class ConfigError(PrecodingError):
    """Inconsistent or infeasible system configuration / inputs."""


class NumericalError(PrecodingError):
    """Numerical breakdown (singular matrices, non-finite iterates)."""


def snr_db_to_noise_var(snr_db: float, total_power: float = 1.0) -> float:
    """Noise variance for a given transmit SNR = total_power / noise_var."""
    return total_power * 10.0 ** (-snr_db / 10.0)


@dataclass(frozen=True)
class SystemConfig:
    """Static description of one downlink multi-user MIMO system.

    ``streams[k]`` is the number of data streams of user k; their total M
    must not exceed the number of transmit antennas.
    """

    n_tx: int
    n_rx: int
    n_users: int
    streams: tuple[int, ...]
    d_max: int = 0
    total_power: float = 1.0
    noise_var: float = 1.0
    weights: tuple[float, ...] = ()
    granularity: int = 1
    log_base: int = 2

    def __post_init__(self):
        streams = tuple(int(d) for d in self.streams)
        object.__setattr__(self, "streams", streams)
        d_max = self.d_max if self.d_max > 0 else max(streams)
        object.__setattr__(self, "d_max", int(d_max))
        weights = tuple(float(w) for w in self.weights) or (1.0,) * self.n_users
        object.__setattr__(self, "weights", weights)
        if self.n_tx < 1 or self.n_rx < 1 or self.n_users < 1:
            raise ConfigError("antenna and user counts must be positive")
        if len(streams) != self.n_users:
            raise ConfigError("streams must list one entry per user")
        if len(weights) != self.n_users:
            raise ConfigError("weights must list one entry per user")
        for d in streams:
            if not 1 <= d <= min(self.d_max, self.n_rx):
                raise ConfigError(
                    f"stream count {d} outside [1, min(d_max={self.d_max}, n_rx={self.n_rx})]"
                )
        if sum(streams) > self.n_tx:
            raise ConfigError("total stream count exceeds transmit antennas")
        if min(weights) <= 0.0:
            raise ConfigError("user weights must be strictly positive")
        if self.noise_var <= 0.0 or self.total_power <= 0.0:
            raise ConfigError("noise_var and total_power must be positive")
        if self.granularity < 1:
            raise ConfigError("granularity must be >= 1")
        if self.log_base != 2:
            raise ConfigError("rates are defined in bits (log base 2)")

    @property
    def n_streams(self) -> int:
        """Total number of data streams M."""
        return sum(self.streams)

    def stream_owners(self) -> np.ndarray:
        """Owner user index for every stream, in stream-major order."""
        return np.repeat(np.arange(self.n_users), self.streams)

    def stream_slices(self) -> list[slice]:
        """Column slice of each user's streams inside the merged precoder."""
        offs = np.concatenate(([0], np.cumsum(self.streams)))
        return [slice(int(offs[k]), int(offs[k + 1])) for k in range(self.n_users)]

    def stream_weights(self) -> np.ndarray:
        """Per-stream priority weights inherited from the owning user."""
        return np.repeat(np.asarray(self.weights, dtype=float), self.streams)

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        """Build from a JSON experiment config; accepts snr_db or noise_var."""
        d = dict(d)
        n_users = int(d["n_users"])
        streams = d.get("streams", 1)
        if isinstance(streams, int):
            streams = (streams,) * n_users
        weights = d.get("weights", 1.0)
        if isinstance(weights, (int, float)):
            weights = (float(weights),) * n_users
        total_power = float(d.get("total_power", 1.0))
        if "snr_db" in d:
            noise_var = snr_db_to_noise_var(float(d["snr_db"]), total_power)
        else:
            noise_var = float(d.get("noise_var", 1.0))
        return cls(
            n_tx=int(d["n_tx"]),
            n_rx=int(d["n_rx"]),
            n_users=n_users,
            streams=tuple(int(x) for x in streams),
            d_max=int(d.get("d_max", 0)),
            total_power=total_power,
            noise_var=noise_var,
            weights=tuple(float(x) for x in weights),
            granularity=int(d.get("granularity", 1)),
        )

    def with_noise_var(self, noise_var: float) -> "SystemConfig":
        return SystemConfig(
            n_tx=self.n_tx, n_rx=self.n_rx, n_users=self.n_users,
            streams=self.streams, d_max=self.d_max, total_power=self.total_power,
            noise_var=noise_var, weights=self.weights, granularity=self.granularity,
        )


@dataclass
class ChannelSet:
    """Per-user, per-resource-block channel matrices.

    ``data`` has shape (K, B, N_r, N_t); ``is_noisy`` marks imperfect-CSI
    copies produced by the simulator.
    """

    data: np.ndarray
    is_noisy: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 4:
            raise ConfigError("channel array must be (K, B, N_r, N_t)")
        if not np.all(np.isfinite(self.data.view(np.float64))):
            raise ConfigError("channel entries must be finite")

    @property
    def n_users(self) -> int:
        return self.data.shape[0]

    @property
    def n_rb(self) -> int:
        return self.data.shape[1]

    def matrix(self, user: int, rb: int = 0) -> np.ndarray:
        return self.data[user, rb]

    def check_config(self, cfg: SystemConfig):
        k, b, nr, nt = self.data.shape
        if (k, nr, nt) != (cfg.n_users, cfg.n_rx, cfg.n_tx):
            raise ConfigError(
                f"channel shape {self.data.shape} inconsistent with config "
                f"(K={cfg.n_users}, N_r={cfg.n_rx}, N_t={cfg.n_tx})"
            )
        if b != cfg.granularity:
            raise ConfigError(f"channel has {b} RBs, config expects {cfg.granularity}")


@dataclass
class PrecoderSet:
    """Per-user transmit precoding matrices, shape N_t x d_k each."""

    mats: list[np.ndarray]

    def __post_init__(self):
        self.mats = [np.asarray(v, dtype=np.complex128) for v in self.mats]

    def total_power(self) -> float:
        return float(sum(np.sum(np.abs(v) ** 2) for v in self.mats))

    def merged(self) -> np.ndarray:
        """All precoding columns side by side, N_t x M, stream-major order."""
        return np.hstack(self.mats)

    def check_power(self, cfg: SystemConfig, slack: float = SOLVER_TOL):
        p = self.total_power()
        if p > cfg.total_power * (1.0 + slack):
            raise ConfigError(f"precoder power {p} exceeds budget {cfg.total_power}")

    def scaled_to_power(self, total_power: float) -> "PrecoderSet":
        p = self.total_power()
        if p <= 0.0:
            return PrecoderSet([v.copy() for v in self.mats])
        c = math.sqrt(total_power / p)
        return PrecoderSet([c * v for v in self.mats])


@dataclass
class VirtualMisoProblem:
    """Merged single-antenna-user problem produced by the channel reduction.

    ``rows`` has shape (M, B, N_t); row (m, b) is the virtual channel of
    stream m on resource block b. For B = 1 the ``matrix`` property exposes
    the plain (M, N_t) merged channel. ``weights`` are the per-stream
    priorities inherited from the owning users.
    """

    rows: np.ndarray
    weights: np.ndarray
    owner: np.ndarray
    n_tx: int

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.complex128)
        if self.rows.ndim == 2:
            self.rows = self.rows[:, None, :]
        self.weights = np.asarray(self.weights, dtype=float)
        self.owner = np.asarray(self.owner, dtype=int)
        m, _, nt = self.rows.shape
        if nt != self.n_tx or self.weights.shape != (m,) or self.owner.shape != (m,):
            raise ConfigError("inconsistent virtual problem shapes")
        if np.any(self.weights <= 0.0):
            raise ConfigError("virtual stream weights must be positive")

    @property
    def n_streams(self) -> int:
        return self.rows.shape[0]

    @property
    def n_rb(self) -> int:
        return self.rows.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        """The (M, N_t) merged channel; only defined for B = 1."""
        if self.n_rb != 1:
            raise ConfigError("matrix is only defined for single-RB problems")
        return self.rows[:, 0, :]


@dataclass
class KeyFeatures:
    """Low-dimensional quantities that determine a precoder in closed form.

    ``p`` (M,) are downlink stream powers; ``lam`` is (M,) for B = 1 or
    (M, B) for the multi-RB case; ``q`` (M, B) are the complex per-RB
    combiner weights of the multi-RB structure; ``gamma`` retains the
    complex scaling intermediates when extracted from a solver run.
    """

    p: np.ndarray
    lam: np.ndarray
    q: np.ndarray | None = None
    gamma: np.ndarray | None = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        if self.q is not None:
            self.q = np.asarray(self.q, dtype=np.complex128)
        if self.gamma is not None:
            self.gamma = np.asarray(self.gamma, dtype=np.complex128)

    def validate(self, total_power: float, tol: float = SOLVER_TOL):
        if np.any(self.p < -tol * total_power) or np.any(self.lam < -tol * total_power):
            raise ConfigError("feature powers must be nonnegative")
        for name, x in (("p", self.p), ("lambda", self.lam)):
            s = float(np.sum(x))
            if abs(s - total_power) > tol * total_power:
                raise ConfigError(f"sum of {name} is {s}, expected {total_power}")


@dataclass
class PackedInput:
    """Real square repacking of a Hermitian Gram matrix (network input)."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)


@dataclass
class WmmseTrace:
    """Per-iteration objective values and final receiver-side iterates.

    The returned precoder of a solver is the exact image of ``final_u`` /
    ``final_w`` under its own precoder-update formula, so feature extraction
    round-trips exactly regardless of the stopping tolerance.
    """

    wsr_per_iter: list[float] = field(default_factory=list)
    n_iters: int = 0
    final_u: np.ndarray | list | None = None
    final_w: np.ndarray | list | None = None
    converged: bool = False

    def check_monotone(self, slack: float = SOLVER_TOL) -> bool:
        w = np.asarray(self.wsr_per_iter)
        return bool(np.all(np.diff(w) >= -slack))

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_iters": self.n_iters,
                "converged": self.converged,
                "wsr_per_iter": [float(x) for x in self.wsr_per_iter],
            }
        )


# ---------------------------------------------------------------------------
# Rate evaluation
# ---------------------------------------------------------------------------


def _logdet_hermitian(a: np.ndarray) -> float:
    sign, ld = np.linalg.slogdet(a)
    if not np.isfinite(ld) or np.real(sign) <= 0.0:
        raise NumericalError("covariance matrix is numerically singular")
    return float(ld)


def _check_rate_inputs(channels: ChannelSet, precoders: PrecoderSet, cfg: SystemConfig):
    channels.check_config(cfg)
    if len(precoders.mats) != cfg.n_users:
        raise ConfigError("one precoding matrix per user is required")
    for k, v in enumerate(precoders.mats):
        if v.shape != (cfg.n_tx, cfg.streams[k]):
            raise ConfigError(
                f"precoder {k} has shape {v.shape}, expected ({cfg.n_tx}, {cfg.streams[k]})"
            )
        if not np.all(np.isfinite(v.view(np.float64))):
            raise ConfigError("precoder entries must be finite")


def sum_rate_mimo(channels: ChannelSet, precoders: PrecoderSet, cfg: SystemConfig) -> float:
    """Weighted sum rate of a single-RB downlink, in bits/s/Hz.

    Each user's rate is log2 det(I + H V V^H H^H C^-1) with C the
    interference-plus-noise covariance at that user.
    """
    _check_rate_inputs(channels, precoders, cfg)
    if channels.n_rb != 1:
        raise ConfigError("sum_rate_mimo expects a single resource block")
    return _wsr_one_rb(channels.data[:, 0], precoders, cfg)


def _wsr_one_rb(h_per_user: np.ndarray, precoders: PrecoderSet, cfg: SystemConfig) -> float:
    merged = precoders.merged()
    slices = cfg.stream_slices()
    eye = np.eye(cfg.n_rx)
    total = 0.0
    for k in range(cfg.n_users):
        s = h_per_user[k] @ merged  # N_r x M, all streams seen by user k
        g_all = s @ s.conj().T
        own = s[:, slices[k]]
        g_own = own @ own.conj().T
        c_int = cfg.noise_var * eye + (g_all - g_own)
        c_tot = cfg.noise_var * eye + g_all
        total += cfg.weights[k] * (_logdet_hermitian(c_tot) - _logdet_hermitian(c_int))
    return total / _LN2


def sum_rate_ofdm(channels: ChannelSet, precoders: PrecoderSet, cfg: SystemConfig) -> float:
    """Weighted sum rate over all resource blocks sharing one precoder set."""
    _check_rate_inputs(channels, precoders, cfg)
    return sum(
        _wsr_one_rb(channels.data[:, b], precoders, cfg) for b in range(channels.n_rb)
    )


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def normalize_vector(x: np.ndarray) -> np.ndarray:
    """x / ||x||_2; raises on zero or non-finite input."""
    x = np.asarray(x, dtype=np.complex128)
    if not np.all(np.isfinite(x.view(np.float64))):
        raise NumericalError("cannot normalize a non-finite vector")
    n = np.linalg.norm(x)
    if n <= 0.0:
        raise NumericalError("cannot normalize a zero vector")
    return x / n


def column_normalize(a: np.ndarray) -> np.ndarray:
    """Scale every column of a to unit l-2 norm; raises on zero columns."""
    a = np.asarray(a, dtype=np.complex128)
    norms = np.linalg.norm(a, axis=0)
    if np.any(norms <= 0.0) or not np.all(np.isfinite(norms)):
        raise NumericalError("cannot column-normalize with zero or non-finite columns")
    return a / norms


# ---------------------------------------------------------------------------
# Gram input packing
# ---------------------------------------------------------------------------


def weighted_gram(problem: VirtualMisoProblem) -> np.ndarray:
    """Hermitian Gram matrix of the weight-scaled virtual channels.

    Entry (i, j) is sqrt(beta_i beta_j) <h_i, h_j>. For multi-RB problems
    the rows are flattened in stream-major, RB-minor order, giving an
    (M*B, M*B) matrix.
    """
    m, b, _ = problem.rows.shape
    w = np.sqrt(np.repeat(problem.weights, b))
    flat = problem.rows.reshape(m * b, problem.n_tx)
    scaled = flat * w[:, None]
    return scaled @ scaled.conj().T


def pack_hermitian(g: np.ndarray, tol: float = 1e-10) -> PackedInput:
    """Repack a Hermitian matrix into one real square matrix.

    Layout: diagonal and upper triangle carry the real parts, the strictly
    lower triangle carries the imaginary parts of the upper triangle, i.e.
    P[i][j] = Re(G[i][j]) for i <= j and P[j][i] = Im(G[i][j]) for i < j.
    """
    g = np.asarray(g, dtype=np.complex128)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ConfigError("expected a square matrix")
    scale = max(1.0, float(np.max(np.abs(g)))) if g.size else 1.0
    if np.max(np.abs(g - g.conj().T)) > tol * scale:
        raise ConfigError("matrix is not Hermitian within tolerance")
    packed = np.triu(g.real) + np.tril(g.imag.T, -1)
    return PackedInput(packed)


def unpack_hermitian(packed: PackedInput | np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`pack_hermitian`."""
    p = packed.matrix if isinstance(packed, PackedInput) else np.asarray(packed, float)
    upper_re = np.triu(p)
    re = upper_re + np.triu(p, 1).T
    im_upper = np.tril(p, -1).T
    im = im_upper - im_upper.T
    return re + 1j * im
