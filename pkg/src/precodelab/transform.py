"""Reduction of the MIMO precoding problem to a virtual MISO one, plus the
closed-form precoder recovery, the eigen-zero-forcing baseline and the
full ideal pipeline.

Each user's channel is decomposed by a truncated SVD and the d_k strongest
singular pairs become per-stream single-antenna channels sigma_i t_i^H.
A precoder for the original problem is reassembled by grouping per-stream
columns back by owner. Recovery from the key features (p, lambda) exists in
two algebraically equivalent forms: a direct one inverting an N_t x N_t
matrix and a compressed one inverting only M x M; they are tied together by
the push-through identity (aI + A A^H)^-1 A = A (aI + A^H A)^-1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    ChannelSet,
    ConfigError,
    KeyFeatures,
    NumericalError,
    PrecoderSet,
    SystemConfig,
    VirtualMisoProblem,
    WmmseTrace,
    sum_rate_mimo,
    sum_rate_ofdm,
)
from .wmmse import WmmseOptions, _anchored_svd, wmmse_miso, wmmse_ofdm_miso

_ZERO_STREAM_TOL = 1e-12


@dataclass
class SvdTriple:
    """Truncated SVD of one user channel: H = left @ diag(singulars) @ right^H."""

    left: np.ndarray
    singulars: np.ndarray
    right: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singulars) @ self.right.conj().T


def svd_channel(h: np.ndarray) -> SvdTriple:
    """Deterministic truncated SVD (receive-side phase anchoring)."""
    u, s, vh = _anchored_svd(np.asarray(h, dtype=np.complex128))
    return SvdTriple(left=u, singulars=s, right=vh.conj().T)


def mimo_to_miso(channels: ChannelSet, cfg: SystemConfig) -> VirtualMisoProblem:
    """Assign each data stream the strongest remaining singular pair.

    Stream i of user k gets the virtual row sigma_{i,k} t_{i,k}^H (per
    resource block for multi-RB channels). Priority weights are inherited
    from the owning user. Requires d_k <= N_r for every user.
    """
    channels.check_config(cfg)
    for k, d in enumerate(cfg.streams):
        if d > cfg.n_rx:
            raise ConfigError(
                f"user {k} requests {d} streams but has {cfg.n_rx} receive antennas; "
                "the reduction needs rescheduling in this case"
            )
    m, b_rb = cfg.n_streams, cfg.granularity
    rows = np.zeros((m, b_rb, cfg.n_tx), dtype=np.complex128)
    offs = np.concatenate(([0], np.cumsum(cfg.streams)))
    for k in range(cfg.n_users):
        d = cfg.streams[k]
        for b in range(b_rb):
            _, s, vh = _anchored_svd(channels.data[k, b])
            rows[offs[k]:offs[k] + d, b, :] = s[:d, None] * vh[:d, :]
    return VirtualMisoProblem(
        rows=rows,
        weights=cfg.stream_weights(),
        owner=cfg.stream_owners(),
        n_tx=cfg.n_tx,
    )


def assemble_precoders(columns: np.ndarray, owner: np.ndarray,
                       cfg: SystemConfig) -> PrecoderSet:
    """Group per-stream columns (N_t x M) into per-user precoding matrices."""
    columns = np.asarray(columns, dtype=np.complex128)
    owner = np.asarray(owner, dtype=int)
    if columns.shape != (cfg.n_tx, cfg.n_streams):
        raise ConfigError(f"expected {cfg.n_tx} x {cfg.n_streams} columns")
    if not np.array_equal(owner, cfg.stream_owners()):
        raise ConfigError("stream owner map inconsistent with config")
    return PrecoderSet([columns[:, sl] for sl in cfg.stream_slices()])


def _normalize_columns_guarded(dirs: np.ndarray, p: np.ndarray,
                               strict: bool = True) -> np.ndarray:
    """Unit-normalize columns; a zero direction yields a zero column.

    Under ``strict`` a zero direction is only allowed for a (numerically)
    zero-power stream, which solver-extracted features guarantee. Learned
    features on zero-filled inputs may put residual power on dead streams;
    non-strict mode silently wastes that power instead of failing.
    """
    norms = np.linalg.norm(dirs, axis=0)
    out = np.zeros_like(dirs)
    for m in range(dirs.shape[1]):
        if norms[m] > 0.0:
            out[:, m] = dirs[:, m] / norms[m]
        elif strict and p[m] > _ZERO_STREAM_TOL:
            raise NumericalError(
                f"zero recovered direction for stream {m} with power {p[m]}"
            )
    return out


def recover_precoders(problem: VirtualMisoProblem, features: KeyFeatures,
                      cfg: SystemConfig, method: str = "auto",
                      strict: bool = True) -> np.ndarray:
    """Closed-form precoder columns from key features (single-RB problem).

    ``method``: "compressed" inverts an M x M matrix (the default whenever
    all lambda are strictly positive), "direct" inverts N_t x N_t and also
    tolerates zero lambda entries, "auto" picks between them.
    """
    if problem.n_rb != 1:
        raise ConfigError("use recover_precoders_ofdm for multi-RB problems")
    features.validate(cfg.total_power)
    m = problem.n_streams
    if m > cfg.n_tx:
        raise ConfigError("more streams than transmit antennas")
    p = features.p
    lam = features.lam.reshape(-1)
    if lam.shape != (m,) or p.shape != (m,):
        raise ConfigError("feature lengths inconsistent with problem size")
    a = problem.matrix.conj().T  # N_t x M
    sigma2 = cfg.noise_var

    if method == "auto":
        method = "compressed" if np.all(lam > 0.0) else "direct"
    if method == "compressed":
        if np.any(lam <= 0.0):
            raise NumericalError("compressed recovery needs strictly positive lambda")
        at = a * np.sqrt(lam)  # N_t x M weighted channels
        gt = at.conj().T @ at
        x = np.linalg.solve(sigma2 * np.eye(m) + gt, np.diag(1.0 / np.sqrt(lam)))
        dirs = at @ x
    elif method == "direct":
        cov = sigma2 * np.eye(cfg.n_tx) + (a * lam) @ a.conj().T
        dirs = np.linalg.solve(cov, a)
    else:
        raise ConfigError(f"unknown recovery method {method!r}")
    return _normalize_columns_guarded(dirs, p, strict=strict) * np.sqrt(p)


def recover_precoders_ofdm(problem: VirtualMisoProblem, features: KeyFeatures,
                           cfg: SystemConfig, strict: bool = True) -> np.ndarray:
    """Closed-form columns for the multi-RB structure.

    Column k is sqrt(p_k) times the normalized image of the q-weighted sum
    of user k's per-RB channels under the inverse regularized covariance.
    Invariant to any per-stream complex rescaling of q (absorbed by the
    normalization).
    """
    features.validate(cfg.total_power)
    m, b = problem.n_streams, problem.n_rb
    if features.q is None:
        raise ConfigError("multi-RB recovery requires combiner weights q")
    lam = features.lam.reshape(m * b)
    a = problem.rows.reshape(m * b, problem.n_tx).conj().T  # N_t x MB
    cov = cfg.noise_var * np.eye(cfg.n_tx) + (a * lam) @ a.conj().T
    rhs = np.zeros((cfg.n_tx, m), dtype=np.complex128)
    for k in range(m):
        rhs[:, k] = a[:, k * b:(k + 1) * b] @ features.q[k]
    dirs = np.linalg.solve(cov, rhs)
    return _normalize_columns_guarded(dirs, features.p, strict=strict) * np.sqrt(features.p)


def ezf(problem: VirtualMisoProblem, cfg: SystemConfig) -> np.ndarray:
    """Eigen-zero-forcing baseline: pseudo-inverse directions, equal power.

    Requires the merged virtual channel to have full row rank. For multi-RB
    problems the RB-averaged virtual rows are used (the baseline is only
    defined per merged channel; averaging is the natural shared-precoder
    reading).
    """
    m = problem.n_streams
    if m > cfg.n_tx:
        raise ConfigError("zero-forcing needs at least as many antennas as streams")
    hm = problem.rows.mean(axis=1)  # (M, N_t); identity for B = 1
    gram = hm @ hm.conj().T
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError("virtual channel is (numerically) rank deficient")
    pinv = hm.conj().T @ np.linalg.inv(gram)  # N_t x M
    dirs = pinv / np.linalg.norm(pinv, axis=0)
    return dirs * np.sqrt(cfg.total_power / m)


@dataclass
class LcpDiagnostics:
    """Pipeline bookkeeping: achieved rate and the loss versus the exact solver."""

    wsr_pipeline: float
    wsr_reference: float | None
    ratio: float | None
    miso_trace: WmmseTrace
    reference_trace: WmmseTrace | None


def lcp_ideal(channels: ChannelSet, cfg: SystemConfig,
              opts: WmmseOptions = WmmseOptions(),
              reference: bool = True) -> tuple[PrecoderSet, LcpDiagnostics]:
    """Reduction pipeline with the exact MISO solver in the middle.

    Runs mimo_to_miso -> wmmse_miso (or the multi-RB solver) -> reassembly,
    and, when ``reference`` is set and B = 1, a full WMMSE run on the same
    channels so the reduction loss can be reported as a ratio.
    """
    from .wmmse import wmmse_mimo  # local import to avoid cycle at module load

    problem = mimo_to_miso(channels, cfg)
    if cfg.granularity == 1:
        cols, trace = wmmse_miso(problem, cfg, opts)
    else:
        cols, trace = wmmse_ofdm_miso(problem, cfg, opts)
    precoders = assemble_precoders(cols, problem.owner, cfg)

    rate = sum_rate_mimo if cfg.granularity == 1 else sum_rate_ofdm
    wsr = rate(channels, precoders, cfg)
    wsr_ref, ratio, ref_trace = None, None, None
    if reference and cfg.granularity == 1:
        ref_pre, ref_trace = wmmse_mimo(channels, cfg, opts)
        wsr_ref = sum_rate_mimo(channels, ref_pre, cfg)
        ratio = wsr / wsr_ref if wsr_ref > 0.0 else None
    return precoders, LcpDiagnostics(
        wsr_pipeline=wsr, wsr_reference=wsr_ref, ratio=ratio,
        miso_trace=trace, reference_trace=ref_trace,
    )
