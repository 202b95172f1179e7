"""Iterative weighted-MMSE solvers for the weighted sum-rate problem.

Three solvers share the same block-coordinate structure (MMSE receiver,
MSE weight, transmit precoder): the general multi-antenna-user solver, the
single-antenna-user (virtual MISO) solver, and the multi-resource-block
MISO solver where several blocks share one precoding column per stream.

The power constraint is handled through the scaled-noise penalty inside the
updates, which makes the objective invariant to a common rescaling of all
precoders; each recorded objective value is therefore the true weighted sum
rate of the iterate rescaled to the full power budget, and the recorded
trace is monotone non-decreasing up to floating-point error.

The MISO solvers run entirely in the Gram domain of the virtual channels
(M x M inner products); the transmit-side dimension only enters when the
final columns are materialized. This keeps the cost independent of the
antenna count and makes the solution an exact function of the Gram matrix.
"""

from __future__ import annotations

import math
import warnings
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
)

_LN2 = math.log(2.0)


@dataclass(frozen=True)
class WmmseOptions:
    """Stopping rule and initialization scheme (matched filter, equal power)."""

    max_iters: int = 300
    rel_tol: float = 1e-6
    init_scheme: str = "matched-filter-equal-power"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.rel_tol <= 0.0:
            raise ConfigError("rel_tol must be positive")
        if self.init_scheme != "matched-filter-equal-power":
            raise ConfigError(f"unknown init scheme {self.init_scheme!r}")


def _converged(wsr: list[float], rel_tol: float) -> bool:
    if len(wsr) < 2:
        return False
    return abs(wsr[-1] - wsr[-2]) / max(abs(wsr[-1]), 1e-12) < rel_tol


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(np.asarray(a).view(np.float64))):
            raise NumericalError("solver iterate became non-finite")


# ---------------------------------------------------------------------------
# General MIMO solver
# ---------------------------------------------------------------------------


def _anchored_svd(h: np.ndarray):
    """SVD with a deterministic phase: each left singular vector is rotated
    so its largest-modulus entry is real positive (ties: lowest index).

    Anchoring on the receive side keeps the right singular vectors exactly
    covariant under a common transmit-side unitary, which the Gram-input
    invariance of the reduction relies on.
    """
    u, s, vh = np.linalg.svd(h, full_matrices=False)
    for i in range(s.shape[0]):
        col = u[:, i]
        j = int(np.argmax(np.abs(col)))
        a = col[j]
        if np.abs(a) > 0.0:
            rho = np.conj(a) / np.abs(a)
            u[:, i] = col * rho
            vh[i, :] = vh[i, :] * np.conj(rho)
    return u, s, vh


def _mrt_init_mimo(channels: ChannelSet, cfg: SystemConfig) -> list[np.ndarray]:
    m_total = cfg.n_streams
    mats = []
    for k in range(cfg.n_users):
        _, s, vh = _anchored_svd(channels.data[k, 0])
        d = cfg.streams[k]
        cols = vh[:d].conj().T  # N_t x d, unit columns (zero rows stay zero)
        scale = np.where(s[:d] > 0.0, math.sqrt(cfg.total_power / m_total), 0.0)
        mats.append(cols * scale)
    return mats


def _rescaled_wsr(channels: ChannelSet, mats: list[np.ndarray], cfg: SystemConfig) -> float:
    pre = PrecoderSet([v.copy() for v in mats]).scaled_to_power(cfg.total_power)
    return sum_rate_mimo(channels, pre, cfg)


def wmmse_mimo(channels: ChannelSet, cfg: SystemConfig,
               opts: WmmseOptions = WmmseOptions()) -> tuple[PrecoderSet, WmmseTrace]:
    """Block-coordinate WMMSE for the single-RB multi-antenna-user downlink.

    Returns precoders rescaled to the exact power budget and the iteration
    trace (one weighted-sum-rate value per completed receiver/weight/precoder
    cycle, starting from the initialization).
    """
    channels.check_config(cfg)
    if channels.n_rb != 1:
        raise ConfigError("wmmse_mimo expects a single resource block")
    h = channels.data[:, 0]
    sigma2, p_tot = cfg.noise_var, cfg.total_power
    alpha = np.asarray(cfg.weights)
    eye_r = np.eye(cfg.n_rx)
    eye_t = np.eye(cfg.n_tx)

    v = _mrt_init_mimo(channels, cfg)
    trace = WmmseTrace(wsr_per_iter=[_rescaled_wsr(channels, v, cfg)])
    u = [None] * cfg.n_users
    w = [None] * cfg.n_users

    for it in range(opts.max_iters):
        power = sum(float(np.sum(np.abs(vk) ** 2)) for vk in v)
        # receiver update: MMSE filter per user
        for k in range(cfg.n_users):
            hv = [h[k] @ vm for vm in v]
            cov = (sigma2 / p_tot) * power * eye_r
            for s in hv:
                cov = cov + s @ s.conj().T
            try:
                u[k] = np.linalg.solve(cov, hv[k])
            except np.linalg.LinAlgError as e:
                raise NumericalError("singular receiver covariance") from e
        # weight update: inverse MSE matrix (Hermitian at the MMSE receiver)
        for k in range(cfg.n_users):
            e = np.eye(cfg.streams[k]) - u[k].conj().T @ h[k] @ v[k]
            e = 0.5 * (e + e.conj().T)
            try:
                w[k] = np.linalg.inv(e)
            except np.linalg.LinAlgError as exc:
                raise NumericalError("singular MSE matrix") from exc
            w[k] = 0.5 * (w[k] + w[k].conj().T)
        # precoder update: one shared regularized inverse
        trace_term = sum(
            alpha[m] * float(np.real(np.trace(w[m] @ u[m].conj().T @ u[m])))
            for m in range(cfg.n_users)
        )
        j = (sigma2 / p_tot) * trace_term * eye_t
        for m in range(cfg.n_users):
            hu = h[m].conj().T @ u[m]
            j = j + alpha[m] * (hu @ w[m] @ hu.conj().T)
        try:
            j_inv_rhs = np.linalg.solve(
                j, np.hstack([h[k].conj().T @ u[k] @ w[k] for k in range(cfg.n_users)])
            )
        except np.linalg.LinAlgError as e:
            raise NumericalError("singular precoder update matrix") from e
        offs = np.concatenate(([0], np.cumsum(cfg.streams)))
        v = [alpha[k] * j_inv_rhs[:, offs[k]:offs[k + 1]] for k in range(cfg.n_users)]
        _check_finite(*v)

        trace.wsr_per_iter.append(_rescaled_wsr(channels, v, cfg))
        trace.n_iters = it + 1
        if _converged(trace.wsr_per_iter, opts.rel_tol):
            trace.converged = True
            break

    trace.final_u = [uk.copy() for uk in u]
    trace.final_w = [wk.copy() for wk in w]
    out = PrecoderSet(v).scaled_to_power(cfg.total_power)
    return out, trace


# ---------------------------------------------------------------------------
# Virtual MISO solver (Gram domain)
# ---------------------------------------------------------------------------


def _miso_scalars(gx: np.ndarray, pw: np.ndarray, sigma2: float, p_tot: float):
    """Per-stream MMSE receiver u and weight w from channel-precoder products."""
    diag = np.diag(gx)
    denom = (sigma2 / p_tot) * np.sum(pw) + np.sum(np.abs(gx) ** 2, axis=1)
    if np.any(denom <= 0.0):
        raise NumericalError("degenerate receiver update (all-zero precoders?)")
    u = diag / denom
    w_c = 1.0 / (1.0 - np.conj(u) * diag)
    if np.max(np.abs(w_c.imag)) > 1e-9 * max(1.0, float(np.max(np.abs(w_c.real)))):
        raise NumericalError("MSE weight acquired a non-negligible imaginary part")
    return u, w_c.real


def _miso_wsr(gx: np.ndarray, pw: np.ndarray, beta: np.ndarray,
              sigma2: float, p_tot: float) -> float:
    """Weighted sum rate of the power-rescaled iterate, from Gram-domain data."""
    total_pw = float(np.sum(pw))
    if total_pw <= 0.0:
        return 0.0
    c2 = p_tot / total_pw
    sig = np.abs(np.diag(gx)) ** 2
    interf = np.sum(np.abs(gx) ** 2, axis=1) - sig
    sinr = c2 * sig / (c2 * interf + sigma2)
    return float(np.sum(beta * np.log1p(sinr)) / _LN2)


def _lam_gamma(u: np.ndarray, w: np.ndarray, beta: np.ndarray, p_tot: float):
    s = float(np.sum(beta * np.abs(u) ** 2 * w))
    if s <= 0.0:
        raise NumericalError("zero scaling denominator (degenerate channels)")
    lam = p_tot * beta * np.abs(u) ** 2 * w / s
    gamma = p_tot * beta * u * w / s
    return lam, gamma


def wmmse_miso(problem: VirtualMisoProblem, cfg: SystemConfig,
               opts: WmmseOptions = WmmseOptions()) -> tuple[np.ndarray, WmmseTrace]:
    """WMMSE on the merged single-antenna-user problem.

    Returns (columns, trace) where columns is N_t x M. The trace stores the
    final per-stream scalars (u, w); the returned columns are exactly the
    precoder-update image of those scalars.
    """
    if problem.n_rb != 1:
        raise ConfigError("wmmse_miso expects a single-RB problem")
    m = problem.n_streams
    if m > cfg.n_tx:
        raise ConfigError("more streams than transmit antennas")
    a = problem.matrix.conj().T          # N_t x M, columns are h_m^H
    g = a.conj().T @ a                   # M x M Gram of virtual channels
    beta = problem.weights
    sigma2, p_tot = cfg.noise_var, cfg.total_power
    eye_m = np.eye(m)

    gd = np.real(np.diag(g)).copy()
    active = gd > 0.0
    if not np.any(active):
        raise NumericalError("all virtual channels are zero")
    c0 = np.zeros(m)
    c0[active] = math.sqrt(p_tot / m) / np.sqrt(gd[active])
    x = np.diag(c0).astype(np.complex128)

    gx = g @ x
    pw = np.real(np.einsum("im,im->m", np.conj(x), gx))
    trace = WmmseTrace(wsr_per_iter=[_miso_wsr(gx, pw, beta, sigma2, p_tot)])
    u, w = _miso_scalars(gx, pw, sigma2, p_tot)

    for it in range(opts.max_iters):
        lam, gamma = _lam_gamma(u, w, beta, p_tot)
        try:
            x = np.linalg.solve(sigma2 * eye_m + lam[:, None] * g, np.diag(gamma))
        except np.linalg.LinAlgError as e:
            raise NumericalError("singular precoder update") from e
        _check_finite(x)
        gx = g @ x
        pw = np.real(np.einsum("im,im->m", np.conj(x), gx))
        u, w = _miso_scalars(gx, pw, sigma2, p_tot)

        trace.wsr_per_iter.append(_miso_wsr(gx, pw, beta, sigma2, p_tot))
        trace.n_iters = it + 1
        if _converged(trace.wsr_per_iter, opts.rel_tol):
            trace.converged = True
            break

    # one extra precoder update so the returned columns are the exact image
    # of the stored (u, w) under the closed-form structure
    lam, gamma = _lam_gamma(u, w, beta, p_tot)
    x = np.linalg.solve(sigma2 * eye_m + lam[:, None] * g, np.diag(gamma))
    gx = g @ x
    pw = np.real(np.einsum("im,im->m", np.conj(x), gx))
    trace.wsr_per_iter.append(_miso_wsr(gx, pw, beta, sigma2, p_tot))
    trace.final_u = u.copy()
    trace.final_w = w.copy()

    cols = a @ x
    total_pw = float(np.sum(pw))
    if total_pw > 0.0:
        cols = cols * math.sqrt(p_tot / total_pw)
    return cols, trace


def extract_features_miso(trace: WmmseTrace, problem: VirtualMisoProblem,
                          cfg: SystemConfig) -> KeyFeatures:
    """Key features (p, lambda, gamma) from a converged single-RB trace."""
    if not trace.converged:
        warnings.warn("extracting features from a non-converged trace", stacklevel=2)
    u = np.asarray(trace.final_u)
    w = np.asarray(trace.final_w)
    beta = problem.weights
    sigma2, p_tot = cfg.noise_var, cfg.total_power
    lam, gamma = _lam_gamma(u, w, beta, p_tot)

    a = problem.matrix.conj().T
    g = a.conj().T @ a
    x = np.linalg.solve(sigma2 * np.eye(problem.n_streams) + lam[:, None] * g,
                        np.diag(gamma))
    p_raw = np.real(np.einsum("im,im->m", np.conj(x), g @ x))
    total = float(np.sum(p_raw))
    if total <= 0.0:
        raise NumericalError("zero total power in extracted features")
    p = p_raw * (p_tot / total)
    feats = KeyFeatures(p=p, lam=lam, gamma=gamma)
    feats.validate(p_tot)
    return feats


# ---------------------------------------------------------------------------
# Multi-RB MISO solver (Gram domain, streams share one column across RBs)
# ---------------------------------------------------------------------------


def _ofdm_scalars(gy: np.ndarray, pw: np.ndarray, m: int, b: int,
                  sigma2: float, p_tot: float):
    """Per-(stream, RB) scalars from gy[(m,b), n] = <h_{m,b}, v_n>."""
    own = gy.reshape(m, b, m)[np.arange(m), :, np.arange(m)]  # (M, B)
    denom = (sigma2 / p_tot) * np.sum(pw) + np.sum(np.abs(gy) ** 2, axis=1).reshape(m, b)
    if np.any(denom <= 0.0):
        raise NumericalError("degenerate receiver update")
    u = own / denom
    w_c = 1.0 / (1.0 - np.conj(u) * own)
    if np.max(np.abs(w_c.imag)) > 1e-9 * max(1.0, float(np.max(np.abs(w_c.real)))):
        raise NumericalError("MSE weight acquired a non-negligible imaginary part")
    return u, w_c.real


def _ofdm_wsr(gy: np.ndarray, pw: np.ndarray, beta: np.ndarray, m: int, b: int,
              sigma2: float, p_tot: float) -> float:
    total_pw = float(np.sum(pw))
    if total_pw <= 0.0:
        return 0.0
    c2 = p_tot / total_pw
    own = gy.reshape(m, b, m)[np.arange(m), :, np.arange(m)]
    sig = np.abs(own) ** 2
    interf = np.sum(np.abs(gy) ** 2, axis=1).reshape(m, b) - sig
    sinr = c2 * sig / (c2 * interf + sigma2)
    return float(np.sum(beta[:, None] * np.log1p(sinr)) / _LN2)


def _ofdm_lam_q(u: np.ndarray, w: np.ndarray, beta: np.ndarray, p_tot: float):
    bw = beta[:, None]
    s = float(np.sum(bw * np.abs(u) ** 2 * w))
    if s <= 0.0:
        raise NumericalError("zero scaling denominator")
    lam = p_tot * bw * np.abs(u) ** 2 * w / s   # (M, B), sums to P_T
    q = bw * u * w                              # (M, B), unnormalized combiners
    return lam, q, s


def _ofdm_precoder_update(g: np.ndarray, lam: np.ndarray, q: np.ndarray, s: float,
                          sigma2: float, p_tot: float, m: int, b: int) -> np.ndarray:
    rhs = np.zeros((m * b, m), dtype=np.complex128)
    for k in range(m):
        rhs[k * b:(k + 1) * b, k] = (p_tot / s) * q[k]
    try:
        return np.linalg.solve(sigma2 * np.eye(m * b) + lam.reshape(-1)[:, None] * g, rhs)
    except np.linalg.LinAlgError as e:
        raise NumericalError("singular precoder update") from e


def wmmse_ofdm_miso(problem: VirtualMisoProblem, cfg: SystemConfig,
                    opts: WmmseOptions = WmmseOptions()) -> tuple[np.ndarray, WmmseTrace]:
    """WMMSE for the multi-RB MISO problem with one column per stream.

    The iterate lives in the Gram domain of the MB flattened virtual
    channels (stream-major, RB-minor). Reduces to :func:`wmmse_miso` when
    B = 1 (same initialization and update order).
    """
    m, b = problem.n_streams, problem.n_rb
    if m > cfg.n_tx:
        raise ConfigError("more streams than transmit antennas")
    a = problem.rows.reshape(m * b, problem.n_tx).conj().T  # N_t x MB
    g = a.conj().T @ a                                      # MB x MB
    beta = problem.weights
    sigma2, p_tot = cfg.noise_var, cfg.total_power

    # matched-filter init: column k along the equal-weight sum of its RB rows
    y = np.zeros((m * b, m), dtype=np.complex128)
    for k in range(m):
        blk = slice(k * b, (k + 1) * b)
        nrm2 = float(np.real(np.sum(g[blk, blk])))
        if nrm2 > 0.0:
            y[blk, k] = math.sqrt(p_tot / m) / math.sqrt(nrm2)
    gy = g @ y
    pw = np.real(np.einsum("im,im->m", np.conj(y), gy))
    if not np.any(pw > 0.0):
        raise NumericalError("all virtual channels are zero")
    trace = WmmseTrace(wsr_per_iter=[_ofdm_wsr(gy, pw, beta, m, b, sigma2, p_tot)])
    u, w = _ofdm_scalars(gy, pw, m, b, sigma2, p_tot)

    for it in range(opts.max_iters):
        lam, q, s = _ofdm_lam_q(u, w, beta, p_tot)
        y = _ofdm_precoder_update(g, lam, q, s, sigma2, p_tot, m, b)
        _check_finite(y)
        gy = g @ y
        pw = np.real(np.einsum("im,im->m", np.conj(y), gy))
        u, w = _ofdm_scalars(gy, pw, m, b, sigma2, p_tot)

        trace.wsr_per_iter.append(_ofdm_wsr(gy, pw, beta, m, b, sigma2, p_tot))
        trace.n_iters = it + 1
        if _converged(trace.wsr_per_iter, opts.rel_tol):
            trace.converged = True
            break

    lam, q, s = _ofdm_lam_q(u, w, beta, p_tot)
    y = _ofdm_precoder_update(g, lam, q, s, sigma2, p_tot, m, b)
    gy = g @ y
    pw = np.real(np.einsum("im,im->m", np.conj(y), gy))
    trace.wsr_per_iter.append(_ofdm_wsr(gy, pw, beta, m, b, sigma2, p_tot))
    trace.final_u = u.copy()
    trace.final_w = w.copy()

    cols = a @ y
    total_pw = float(np.sum(pw))
    if total_pw > 0.0:
        cols = cols * math.sqrt(p_tot / total_pw)
    return cols, trace


def fix_q_convention(q: np.ndarray) -> np.ndarray:
    """Canonical combiner scale/phase: max_b |q_{k,b}| = 1, arg(q_{k,1}) = 0.

    The per-stream positive scale and common phase are absorbed by the
    normalization inside the recovery, so this convention changes nothing
    downstream; it makes (p, lambda, q) unique and learnable.
    """
    q = np.asarray(q, dtype=np.complex128).copy()
    for k in range(q.shape[0]):
        s = float(np.max(np.abs(q[k])))
        if s <= 0.0:
            continue
        q[k] = q[k] / s
        anchor = q[k, 0]
        if np.abs(anchor) <= 1e-12:
            # first-RB combiner numerically zero: anchor on the largest one
            anchor = q[k, int(np.argmax(np.abs(q[k])))]
        q[k] = q[k] * (np.conj(anchor) / np.abs(anchor))
    return q


def extract_features_ofdm(trace: WmmseTrace, problem: VirtualMisoProblem,
                          cfg: SystemConfig) -> KeyFeatures:
    """Key features (p, lambda, q) from a converged multi-RB trace."""
    if not trace.converged:
        warnings.warn("extracting features from a non-converged trace", stacklevel=2)
    u = np.asarray(trace.final_u)
    w = np.asarray(trace.final_w)
    m, b = problem.n_streams, problem.n_rb
    beta = problem.weights
    sigma2, p_tot = cfg.noise_var, cfg.total_power

    lam, q_raw, s = _ofdm_lam_q(u, w, beta, p_tot)
    a = problem.rows.reshape(m * b, problem.n_tx).conj().T
    g = a.conj().T @ a
    y = _ofdm_precoder_update(g, lam, q_raw, s, sigma2, p_tot, m, b)
    p_raw = np.real(np.einsum("im,im->m", np.conj(y), g @ y))
    total = float(np.sum(p_raw))
    if total <= 0.0:
        raise NumericalError("zero total power in extracted features")
    feats = KeyFeatures(p=p_raw * (p_tot / total), lam=lam, q=fix_q_convention(q_raw))
    feats.validate(p_tot)
    return feats
