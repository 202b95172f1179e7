"""Supervised-then-unsupervised training of the feature predictor.

The supervised stage fits solver-extracted features under mean squared
error; the unsupervised stage maximizes the achieved weighted sum rate by
differentiating through the closed-form precoder recovery (the compressed
M-dimensional inverse) and the exact rate expression on the true channels.
Imperfect-CSI training feeds noisy inputs to the network and recovery while
scoring the rate on the clean channels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .channels import ChannelParams, CsiNoiseModel, add_csi_noise, gen_channel
from .core import (
    ChannelSet,
    ConfigError,
    NumericalError,
    PrecodingError,
    SystemConfig,
    VirtualMisoProblem,
    pack_hermitian,
    weighted_gram,
)
from .network import NetworkModel, forward_batch, forward_graph, graph_params
from .transform import mimo_to_miso
from .wmmse import WmmseOptions, extract_features_miso, extract_features_ofdm, \
    wmmse_miso, wmmse_ofdm_miso

_LN2 = math.log(2.0)

# floor applied to predicted lambda before the inverse square root so the
# compressed recovery stays finite when a sigmoid output underflows
LAMBDA_FLOOR_FRAC = 1e-6


class TrainingDiverged(PrecodingError):
    """Validation sum rate collapsed below half of the label sum rate."""


@dataclass(frozen=True)
class TrainConfig:
    lr_supervised: float = 0.01
    lr_unsupervised: float = 0.001
    lr_decay: float = 0.5
    lr_decay_every: int = 10
    batch_size: int = 256
    n_train: int = 50_000
    n_val: int = 5_000
    n_test: int = 5_000
    sup_epochs: int = 50
    unsup_epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if min(self.lr_supervised, self.lr_unsupervised) <= 0.0:
            raise ConfigError("learning rates must be positive")
        if min(self.batch_size, self.n_train, self.n_val) < 1:
            raise ConfigError("dataset sizes and batch size must be positive")


@dataclass(frozen=True)
class PruneSchedule:
    """Cumulative filter-removal counts for the first two convolutions."""

    rounds: tuple[tuple[int, int], ...] = ((8, 4), (12, 6), (15, 7))
    fine_tune_lr: float = 2e-4
    fine_tune_epochs: int = 10


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Aligned sample arrays for training and evaluation.

    ``clean`` holds the true channels used for rate evaluation; ``rows``
    the virtual channels of the input-side problem (built from the noisy
    copy when one exists); ``packed`` the network inputs; labels are the
    solver-extracted features of the input-side problem and ``label_wsr``
    the rate those labels achieve on the clean channels.
    """

    cfg: SystemConfig
    clean: np.ndarray                    # (n, K, B, N_r, N_t)
    rows: np.ndarray                     # (n, M, B, N_t)
    packed: np.ndarray                   # (n, S, S)
    label_p: np.ndarray                  # (n, M)
    label_lam: np.ndarray                # (n, M*B)
    label_wsr: np.ndarray                # (n,)
    noisy: np.ndarray | None = None
    label_q: np.ndarray | None = None    # (n, M, B) complex
    per_stream_gram: np.ndarray | None = None  # (n, M, B, B) packed, real

    def __len__(self):
        return self.clean.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(
            cfg=self.cfg, clean=self.clean[idx], rows=self.rows[idx],
            packed=self.packed[idx], label_p=self.label_p[idx],
            label_lam=self.label_lam[idx], label_wsr=self.label_wsr[idx],
            noisy=None if self.noisy is None else self.noisy[idx],
            label_q=None if self.label_q is None else self.label_q[idx],
            per_stream_gram=(None if self.per_stream_gram is None
                             else self.per_stream_gram[idx]),
        )


def _pack_batchable(g: np.ndarray) -> np.ndarray:
    """Hermitian repacking for stacked matrices (..., n, n)."""
    return np.triu(g.real) + np.tril(np.swapaxes(g.imag, -1, -2), -1)


def _per_stream_grams(problem: VirtualMisoProblem) -> np.ndarray:
    """Packed (B, B) Gram of each stream's per-RB rows, weight-scaled."""
    rows = problem.rows  # (M, B, N_t)
    g = np.einsum("mbt,mct->mbc", rows, rows.conj())
    g = g * problem.weights[:, None, None]
    return _pack_batchable(g)


def build_dataset(params: ChannelParams, cfg: SystemConfig,
                  noise: CsiNoiseModel | None, count: int, seed: int,
                  active_users: list[int] | None = None,
                  opts: WmmseOptions = WmmseOptions()) -> Dataset:
    """Generate ``count`` labeled samples.

    When ``noise`` is given, a corrupted copy of each draw feeds the
    reduction/labels/input while the clean draw is kept for rates. When
    ``active_users`` is given, each sample keeps only a sampled number of
    active users and zero-fills the rest (stream count unchanged).
    """
    from .core import sum_rate_mimo, sum_rate_ofdm
    from .transform import assemble_precoders, recover_precoders, \
        recover_precoders_ofdm

    m, b = cfg.n_streams, cfg.granularity
    n_clean = np.zeros((count, cfg.n_users, b, cfg.n_rx, cfg.n_tx), complex)
    n_noisy = np.zeros_like(n_clean) if noise is not None else None
    rows = np.zeros((count, m, b, cfg.n_tx), complex)
    packed = np.zeros((count, m * b, m * b))
    label_p = np.zeros((count, m))
    label_lam = np.zeros((count, m * b))
    label_q = np.zeros((count, m, b), complex) if b > 1 else None
    psg = np.zeros((count, m, b, b)) if b > 1 else None
    label_wsr = np.zeros(count)
    sel_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                           spawn_key=(0xAC,)))
    for i in range(count):
        sub = int(np.random.SeedSequence(entropy=seed, spawn_key=(i,)).generate_state(1)[0])
        ch = gen_channel(params, cfg, seed=sub)
        if active_users is not None:
            k_act = int(sel_rng.choice(active_users))
            data = ch.data.copy()
            data[k_act:] = 0.0
            ch = ChannelSet(data)
        n_clean[i] = ch.data
        side = ch
        if noise is not None:
            noisy = add_csi_noise(ch, noise, seed=sub)
            n_noisy[i] = noisy.data
            side = ChannelSet(noisy.data)
        problem = mimo_to_miso(side, cfg)
        rows[i] = problem.rows
        packed[i] = pack_hermitian(weighted_gram(problem)).matrix
        if b == 1:
            cols, trace = wmmse_miso(problem, cfg, opts)
            feats = extract_features_miso(trace, problem, cfg)
            label_p[i] = feats.p
            label_lam[i] = feats.lam
            rec = recover_precoders(problem, feats, cfg)
            label_wsr[i] = sum_rate_mimo(
                ch, assemble_precoders(rec, problem.owner, cfg), cfg)
        else:
            cols, trace = wmmse_ofdm_miso(problem, cfg, opts)
            feats = extract_features_ofdm(trace, problem, cfg)
            label_p[i] = feats.p
            label_lam[i] = feats.lam.reshape(-1)
            label_q[i] = feats.q
            psg[i] = _per_stream_grams(problem)
            rec = recover_precoders_ofdm(problem, feats, cfg)
            label_wsr[i] = sum_rate_ofdm(
                ch, assemble_precoders(rec, problem.owner, cfg), cfg)
    return Dataset(cfg=cfg, clean=n_clean, rows=rows, packed=packed,
                   label_p=label_p, label_lam=label_lam, label_wsr=label_wsr,
                   noisy=n_noisy, label_q=label_q, per_stream_gram=psg)


# ---------------------------------------------------------------------------
# Dataset files: JSON header line + named little-endian float64 blocks.
# ---------------------------------------------------------------------------

_DATASET_FORMAT = "lcp-dataset/1"


def save_dataset(path, ds: Dataset):
    blocks = [("clean", ds.clean, True), ("rows", ds.rows, True),
              ("packed", ds.packed, False), ("label_p", ds.label_p, False),
              ("label_lam", ds.label_lam, False), ("label_wsr", ds.label_wsr, False)]
    if ds.noisy is not None:
        blocks.append(("noisy", ds.noisy, True))
    if ds.label_q is not None:
        blocks.append(("label_q", ds.label_q, True))
    if ds.per_stream_gram is not None:
        blocks.append(("per_stream_gram", ds.per_stream_gram, False))
    header = {
        "format": _DATASET_FORMAT,
        "cfg": {
            "n_tx": ds.cfg.n_tx, "n_rx": ds.cfg.n_rx, "n_users": ds.cfg.n_users,
            "streams": list(ds.cfg.streams), "total_power": ds.cfg.total_power,
            "noise_var": ds.cfg.noise_var, "weights": list(ds.cfg.weights),
            "granularity": ds.cfg.granularity,
        },
        "blocks": [
            {"name": n, "complex": c, "shape": list(a.shape)} for n, a, c in blocks
        ],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, a, is_complex in blocks:
            if is_complex:
                buf = np.empty(a.shape + (2,), dtype="<f8")
                buf[..., 0] = a.real
                buf[..., 1] = a.imag
            else:
                buf = np.ascontiguousarray(a, dtype="<f8")
            f.write(buf.tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("format") != _DATASET_FORMAT:
            raise ConfigError(f"unexpected dataset format {header.get('format')!r}")
        arrays = {}
        for blk in header["blocks"]:
            shape = tuple(blk["shape"])
            n = int(np.prod(shape))
            if blk["complex"]:
                raw = np.frombuffer(f.read(n * 16), dtype="<f8").reshape(shape + (2,))
                arrays[blk["name"]] = raw[..., 0] + 1j * raw[..., 1]
            else:
                arrays[blk["name"]] = np.frombuffer(f.read(n * 8),
                                                    dtype="<f8").reshape(shape)
    cfg = SystemConfig.from_dict(header["cfg"])
    return Dataset(cfg=cfg, clean=arrays["clean"], rows=arrays["rows"],
                   packed=arrays["packed"], label_p=arrays["label_p"],
                   label_lam=arrays["label_lam"], label_wsr=arrays["label_wsr"],
                   noisy=arrays.get("noisy"), label_q=arrays.get("label_q"),
                   per_stream_gram=arrays.get("per_stream_gram"))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_supervised(pred: dict, batch: Dataset) -> Tensor:
    """Mean squared error over the concatenated feature vectors."""
    parts = [pred["p"], pred["lam"]]
    targets = [batch.label_p, batch.label_lam]
    if "q_re" in pred:
        q = _q_convention_graph(pred["q_re"], pred["q_im"])
        n, m, b = pred["q_re"].shape
        parts += [q[0].reshape(n, m * b), q[1].reshape(n, m * b)]
        targets += [batch.label_q.real.reshape(n, -1),
                    batch.label_q.imag.reshape(n, -1)]
    diff = ad.concat(parts, axis=1) - Tensor(np.concatenate(targets, axis=1))
    return (diff * diff).mean()


def _q_convention_graph(q_re: Tensor, q_im: Tensor):
    """Differentiable scale/phase canonicalization of predicted combiners."""
    mag2 = q_re * q_re + q_im * q_im
    peak = _rb_max(mag2).clamp_min(1e-20)
    scale = peak ** -0.5
    re = q_re * scale
    im = q_im * scale
    # rotate by the conjugate phase of the first-RB entry
    a_re = re[:, :, 0:1]
    a_im = im[:, :, 0:1]
    a_mag = ((a_re * a_re + a_im * a_im).clamp_min(1e-20)) ** 0.5
    cos = a_re / a_mag
    sin = a_im / a_mag
    return (re * cos + im * sin, im * cos - re * sin)


def _rb_max(mag2: Tensor) -> Tensor:
    # exact max over the RB axis via one-hot gather (piecewise differentiable)
    idx = np.argmax(mag2.data, axis=2)
    onehot = np.zeros_like(mag2.data)
    np.put_along_axis(onehot, idx[:, :, None], 1.0, axis=2)
    return (mag2 * Tensor(onehot)).sum(axis=2, keepdims=True)


def _recovery_graph(p: Tensor, lam: Tensor, rows: np.ndarray, noise_var: float,
                    total_power: float, q=None):
    """Differentiable closed-form recovery, batched.

    rows: (N, M, B, N_t) constant virtual channels. p: (N, M); lam: (N, M*B).
    q: optional (re, im) pair of (N, M, B) combiner weights (multi-RB).
    Returns complex precoder columns as a pair of (N, N_t, M) tensors.
    """
    n, m, b, n_tx = rows.shape
    a = np.swapaxes(rows.reshape(n, m * b, n_tx), 1, 2).conj()  # (N, N_t, MB)
    a_re, a_im = Tensor(a.real), Tensor(a.imag)
    lam_f = lam.clamp_min(LAMBDA_FLOOR_FRAC * total_power)
    sq = (lam_f ** 0.5).reshape(n, 1, m * b)
    ht = (a_re * sq, a_im * sq)                                  # (N, N_t, MB)
    gt = cmat_herm(ht)                                           # (N, MB, MB)
    eye = Tensor(np.broadcast_to(noise_var * np.eye(m * b), (n, m * b, m * b)).copy())
    inv = ad.cherm_inverse((gt[0] + eye, gt[1]))
    if b == 1:
        x = ad.cscale(inv, (lam_f ** -0.5).reshape(n, 1, m))
        dirs = ad.cmatmul(ht, x)                                 # (N, N_t, M)
    else:
        # combine each stream's RB channels with q, then apply the regularized
        # inverse through the push-through identity:
        # (s2 I + H~ H~^H)^-1 C = (C - H~ (s2 I + G~)^-1 H~^H C) / s2
        filt = _q_filter(a_re, a_im, q[0], q[1], n, m, b)        # (N, N_t, M)
        rhs = ad.cmatmul(ad.cconjt(ht), filt)                    # (N, MB, M)
        lifted = ad.cmatmul(ht, ad.cmatmul(inv, rhs))            # (N, N_t, M)
        dirs = ((filt[0] - lifted[0]) * (1.0 / noise_var),
                (filt[1] - lifted[1]) * (1.0 / noise_var))
    norms = ((dirs[0] * dirs[0] + dirs[1] * dirs[1]).sum(axis=1, keepdims=True)
             .clamp_min(1e-30) ** 0.5)
    scale = (p.clamp_min(0.0) ** 0.5).reshape(n, 1, m) / norms
    return (dirs[0] * scale, dirs[1] * scale)


def _q_filter(a_re, a_im, q_re, q_im, n, m, b):
    """Sum_b q_{k,b} h_{k,b}^H for every stream k: (N, N_t, M)."""
    sel = np.zeros((n, m * b, m))
    for k in range(m):
        sel[:, k * b:(k + 1) * b, k] = 1.0
    # scatter q into the (MB, M) selector
    qr = q_re.reshape(n, m * b, 1) * Tensor(sel)
    qi = q_im.reshape(n, m * b, 1) * Tensor(sel)
    re = a_re @ qr - a_im @ qi
    im = a_re @ qi + a_im @ qr
    return re, im


def cmat_herm(a):
    """A^H A for a complex pair (batched)."""
    return ad.cmatmul(ad.cconjt(a), a)


def _rate_graph(v, clean: np.ndarray, cfg: SystemConfig) -> Tensor:
    """Weighted sum rate of recovered columns on the true channels, batched.

    v: (re, im) pair of (N, N_t, M); clean: (N, K, B, N_r, N_t).
    Returns the per-sample rate vector (N,).
    """
    n = clean.shape[0]
    slices = cfg.stream_slices()
    noise_eye = cfg.noise_var * np.eye(cfg.n_rx)
    total = None
    for b in range(cfg.granularity):
        for k in range(cfg.n_users):
            h = clean[:, k, b]                       # (N, N_r, N_t)
            hr, hi = Tensor(h.real), Tensor(h.imag)
            sr = hr @ v[0] - hi @ v[1]               # (N, N_r, M)
            si = hr @ v[1] + hi @ v[0]
            s = (sr, si)
            g_all = ad.cmatmul(s, ad.cconjt(s))
            own = (sr[:, :, slices[k]], si[:, :, slices[k]])
            g_own = ad.cmatmul(own, ad.cconjt(own))
            eye = Tensor(np.broadcast_to(noise_eye, (n, cfg.n_rx, cfg.n_rx)).copy())
            ld_tot = ad.cherm_logdet((g_all[0] + eye, g_all[1]))
            ld_int = ad.cherm_logdet(
                ((g_all[0] - g_own[0]) + eye, g_all[1] - g_own[1]))
            rk = (ld_tot - ld_int) * (cfg.weights[k] / _LN2)
            total = rk if total is None else total + rk
    return total


def wsr_loss_from_features(p: Tensor, lam: Tensor, batch: Dataset,
                           q=None) -> Tensor:
    """Negative mean weighted sum rate achieved by the given features."""
    cfg = batch.cfg
    v = _recovery_graph(p, lam, batch.rows, cfg.noise_var, cfg.total_power, q=q)
    rates = _rate_graph(v, batch.clean, cfg)
    return -rates.mean()


def loss_unsupervised(model: NetworkModel, batch: Dataset,
                      training: bool = True) -> Tensor:
    """Negative mean rate of recover(forward(input)) on the true channels."""
    pred = forward_graph(model, Tensor(batch.packed), training=training,
                         per_stream_gram=(None if batch.per_stream_gram is None
                                          else Tensor(batch.per_stream_gram)))
    q = None
    if "q_re" in pred:
        q = (pred["q_re"], pred["q_im"])
    loss = wsr_loss_from_features(pred["p"], pred["lam"], batch, q=q)
    if not np.isfinite(loss.data):
        raise NumericalError("non-finite unsupervised loss")
    return loss


# ---------------------------------------------------------------------------
# Optimizer and training loop
# ---------------------------------------------------------------------------


class Adam:
    """Standard Adam on the model's parameter dict."""

    def __init__(self, model: NetworkModel, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.model = model
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            self.model.params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def evaluate_wsr(model: NetworkModel, ds: Dataset) -> float:
    """Mean achieved rate of the model over a dataset (fast numpy path)."""
    out = forward_batch(model, ds.packed, per_stream_gram=ds.per_stream_gram)
    q = None
    if "q_re" in out:
        q = (Tensor(out["q_re"]), Tensor(out["q_im"]))
    loss = wsr_loss_from_features(Tensor(out["p"]), Tensor(out["lam"]), ds, q=q)
    return -float(loss.data)


def _batches(n, batch_size, rng):
    idx = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield idx[lo:lo + batch_size]


def _epoch_lr(base: float, epoch: int, cfg: TrainConfig) -> float:
    return base * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


@dataclass
class TrainResult:
    model: NetworkModel
    curve: list[dict] = field(default_factory=list)
    best_val_wsr: float = -np.inf


def train(model: NetworkModel, dataset: Dataset, cfg: TrainConfig,
          log=None) -> TrainResult:
    """Two-stage training; returns the checkpoint with the best validation rate.

    The dataset is split deterministically into train/validation slices by
    the configured sizes. Aborts when the validation rate collapses below
    half of the mean label rate.
    """
    n_train = min(cfg.n_train, len(dataset) - cfg.n_val)
    if n_train < 1:
        raise ConfigError("dataset too small for the requested split")
    train_ds = dataset.subset(np.arange(n_train))
    val_ds = dataset.subset(np.arange(n_train, min(len(dataset),
                                                   n_train + cfg.n_val)))
    label_bar = float(np.mean(val_ds.label_wsr))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed,
                                                       spawn_key=(0x7A,)))
    result = TrainResult(model=model)

    def _record(epoch, phase, train_loss):
        val = evaluate_wsr(model, val_ds)
        result.curve.append({"epoch": epoch, "phase": phase,
                             "train_loss": train_loss, "val_wsr": val})
        if val > result.best_val_wsr:
            result.best_val_wsr = val
            result.model = model.clone()
        if phase != "init" and val < 0.5 * label_bar:
            raise TrainingDiverged(
                f"validation rate {val:.4f} below half of label rate {label_bar:.4f}")
        if log:
            log(f"[{phase}] epoch {epoch}: loss {train_loss:.6f} val_wsr {val:.4f}")

    _record(0, "init", float("nan"))

    phases = [("supervised", cfg.sup_epochs, cfg.lr_supervised),
              ("unsupervised", cfg.unsup_epochs, cfg.lr_unsupervised)]
    for phase, n_epochs, base_lr in phases:
        if n_epochs == 0:
            continue
        opt = Adam(model, base_lr)
        for epoch in range(n_epochs):
            opt.lr = _epoch_lr(base_lr, epoch, cfg)
            losses = []
            for idx in _batches(n_train, cfg.batch_size, rng):
                batch = train_ds.subset(idx)
                if phase == "supervised":
                    pred = forward_graph(
                        model, Tensor(batch.packed), training=True,
                        per_stream_gram=(None if batch.per_stream_gram is None
                                         else Tensor(batch.per_stream_gram)))
                    loss = loss_supervised(pred, batch)
                else:
                    loss = loss_unsupervised(model, batch, training=True)
                loss.backward()
                refs = graph_params(model)
                opt.step({k: t.grad for k, t in refs.items() if t.grad is not None})
                losses.append(float(loss.data))
            _record(epoch + 1, phase, float(np.mean(losses)))

    # result.model already holds the best snapshot seen at any validation point
    return result


def fine_tune(model: NetworkModel, dataset: Dataset, cfg: TrainConfig,
              lr: float, epochs: int, log=None) -> TrainResult:
    """Unsupervised-only training at a small fixed rate (used after pruning)."""
    ft_cfg = replace(cfg, lr_unsupervised=lr, sup_epochs=0, unsup_epochs=epochs,
                     lr_decay=1.0, lr_decay_every=10**9)
    return train(model, dataset, ft_cfg, log=log)


def run_prune_schedule(model: NetworkModel, dataset: Dataset, cfg: TrainConfig,
                       schedule: PruneSchedule, log=None):
    """Apply the cumulative schedule with fine-tuning after every round.

    Yields (cumulative_counts, fine_tuned_model) per round.
    """
    from .network import prune_round

    removed = (0, 0)
    current = model
    for target in schedule.rounds:
        delta = (target[0] - removed[0], target[1] - removed[1])
        if min(delta) < 0:
            raise ConfigError("prune schedule must be cumulative and nondecreasing")
        current = prune_round(current, delta)
        removed = target
        result = fine_tune(current, dataset, cfg, schedule.fine_tune_lr,
                           schedule.fine_tune_epochs, log=log)
        current = result.model
        yield target, current


def write_training_curve(path, curve: list[dict]):
    """CSV training log: epoch, phase, train_loss, val_wsr."""
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "phase", "train_loss", "val_wsr"])
        for row in curve:
            writer.writerow([row["epoch"], row["phase"],
                             repr(row["train_loss"]), repr(row["val_wsr"])])
