"""Experiment runner: paired Monte-Carlo evaluation of precoding methods,
operation-count estimates, timing medians, and deterministic CSV reports.

Every realization draws one channel set that all methods consume (paired
design, asserted by hashing the draw), designs precoders per method, and
scores them on the true channels. Imperfect-CSI scenarios design on the
noisy copy and score on the clean one.
"""

from __future__ import annotations

import hashlib
import json
import math
import platform
import statistics
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .channels import ChannelParams, CsiNoiseModel, add_csi_noise, gen_channel
from .core import (
    ChannelSet,
    ConfigError,
    PrecoderSet,
    SystemConfig,
    pack_hermitian,
    sum_rate_mimo,
    sum_rate_ofdm,
    weighted_gram,
)
from .network import NetworkModel, forward, load_checkpoint
from .training import _per_stream_grams
from .transform import assemble_precoders, ezf, mimo_to_miso, recover_precoders, \
    recover_precoders_ofdm
from .wmmse import WmmseOptions, wmmse_mimo, wmmse_miso, wmmse_ofdm_miso

KNOWN_METHODS = ("wmmse", "lcp_ideal", "lcp_net", "ezf")

SCENARIOS = (
    "table3_snr", "table3_users", "sweep_users", "sweep_snr",
    "ofdm_granularity", "pruning", "imperfect_csi",
    "generalization_streams", "generalization_zerofill", "timing",
)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    scenario: str
    cfg: SystemConfig
    params: ChannelParams
    n_realizations: int = 200
    seed: int = 0
    methods: tuple[str, ...] = ("wmmse", "lcp_ideal")
    output_path: str | None = None
    checkpoint: str | None = None
    snr_grid: tuple[float, ...] = (-5.0, 0.0, 10.0)
    user_grid: tuple[int, ...] = (8, 10, 12, 16)
    rb_grid: tuple[int, ...] = (1, 2, 4)
    error_grid: tuple[float, ...] = (0.01, 0.05, 0.1, 0.2)
    active_grid: tuple[int, ...] = ()
    error_var: float = 0.0
    opts: WmmseOptions = WmmseOptions()

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.n_realizations < 1:
            raise ConfigError("n_realizations must be >= 1")
        if not self.methods:
            raise ConfigError("at least one method is required")
        for m in self.methods:
            if m not in KNOWN_METHODS:
                raise ConfigError(f"unknown method {m!r}")

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        with open(path) as f:
            doc = json.load(f)
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        cfg = SystemConfig.from_dict(doc["cfg"])
        params = ChannelParams.from_dict(doc.get("params", {}))
        kw = {}
        for key in ("name", "scenario", "n_realizations", "seed", "output_path",
                    "checkpoint", "error_var"):
            if key in doc:
                kw[key] = doc[key]
        for key in ("methods", "snr_grid", "user_grid", "rb_grid", "error_grid",
                    "active_grid"):
            if key in doc:
                kw[key] = tuple(doc[key])
        if "opts" in doc:
            kw["opts"] = WmmseOptions(**doc["opts"])
        return cls(cfg=cfg, params=params, **kw)


@dataclass
class ReportRow:
    scenario: str
    method: str
    mean_wsr: float
    stderr: float
    snr_db: float | None = None
    n_users: int | None = None
    granularity: int | None = None
    error_var: float | None = None
    variant: str | None = None
    ratio_to_wmmse: float | None = None
    ratio_stderr: float | None = None
    time_ms: float | None = None
    flops: int | None = None


# ---------------------------------------------------------------------------
# Operation-count estimates (unit leading constants on the dominant terms)
# ---------------------------------------------------------------------------


def flops_wmmse(cfg: SystemConfig, n_iters: int) -> int:
    k, nt, nr = cfg.n_users, cfg.n_tx, cfg.n_rx
    return n_iters * (k * k * nt * nr * nr + k * k * nt * nt * nr
                      + k * nt ** 3 + k * k * nr ** 3)


def flops_lcp(cfg: SystemConfig, layer_specs) -> int:
    k, nt, nr = cfg.n_users, cfg.n_tx, cfg.n_rx
    m = cfg.n_streams
    total = k * nt * nr * nr + nt * m * m + m ** 3 + k * nr ** 3
    for spec in layer_specs:
        if spec.kind == "conv2d":
            total += (spec.feature_size * spec.kernel_size ** 2
                      * spec.in_channels * spec.out_channels)
        elif spec.kind == "fully-connected":
            total += spec.in_dim * spec.out_dim
    return total


# ---------------------------------------------------------------------------
# Per-draw method evaluation
# ---------------------------------------------------------------------------


def _design(method: str, side: ChannelSet, cfg: SystemConfig,
            opts: WmmseOptions, model: NetworkModel | None) -> PrecoderSet:
    if method == "wmmse" and cfg.granularity == 1:
        pre, _ = wmmse_mimo(side, cfg, opts)
        return pre
    problem = mimo_to_miso(side, cfg)
    if method == "wmmse" or method == "lcp_ideal":
        # for B > 1 the exact baseline is the shared-precoder solver on the
        # reduced problem (no full multi-antenna multi-RB solver is defined)
        if cfg.granularity == 1:
            cols, _ = wmmse_miso(problem, cfg, opts)
        else:
            cols, _ = wmmse_ofdm_miso(problem, cfg, opts)
    elif method == "ezf":
        cols = ezf(problem, cfg)
    elif method == "lcp_net":
        if model is None:
            raise ConfigError("lcp_net needs a checkpoint")
        packed = pack_hermitian(weighted_gram(problem)).matrix
        if cfg.granularity == 1:
            feats = forward(model, packed)
            cols = recover_precoders(problem, feats, cfg, strict=False)
        else:
            feats = forward(model, packed, per_stream_gram=_per_stream_grams(problem))
            cols = recover_precoders_ofdm(problem, feats, cfg, strict=False)
    else:
        raise ConfigError(f"unknown method {method!r}")
    return assemble_precoders(cols, problem.owner, cfg)


def evaluate_realization(ch: ChannelSet, cfg: SystemConfig, methods,
                         opts: WmmseOptions, model=None,
                         noise: CsiNoiseModel | None = None, seed: int = 0):
    """(wsr, seconds) per method, all on the same draw; scored on the clean
    channels even when the design side is noisy."""
    digest = hashlib.sha256(ch.data.tobytes()).hexdigest()
    side = ch
    if noise is not None and noise.error_var > 0.0:
        side = ChannelSet(add_csi_noise(ch, noise, seed=seed).data)
    rate = sum_rate_mimo if cfg.granularity == 1 else sum_rate_ofdm
    out = {}
    for method in methods:
        if hashlib.sha256(ch.data.tobytes()).hexdigest() != digest:
            raise ConfigError("paired evaluation broken: channel draw mutated")
        t0 = time.perf_counter()
        pre = _design(method, side, cfg, opts, model)
        dt = time.perf_counter() - t0
        out[method] = (rate(ch, pre, cfg), dt)
    return out


def _aggregate(point_knobs: dict, scenario: str, methods, samples: dict,
               times: dict, flops: dict, timing_rows: bool) -> list[ReportRow]:
    rows = []
    base = np.asarray(samples.get("wmmse", []), dtype=float)
    for method in methods:
        vals = np.asarray(samples[method], dtype=float)
        n = vals.size
        stderr = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        ratio = ratio_stderr = None
        if "wmmse" in methods and base.size == n and n > 0:
            ratio = float(np.mean(vals) / np.mean(base))
            if n > 1:
                per_draw = vals / base
                ratio_stderr = float(np.std(per_draw, ddof=1) / math.sqrt(n))
        time_ms = None
        if timing_rows:
            time_ms = float(statistics.median(times[method]) * 1e3)
        rows.append(ReportRow(
            scenario=scenario, method=method, mean_wsr=float(np.mean(vals)),
            stderr=stderr, ratio_to_wmmse=ratio, ratio_stderr=ratio_stderr,
            time_ms=time_ms, flops=flops.get(method), **point_knobs))
    return rows


def _point_seed(seed: int, point: int, i: int) -> int:
    return int(np.random.SeedSequence(
        entropy=seed, spawn_key=(point, i)).generate_state(1)[0])


def _run_point(spec: ExperimentSpec, cfg: SystemConfig, params: ChannelParams,
               knobs: dict, point_idx: int, model=None,
               noise: CsiNoiseModel | None = None,
               active_users: int | None = None,
               stream_sampler=None) -> list[ReportRow]:
    samples = {m: [] for m in spec.methods}
    times = {m: [] for m in spec.methods}
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=spec.seed, spawn_key=(0xD0, point_idx)))
    for i in range(spec.n_realizations):
        s = _point_seed(spec.seed, point_idx, i)
        cfg_i = cfg
        if stream_sampler is not None:
            cfg_i = stream_sampler(cfg, rng)
        ch = gen_channel(params, cfg_i, seed=s)
        if active_users is not None:
            data = ch.data.copy()
            data[active_users:] = 0.0
            ch = ChannelSet(data)
        res = evaluate_realization(ch, cfg_i, spec.methods, spec.opts,
                                   model=model, noise=noise, seed=s)
        for m, (wsr, dt) in res.items():
            samples[m].append(wsr)
            times[m].append(dt)
    flops = _flops_per_method(spec, cfg, model)
    return _aggregate(knobs, spec.scenario, spec.methods, samples, times, flops,
                      timing_rows=(spec.scenario == "timing"))


def _flops_per_method(spec: ExperimentSpec, cfg: SystemConfig, model) -> dict:
    out = {}
    if "wmmse" in spec.methods:
        out["wmmse"] = flops_wmmse(cfg, spec.opts.max_iters)
    if "lcp_net" in spec.methods and model is not None:
        out["lcp_net"] = flops_lcp(cfg, model.layer_specs())
    return out


def _cfg_for_users(cfg: SystemConfig, k: int) -> SystemConfig:
    d = cfg.streams[0]
    return SystemConfig(n_tx=cfg.n_tx, n_rx=cfg.n_rx, n_users=k,
                        streams=(d,) * k, d_max=cfg.d_max,
                        total_power=cfg.total_power, noise_var=cfg.noise_var,
                        weights=(cfg.weights[0],) * k,
                        granularity=cfg.granularity)


def _sample_stream_pattern(cfg: SystemConfig, rng) -> SystemConfig:
    """Random per-user stream counts with the total held fixed."""
    m = cfg.n_streams
    k = cfg.n_users
    cap = min(cfg.d_max, cfg.n_rx)
    while True:
        d = rng.integers(1, cap + 1, size=k)
        if d.sum() == m:
            break
    return SystemConfig(n_tx=cfg.n_tx, n_rx=cfg.n_rx, n_users=k,
                        streams=tuple(int(x) for x in d), d_max=cfg.d_max,
                        total_power=cfg.total_power, noise_var=cfg.noise_var,
                        weights=cfg.weights, granularity=cfg.granularity)


def run(spec: ExperimentSpec, model: NetworkModel | None = None) -> list[ReportRow]:
    """Execute one experiment; returns report rows (and writes files when an
    output path is configured)."""
    if model is None and spec.checkpoint:
        model = load_checkpoint(spec.checkpoint)
    if "lcp_net" in spec.methods and model is None:
        raise ConfigError("lcp_net requires a checkpoint")
    rows: list[ReportRow] = []
    sc = spec.scenario

    if sc in ("table3_snr", "sweep_snr"):
        for idx, snr in enumerate(spec.snr_grid):
            cfg = spec.cfg.with_noise_var(
                spec.cfg.total_power * 10.0 ** (-snr / 10.0))
            rows += _run_point(spec, cfg, spec.params,
                               {"snr_db": float(snr), "n_users": cfg.n_users},
                               idx, model=model)
    elif sc in ("table3_users", "sweep_users"):
        for idx, k in enumerate(spec.user_grid):
            cfg = _cfg_for_users(spec.cfg, int(k))
            rows += _run_point(spec, cfg, spec.params,
                               {"n_users": int(k)}, idx, model=model)
    elif sc == "ofdm_granularity":
        for idx, b in enumerate(spec.rb_grid):
            cfg = replace(spec.cfg, granularity=int(b))
            params = replace(spec.params, n_rb=int(b))
            rows += _run_point(spec, cfg, params,
                               {"granularity": int(b),
                                "n_users": cfg.n_users}, idx, model=model)
    elif sc == "imperfect_csi":
        for idx, ev in enumerate(spec.error_grid):
            rows += _run_point(spec, spec.cfg, spec.params,
                               {"error_var": float(ev)}, idx, model=model,
                               noise=CsiNoiseModel(float(ev)))
    elif sc == "generalization_streams":
        rows += _run_point(spec, spec.cfg, spec.params,
                           {"variant": "same_d"}, 0, model=model)
        rows += _run_point(spec, spec.cfg, spec.params,
                           {"variant": "diff_d"}, 1, model=model,
                           stream_sampler=_sample_stream_pattern)
    elif sc == "generalization_zerofill":
        grid = spec.active_grid or (spec.cfg.n_users,)
        for idx, k_act in enumerate(grid):
            rows += _run_point(spec, spec.cfg, spec.params,
                               {"variant": f"active={int(k_act)}",
                                "n_users": spec.cfg.n_users}, idx,
                               model=model, active_users=int(k_act))
    elif sc == "timing":
        rows += _run_point(spec, spec.cfg, spec.params,
                           {"n_users": spec.cfg.n_users}, 0, model=model,
                           noise=(CsiNoiseModel(spec.error_var)
                                  if spec.error_var else None))
    elif sc == "pruning":
        raise ConfigError("the pruning study runs through the CLI prune command")

    if spec.output_path:
        report_write(rows, spec.output_path, spec=spec)
    return rows


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

_CSV_COLUMNS = ("scenario", "snr_db", "n_users", "granularity", "error_var",
                "variant", "method", "mean_wsr", "stderr", "ratio_to_wmmse",
                "ratio_stderr", "time_ms", "flops")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def environment_stamp() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
    }


def report_write(rows: list[ReportRow], path, spec: ExperimentSpec | None = None):
    """CSV report plus a JSON sidecar with the spec and environment stamp.

    Row order is the generation order; float formatting is the shortest
    round-trip representation, so identical results give identical bytes.
    """
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_CSV_COLUMNS)
        for row in rows:
            d = asdict(row)
            writer.writerow([_fmt(d[c]) for c in _CSV_COLUMNS])
    sidecar = str(path) + ".json"
    doc = {"environment": environment_stamp()}
    if spec is not None:
        doc["spec"] = _spec_to_dict(spec)
    with open(sidecar, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def _spec_to_dict(spec: ExperimentSpec) -> dict:
    return {
        "name": spec.name,
        "scenario": spec.scenario,
        "cfg": {
            "n_tx": spec.cfg.n_tx, "n_rx": spec.cfg.n_rx,
            "n_users": spec.cfg.n_users, "streams": list(spec.cfg.streams),
            "total_power": spec.cfg.total_power, "noise_var": spec.cfg.noise_var,
            "weights": list(spec.cfg.weights), "granularity": spec.cfg.granularity,
        },
        "params": asdict(spec.params),
        "n_realizations": spec.n_realizations,
        "seed": spec.seed,
        "methods": list(spec.methods),
        "checkpoint": spec.checkpoint,
        "snr_grid": list(spec.snr_grid),
        "user_grid": list(spec.user_grid),
        "rb_grid": list(spec.rb_grid),
        "error_grid": list(spec.error_grid),
        "active_grid": list(spec.active_grid),
        "opts": {"max_iters": spec.opts.max_iters, "rel_tol": spec.opts.rel_tol,
                 "init_scheme": spec.opts.init_scheme},
    }


def report_read(path) -> list[dict]:
    """Parse a written CSV report back into dicts (numbers restored)."""
    import csv

    out = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            row: dict = {}
            for k, v in rec.items():
                if v == "":
                    row[k] = None
                elif k in ("n_users", "granularity", "flops"):
                    row[k] = int(v)
                elif k in ("scenario", "method", "variant"):
                    row[k] = v
                else:
                    row[k] = float(v)
            out.append(row)
    return out
