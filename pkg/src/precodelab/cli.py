"""Command-line front end: data generation, solving, training, pruning,
benchmark runs, and the reduction-loss reproduction with pass/fail checks.

Exit codes: 0 on success, 2 for invalid configuration or inputs, 3 when
``reproduce-table3 --check`` misses a threshold.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECK_FAILED = 3

# checked by `reproduce-table3 --check`: reduction-loss ratio bands
RATIO_BAND_SNR0 = (0.965, 1.0)
RATIO_MIN_SNR10 = 0.955
SNR_TREND_SLACK = 0.005
USER_RATIO_MIN = 0.965


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="precodelab",
        description="multi-user MIMO precoding laboratory",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS/OpenMP thread cap (set before numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a labeled training dataset")
    p.add_argument("--config", required=True, help="system config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0,
                   help="CSI error variance for the noisy input copy")
    p.add_argument("--active-users", type=int, nargs="*", default=None,
                   help="zero-filling mix: sampled active-user counts")
    p.add_argument("--channels-only", action="store_true",
                   help="write raw channel realizations instead")

    p = sub.add_parser("solve", help="design precoders for fresh or stored draws")
    p.add_argument("--method", required=True,
                   choices=("wmmse", "lcp_ideal", "lcp_net", "ezf"))
    p.add_argument("--config", required=True)
    p.add_argument("--input", help="channel file (generate one draw if absent)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="write a JSON summary here")

    p = sub.add_parser("train", help="train the feature predictor")
    p.add_argument("--data", required=True, help="dataset file from gen-data")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--curve", help="training-curve CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--sup-epochs", type=int)
    p.add_argument("--unsup-epochs", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("prune", help="structured pruning with fine-tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rounds", default="8,4;12,6;15,7",
                   help="cumulative removal counts, e.g. '8,4;12,6;15,7'")
    p.add_argument("--fine-tune-epochs", type=int, default=10)
    p.add_argument("--fine-tune-lr", type=float, default=2e-4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="run an experiment spec")
    p.add_argument("--spec", required=True, help="experiment spec JSON")
    p.add_argument("--out", help="override the spec's output path")
    p.add_argument("--seed", type=int)
    p.add_argument("--realizations", type=int)
    p.add_argument("--checkpoint")

    p = sub.add_parser("reproduce-table3",
                       help="reduction-loss ratios over SNR and user grids")
    p.add_argument("--out", default="table3")
    p.add_argument("--realizations", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--check", action="store_true",
                   help="exit 3 unless the ratio thresholds hold")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))

    from .core import ConfigError, PrecodingError

    try:
        return _dispatch(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PrecodingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def _load_cfg(path):
    from .core import SystemConfig

    with open(path) as f:
        doc = json.load(f)
    cfg = SystemConfig.from_dict(doc)
    from .channels import ChannelParams

    params = ChannelParams.from_dict(doc.get("channel", {}))
    if params.n_rb != cfg.granularity:
        params = ChannelParams(
            n_paths=params.n_paths, delay_min_ns=params.delay_min_ns,
            delay_max_ns=params.delay_max_ns, sample_rate_hz=params.sample_rate_hz,
            n_rb=cfg.granularity, seed=params.seed)
    return cfg, params


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "gen-data":
        return _cmd_gen_data(args)
    if cmd == "solve":
        return _cmd_solve(args)
    if cmd == "train":
        return _cmd_train(args)
    if cmd == "prune":
        return _cmd_prune(args)
    if cmd == "bench":
        return _cmd_bench(args)
    if cmd == "reproduce-table3":
        return _cmd_table3(args)
    raise AssertionError(cmd)


def _cmd_gen_data(args) -> int:
    from .channels import CsiNoiseModel, gen_channel, save_channels
    from .training import build_dataset, save_dataset

    cfg, params = _load_cfg(args.config)
    if args.channels_only:
        sets = [gen_channel(params, cfg, seed=args.seed + i)
                for i in range(args.count)]
        save_channels(args.out, sets, params, cfg, seed=args.seed)
    else:
        noise = CsiNoiseModel(args.noise) if args.noise > 0.0 else None
        ds = build_dataset(params, cfg, noise, count=args.count, seed=args.seed,
                           active_users=args.active_users)
        save_dataset(args.out, ds)
    print(f"wrote {args.out} ({args.count} realizations)")
    return EXIT_OK


def _cmd_solve(args) -> int:
    import numpy as np

    from .bench import evaluate_realization
    from .channels import gen_channel, load_channels
    from .network import load_checkpoint
    from .wmmse import WmmseOptions

    cfg, params = _load_cfg(args.config)
    if args.input:
        sets, _ = load_channels(args.input)
    else:
        sets = [gen_channel(params, cfg, seed=args.seed)]
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    wsrs = []
    for i, ch in enumerate(sets):
        res = evaluate_realization(ch, cfg, (args.method,), WmmseOptions(),
                                   model=model, seed=args.seed + i)
        wsrs.append(res[args.method][0])
    summary = {"method": args.method, "count": len(wsrs),
               "mean_wsr": float(np.mean(wsrs)),
               "wsr": [float(w) for w in wsrs]}
    print(json.dumps(summary, indent=2))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(summary, f, indent=2)
    return EXIT_OK


def _cmd_train(args) -> int:
    from dataclasses import replace

    from .network import init_model, save_checkpoint
    from .training import TrainConfig, load_dataset, train, write_training_curve

    ds = load_dataset(args.data)
    tc = TrainConfig(seed=args.seed)
    overrides = {}
    for field_name, arg_name in (("batch_size", "batch_size"),
                                 ("sup_epochs", "sup_epochs"),
                                 ("unsup_epochs", "unsup_epochs"),
                                 ("n_train", "n_train"), ("n_val", "n_val")):
        val = getattr(args, arg_name)
        if val is not None:
            overrides[field_name] = val
    if "n_train" not in overrides or "n_val" not in overrides:
        # size the split to the dataset when not given explicitly
        n = len(ds)
        overrides.setdefault("n_val", max(1, min(tc.n_val, n // 10)))
        overrides.setdefault("n_train", n - overrides["n_val"])
    tc = replace(tc, **overrides)
    model = init_model(ds.cfg.n_streams, total_power=ds.cfg.total_power,
                       n_rb=ds.cfg.granularity, seed=args.seed)
    log = None if args.quiet else print
    result = train(model, ds, tc, log=log)
    save_checkpoint(result.model, args.out)
    if args.curve:
        write_training_curve(args.curve, result.curve)
    print(f"best validation rate {result.best_val_wsr:.4f}; wrote {args.out}")
    return EXIT_OK


def _cmd_prune(args) -> int:
    import numpy as np

    from .bench import flops_lcp
    from .network import conv_flops_term, load_checkpoint, save_checkpoint
    from .training import PruneSchedule, TrainConfig, evaluate_wsr, load_dataset, \
        run_prune_schedule

    ds = load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    rounds = tuple(tuple(int(x) for x in part.split(","))
                   for part in args.rounds.split(";") if part)
    schedule = PruneSchedule(rounds=rounds, fine_tune_lr=args.fine_tune_lr,
                             fine_tune_epochs=args.fine_tune_epochs)
    tc = TrainConfig(seed=args.seed, n_train=max(1, len(ds) - 200), n_val=200)
    os.makedirs(args.out, exist_ok=True)
    val = ds.subset(np.arange(max(0, len(ds) - 200), len(ds)))
    base_wsr = evaluate_wsr(model, val)
    report = [{"round": 0, "removed": [0, 0], "val_wsr": base_wsr,
               "conv_flops": conv_flops_term(model),
               "flops": flops_lcp(ds.cfg, model.layer_specs())}]
    print(f"round 0: val_wsr {base_wsr:.4f} conv_flops {report[0]['conv_flops']}")
    for i, (counts, pruned) in enumerate(
            run_prune_schedule(model, ds, tc, schedule), start=1):
        wsr = evaluate_wsr(pruned, val)
        path = os.path.join(args.out, f"pruned_round{i}.json")
        save_checkpoint(pruned, path)
        report.append({"round": i, "removed": list(counts), "val_wsr": wsr,
                       "conv_flops": conv_flops_term(pruned),
                       "flops": flops_lcp(ds.cfg, pruned.layer_specs())})
        print(f"round {i}: removed {counts} val_wsr {wsr:.4f} "
              f"conv_flops {report[-1]['conv_flops']}")
    with open(os.path.join(args.out, "pruning_report.json"), "w") as f:
        json.dump(report, f, indent=2)
    return EXIT_OK


def _cmd_bench(args) -> int:
    from dataclasses import replace

    from .bench import ExperimentSpec, run

    spec = ExperimentSpec.from_json(args.spec)
    if args.out:
        spec = replace(spec, output_path=args.out)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.realizations is not None:
        spec = replace(spec, n_realizations=args.realizations)
    if args.checkpoint:
        spec = replace(spec, checkpoint=args.checkpoint)
    rows = run(spec)
    for row in rows:
        ratio = "" if row.ratio_to_wmmse is None else f" ratio {row.ratio_to_wmmse:.4f}"
        print(f"{row.scenario} {row.method}: mean_wsr {row.mean_wsr:.4f}"
              f" +- {row.stderr:.4f}{ratio}")
    if spec.output_path:
        print(f"wrote {spec.output_path}")
    return EXIT_OK


def _table3_specs(realizations: int, seed: int):
    from .bench import ExperimentSpec
    from .channels import ChannelParams
    from .core import SystemConfig

    cfg = SystemConfig(n_tx=64, n_rx=4, n_users=10, streams=(2,) * 10)
    params = ChannelParams()
    snr_spec = ExperimentSpec(
        name="table3_snr", scenario="table3_snr", cfg=cfg, params=params,
        n_realizations=realizations, seed=seed,
        methods=("wmmse", "lcp_ideal"), snr_grid=(-5.0, 0.0, 10.0))
    users_spec = ExperimentSpec(
        name="table3_users", scenario="table3_users", cfg=cfg, params=params,
        n_realizations=realizations, seed=seed,
        methods=("wmmse", "lcp_ideal"), user_grid=(8, 10, 12, 16))
    return snr_spec, users_spec


def _cmd_table3(args) -> int:
    from .bench import report_write, run

    snr_spec, users_spec = _table3_specs(args.realizations, args.seed)
    rows_snr = run(snr_spec)
    rows_users = run(users_spec)
    os.makedirs(args.out, exist_ok=True)
    report_write(rows_snr, os.path.join(args.out, "table3_snr.csv"), spec=snr_spec)
    report_write(rows_users, os.path.join(args.out, "table3_users.csv"),
                 spec=users_spec)

    ratios_snr = {row.snr_db: row.ratio_to_wmmse for row in rows_snr
                  if row.method == "lcp_ideal"}
    ratios_users = {row.n_users: row.ratio_to_wmmse for row in rows_users
                    if row.method == "lcp_ideal"}
    for snr, ratio in sorted(ratios_snr.items()):
        print(f"SNR {snr:+.0f} dB: reduction ratio {ratio:.4f}")
    for k, ratio in sorted(ratios_users.items()):
        print(f"K = {k}: reduction ratio {ratio:.4f}")

    if not args.check:
        return EXIT_OK
    ok = True

    def _check(label, cond):
        nonlocal ok
        print(f"[{'PASS' if cond else 'FAIL'}] {label}")
        ok = ok and cond

    lo, hi = RATIO_BAND_SNR0
    _check(f"ratio at SNR 0 in [{lo}, {hi}]",
           lo <= ratios_snr[0.0] <= hi)
    _check(f"ratio at SNR +10 >= {RATIO_MIN_SNR10}",
           ratios_snr[10.0] >= RATIO_MIN_SNR10)
    _check("SNR trend: ratio(-5) >= ratio(+10) - 0.005",
           ratios_snr[-5.0] >= ratios_snr[10.0] - SNR_TREND_SLACK)
    for k in (8, 12, 16):
        _check(f"ratio at K={k} in [{USER_RATIO_MIN}, 1.0]",
               USER_RATIO_MIN <= ratios_users[k] <= 1.0)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
