import json
import subprocess
import sys

import pytest

from precodelab.bench import (
    ExperimentSpec,
    ReportRow,
    evaluate_realization,
    flops_lcp,
    flops_wmmse,
    report_read,
    report_write,
    run,
)
from precodelab.channels import ChannelParams, gen_channel
from precodelab.core import ConfigError, SystemConfig
from precodelab.network import init_model
from precodelab.wmmse import WmmseOptions

TOY = SystemConfig(n_tx=8, n_rx=2, n_users=2, streams=(1, 1))
TOY_PARAMS = ChannelParams()


class TestFlops:
    def test_unit_dims(self):
        cfg = SystemConfig(n_tx=1, n_rx=1, n_users=1, streams=(1,))
        assert flops_wmmse(cfg, 1) == 4
        assert flops_lcp(cfg, []) == 4

    def test_wmmse_linear_in_iters(self):
        cfg = SystemConfig(n_tx=64, n_rx=4, n_users=10, streams=(2,) * 10)
        assert flops_wmmse(cfg, 200) == 2 * flops_wmmse(cfg, 100)

    def test_lcp_below_one_wmmse_iteration_margin(self):
        # predictor pipeline vs 100 solver iterations at the large setting
        cfg = SystemConfig(n_tx=64, n_rx=4, n_users=10, streams=(2,) * 10)
        model = init_model(cfg.n_streams, seed=0)
        assert flops_lcp(cfg, model.layer_specs()) < flops_wmmse(cfg, 100)
        assert flops_wmmse(cfg, 100) >= 10 * flops_lcp(cfg, model.layer_specs())

    def test_conv_term_matches_network_counter(self):
        from precodelab.network import conv_flops_term

        cfg = SystemConfig(n_tx=16, n_rx=2, n_users=4, streams=(1,) * 4)
        model = init_model(cfg.n_streams, seed=0)
        total = flops_lcp(cfg, model.layer_specs())
        without_net = flops_lcp(cfg, [])
        fc = sum(s.in_dim * s.out_dim for s in model.layer_specs()
                 if s.kind == "fully-connected")
        assert total - without_net - fc == conv_flops_term(model)


class TestEvaluateRealization:
    def test_paired_methods_same_draw(self):
        ch = gen_channel(TOY_PARAMS, TOY, seed=0)
        res = evaluate_realization(ch, TOY, ("wmmse", "lcp_ideal", "ezf"),
                                   WmmseOptions())
        assert res["wmmse"][0] >= res["lcp_ideal"][0] - 1e-6
        assert res["lcp_ideal"][0] > res["ezf"][0] * 0.5

    def test_single_method_ratio_one(self):
        spec = ExperimentSpec(name="t", scenario="sweep_snr", cfg=TOY,
                              params=TOY_PARAMS, n_realizations=1,
                              methods=("wmmse",), snr_grid=(0.0,), seed=1)
        rows = run(spec)
        assert len(rows) == 1
        assert rows[0].ratio_to_wmmse == pytest.approx(1.0)


class TestRun:
    def test_sweep_snr_rows_and_ratio_sanity(self):
        spec = ExperimentSpec(name="t", scenario="sweep_snr", cfg=TOY,
                              params=TOY_PARAMS, n_realizations=10,
                              methods=("wmmse", "lcp_ideal"),
                              snr_grid=(0.0, 10.0), seed=2)
        rows = run(spec)
        assert len(rows) == 4
        for row in rows:
            if row.method == "lcp_ideal":
                assert row.ratio_to_wmmse <= 1.0 + 2.0 * row.ratio_stderr

    def test_generalization_streams_fixed_total(self):
        cfg = SystemConfig(n_tx=16, n_rx=2, n_users=4, streams=(2, 2, 2, 2),
                           d_max=2)
        spec = ExperimentSpec(name="t", scenario="generalization_streams",
                              cfg=cfg, params=TOY_PARAMS, n_realizations=4,
                              methods=("wmmse", "lcp_ideal"), seed=3)
        rows = run(spec)
        variants = {r.variant for r in rows}
        assert variants == {"same_d", "diff_d"}

    def test_zerofill_scenario(self):
        spec = ExperimentSpec(name="t", scenario="generalization_zerofill",
                              cfg=TOY, params=TOY_PARAMS, n_realizations=3,
                              methods=("wmmse", "lcp_ideal"), seed=4,
                              active_grid=(1, 2))
        rows = run(spec)
        by_variant = {r.variant: r for r in rows if r.method == "wmmse"}
        assert by_variant["active=1"].mean_wsr < by_variant["active=2"].mean_wsr

    def test_ofdm_granularity(self):
        cfg = SystemConfig(n_tx=8, n_rx=2, n_users=2, streams=(1, 1))
        spec = ExperimentSpec(name="t", scenario="ofdm_granularity", cfg=cfg,
                              params=TOY_PARAMS, n_realizations=3,
                              methods=("wmmse", "ezf"), rb_grid=(1, 2), seed=5)
        rows = run(spec)
        assert {r.granularity for r in rows} == {1, 2}

    def test_lcp_net_without_checkpoint_rejected(self):
        spec = ExperimentSpec(name="t", scenario="sweep_snr", cfg=TOY,
                              params=TOY_PARAMS, n_realizations=1,
                              methods=("lcp_net",), snr_grid=(0.0,))
        with pytest.raises(ConfigError):
            run(spec)

    def test_deterministic_given_seed(self):
        spec = ExperimentSpec(name="t", scenario="sweep_snr", cfg=TOY,
                              params=TOY_PARAMS, n_realizations=5,
                              methods=("wmmse",), snr_grid=(0.0,), seed=6)
        a = run(spec)
        b = run(spec)
        assert a[0].mean_wsr == b[0].mean_wsr

    def test_timing_scenario_reports_medians(self):
        spec = ExperimentSpec(name="t", scenario="timing", cfg=TOY,
                              params=TOY_PARAMS, n_realizations=5,
                              methods=("wmmse", "ezf"), seed=8)
        rows = run(spec)
        assert all(r.time_ms is not None and r.time_ms > 0 for r in rows)
        by_method = {r.method: r.time_ms for r in rows}
        assert by_method["wmmse"] > by_method["ezf"]


class TestReports:
    def _rows(self):
        return [
            ReportRow(scenario="sweep_snr", method="wmmse", mean_wsr=10.5,
                      stderr=0.1, snr_db=0.0, n_users=4, ratio_to_wmmse=1.0,
                      ratio_stderr=0.0, flops=12345),
            ReportRow(scenario="sweep_snr", method="ezf", mean_wsr=8.25,
                      stderr=0.2, snr_db=0.0, n_users=4,
                      ratio_to_wmmse=0.7857142857142857, ratio_stderr=0.01),
        ]

    def test_empty_rows_header_only(self, tmp_path):
        path = tmp_path / "empty.csv"
        report_write([], path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 1 and lines[0].startswith("scenario,")

    def test_roundtrip(self, tmp_path):
        path = tmp_path / "rows.csv"
        report_write(self._rows(), path)
        back = report_read(path)
        assert back[0]["mean_wsr"] == 10.5
        assert back[1]["ratio_to_wmmse"] == 0.7857142857142857
        assert back[0]["flops"] == 12345
        assert back[1]["flops"] is None
        assert back[1]["method"] == "ezf"

    def test_byte_identical_rewrites(self, tmp_path):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        report_write(self._rows(), p1)
        report_write(self._rows(), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_run_outputs_are_reproducible(self, tmp_path):
        for name in ("r1.csv", "r2.csv"):
            spec = ExperimentSpec(name="t", scenario="sweep_snr", cfg=TOY,
                                  params=TOY_PARAMS, n_realizations=3,
                                  methods=("wmmse", "ezf"), snr_grid=(0.0,),
                                  seed=7, output_path=str(tmp_path / name))
            run(spec)
        assert (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()
        sidecar = json.loads((tmp_path / "r1.csv.json").read_text())
        assert sidecar["spec"]["scenario"] == "sweep_snr"
        assert "numpy" in sidecar["environment"]


class TestCli:
    def _run(self, *argv):
        return subprocess.run([sys.executable, "-m", "precodelab.cli", *argv],
                              capture_output=True, text=True)

    def test_invalid_config_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"n_tx": 2, "n_rx": 4, "n_users": 4,
                                   "streams": 2}))
        res = self._run("solve", "--method", "wmmse", "--config", str(bad))
        assert res.returncode == 2

    def test_gen_solve_roundtrip(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n_tx": 8, "n_rx": 2, "n_users": 2,
                                   "streams": 1, "snr_db": 0}))
        chan = tmp_path / "chan.bin"
        res = self._run("gen-data", "--config", str(cfg), "--out", str(chan),
                        "--count", "2", "--channels-only")
        assert res.returncode == 0, res.stderr
        out = tmp_path / "solve.json"
        res = self._run("solve", "--method", "ezf", "--config", str(cfg),
                        "--input", str(chan), "--out", str(out))
        assert res.returncode == 0, res.stderr
        summary = json.loads(out.read_text())
        assert summary["count"] == 2 and summary["mean_wsr"] > 0

    def test_bench_subcommand(self, tmp_path):
        spec = {
            "name": "toy", "scenario": "sweep_snr",
            "cfg": {"n_tx": 8, "n_rx": 2, "n_users": 2, "streams": 1,
                    "snr_db": 0},
            "n_realizations": 2, "seed": 0, "methods": ["wmmse", "ezf"],
            "snr_grid": [0.0],
        }
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec))
        out = tmp_path / "report.csv"
        res = self._run("bench", "--spec", str(spec_path), "--out", str(out))
        assert res.returncode == 0, res.stderr
        assert out.exists() and (tmp_path / "report.csv.json").exists()
