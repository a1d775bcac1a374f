import csv
import json

import numpy as np
import pytest
import torch
import yaml

from conftest import tiny_model_config
from sparselift.bench import BENCH_CSV_COLUMNS, bench_throughput, write_bench_csv
from sparselift.cli import main
from sparselift.config import load_run_config
from sparselift.errors import ConfigError
from sparselift.network import ModelConfig, UpliftModel, flops_estimate
from sparselift.sequencing import StrideSchedule


class TestBench:
    def test_flops_field_matches_estimator_exactly(self):
        torch.manual_seed(0)
        cfg = tiny_model_config()
        model = UpliftModel(cfg)
        report = bench_throughput(model, duration_s=0.1, warmup=2)
        assert report.flops == flops_estimate(cfg)
        assert report.poses_per_sec > 0
        assert report.p95_ms >= report.median_ms > 0

    def test_doubling_output_stride_doubles_pps(self):
        # Two schedules with identical N_out and N_in: identical cost per
        # forward, so PPS scales with the output stride.
        torch.manual_seed(0)
        cfg_a = tiny_model_config(joints=17, d_joint=8, d_temp=32, heads_spatial=2,
                                  heads_temporal=2, schedule=StrideSchedule(41, 4, 2),
                                  blocks_temporal=2, reduction_strides=(21,))
        cfg_b = tiny_model_config(joints=17, d_joint=8, d_temp=32, heads_spatial=2,
                                  heads_temporal=2, schedule=StrideSchedule(81, 8, 4),
                                  blocks_temporal=2, reduction_strides=(21,))
        model_a = UpliftModel(cfg_a)
        model_b = UpliftModel(cfg_b)
        model_b.load_state_dict(model_a.state_dict())
        rep_a = bench_throughput(model_a, duration_s=0.6, warmup=10)
        rep_b = bench_throughput(model_b, duration_s=0.6, warmup=10)
        ratio = rep_b.poses_per_sec / rep_a.poses_per_sec
        assert ratio == pytest.approx(2.0, rel=0.2)

    def test_csv_schema(self, tmp_path):
        torch.manual_seed(0)
        model = UpliftModel(tiny_model_config())
        report = bench_throughput(model, duration_s=0.05, warmup=1)
        path = tmp_path / "bench.csv"
        write_bench_csv(report, path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == BENCH_CSV_COLUMNS
        assert int(rows[1][0]) == report.flops


BASE_CONFIG = {
    "model": {
        "joints": 17, "window": 9, "stride_in": 4, "stride_out": 1,
        "d_joint": 8, "d_temp": 16, "blocks_spatial": 1, "blocks_temporal": 1,
        "blocks_strided": 1, "heads_spatial": 2, "heads_temporal": 2,
        "reduction_strides": [9], "drop_path_rate": 0.0,
    },
    "train": {
        "strides_in": [4], "epochs": 1, "steps_per_epoch": 3, "batch_size": 8,
        "lr0": 1e-3, "seed": 0,
    },
    "adaptive": {
        "slow_stride": 4, "fast_stride": 2, "velocity_threshold_mps": 0.5,
        "cooldown_frames": 10,
    },
    "synth": {
        "kinds": ["sinusoidal-limbs"], "sequences": 2, "duration": 60,
        "frame_rate": 50.0, "amplitude_mm": 100.0, "frequency_hz": 1.0,
    },
    "bench": {"duration_s": 0.05},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli")
    with open(path / "run.yaml", "w") as fh:
        yaml.safe_dump(BASE_CONFIG, fh)
    return path


class TestRunConfig:
    def test_loads_sections(self, workdir):
        run = load_run_config(workdir / "run.yaml")
        assert run.model.joints == 17
        assert run.model.schedule == StrideSchedule(9, 4, 1)
        assert run.train.strides_in == (4,)
        assert run.adaptive.fast_stride == 2

    def test_overrides_apply(self, workdir):
        run = load_run_config(workdir / "run.yaml",
                              {"stride_in": 2, "seed": 9, "window": 9, "stride_out": 1})
        assert run.model.schedule.stride_in == 2
        assert run.train.seed == 9

    def test_missing_file_raises(self):
        with pytest.raises(ConfigError) as err:
            load_run_config("/nonexistent/run.yaml")
        assert "/nonexistent/run.yaml" in str(err.value)

    def test_unknown_key_rejected(self, workdir, tmp_path):
        bad = dict(BASE_CONFIG)
        bad["model"] = dict(bad["model"], frobnicate=1)
        path = tmp_path / "bad.yaml"
        with open(path, "w") as fh:
            yaml.safe_dump(bad, fh)
        with pytest.raises(ConfigError):
            load_run_config(path)


class TestCli:
    def test_usage_error_exits_2(self):
        with pytest.raises(SystemExit) as err:
            main(["no-such-command"])
        assert err.value.code == 2

    def test_missing_config_file_exits_1(self, capsys):
        code = main(["synth", "--config", "/missing/cfg.yaml", "--out", "/tmp/x.jsonl"])
        assert code == 1
        payload = json.loads(capsys.readouterr().err.strip())
        assert "/missing/cfg.yaml" in payload["error"]

    def test_full_pipeline(self, workdir, capsys):
        cfg = str(workdir / "run.yaml")
        data = str(workdir / "data.jsonl")
        assert main(["synth", "--config", cfg, "--out", data, "--seed", "1"]) == 0
        assert (workdir / "data.jsonl").exists()

        out = str(workdir / "trainout")
        assert main(["train", "--config", cfg, "--data", data, "--out", out]) == 0
        ckpt = workdir / "trainout" / "train.ckpt"
        assert ckpt.exists()
        assert (workdir / "trainout" / "train_ema.ckpt").exists()
        assert (workdir / "trainout" / "train_log.csv").exists()

        evalout = str(workdir / "evalout")
        assert main(["eval", "--checkpoint", str(ckpt), "--data", data, "--out", evalout]) == 0
        report_path = workdir / "evalout" / "eval_report.json"
        assert report_path.exists()
        report = json.loads(report_path.read_text())
        assert "all_frames" in report and "key_frames" in report
        assert (workdir / "evalout" / "all_frames_summary.csv").exists()

        reemit = str(workdir / "reemit")
        assert main(["report", "--report", str(report_path), "--out", reemit]) == 0
        assert (workdir / "reemit" / "key_frames_velocity_histogram.csv").exists()

        pred_path = str(workdir / "preds.jsonl")
        assert main(["infer", "--checkpoint", str(ckpt), "--data", data,
                     "--out", pred_path]) == 0
        lines = (workdir / "preds.jsonl").read_text().splitlines()
        assert len(lines) == 3  # header + 2 sequences
        first = json.loads(lines[1])
        assert np.asarray(first["poses_3d"]).shape == (60, 17, 3)

        vel_path = workdir / "velocity.csv"
        velocity = np.concatenate([np.full(30, 0.1), np.full(30, 0.9)])
        np.savetxt(vel_path, velocity, delimiter=",")
        adout = str(workdir / "adaptive")
        assert main(["adaptive-infer", "--config", cfg, "--checkpoint", str(ckpt),
                     "--data", data, "--out", adout,
                     "--oracle-velocity", str(vel_path)]) == 0
        trace_file = workdir / "adaptive" / "seq000_trace.csv"
        with open(trace_file) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["frame", "stride"]
        strides = [int(r[1]) for r in rows[1:]]
        assert strides[0] == 4 and strides[-1] == 2

        assert main(["bench", "--config", cfg, "--out", str(workdir / "benchout")]) == 0
        assert (workdir / "benchout" / "bench.csv").exists()
        capsys.readouterr()

    def test_grad_check_command(self, capsys):
        assert main(["grad-check", "--probes", "20"]) == 0
        out = capsys.readouterr().out
        assert "max relative error" in out

    def test_eval_without_checkpoint_fails(self, workdir, capsys):
        code = main(["eval", "--data", str(workdir / "data.jsonl"), "--out", str(workdir)])
        assert code == 1
        capsys.readouterr()
