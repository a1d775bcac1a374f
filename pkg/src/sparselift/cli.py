"""Command-line interface.

Subcommands: synth, pretrain, train, finetune, eval, infer, adaptive-infer,
bench, grad-check, report. Every command reads one YAML configuration file
(see ``config.py`` for the schema) plus flag overrides. Errors are emitted
as one JSON object per line on stderr; exit codes: 0 success, 1 validation
or runtime failure, 2 usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from . import bench as bench_mod
from . import metrics as metrics_mod
from .adaptive import adaptive_infer
from .checkpoint import load_model, save_checkpoint
from .config import load_run_config
from .dataio import read_dataset, validate_dataset, write_dataset
from .errors import ConfigError, SparseliftError
from .geometry import H36M_SKELETON
from .inference import predict_dense
from .network import ModelConfig, UpliftModel, grad_check
from .sequencing import StrideSchedule
from .synthetic import CameraRanges, MotionSpec, NoiseConfig, build_dataset
from .training import (EmaWeights, TrainConfig, Trainer, evaluate, loss_total,
                       write_training_log)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run configuration file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--stride-in", type=int, default=None, dest="stride_in")
    parser.add_argument("--stride-out", type=int, default=None, dest="stride_out")
    parser.add_argument("--window", type=int, default=None)
    parser.add_argument("--checkpoint", default=None)
    parser.add_argument("--out", default=None, help="output file or directory")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparselift",
                                     description="Sparse-to-dense 2D-to-3D pose uplifting")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("synth", "generate a synthetic paired 2D/3D dataset"),
        ("pretrain", "train on a noise-free projected dataset"),
        ("train", "train a model from scratch"),
        ("finetune", "continue training from a checkpoint with a fresh optimizer"),
        ("eval", "evaluate a checkpoint on a dataset"),
        ("infer", "predict dense 3D poses for a dataset"),
        ("adaptive-infer", "inference with velocity-adaptive input stride"),
        ("bench", "FLOPs estimate and forward-pass throughput"),
        ("grad-check", "finite-difference check of the analytic gradients"),
        ("report", "re-emit CSV files from a stored evaluation report"),
    ]:
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        if name in ("pretrain", "train", "finetune", "eval", "infer", "adaptive-infer"):
            p.add_argument("--data", help="dataset file", required=False)
        if name == "eval":
            p.add_argument("--flip-tta", action="store_true", dest="flip_tta")
        if name == "adaptive-infer":
            p.add_argument("--oracle-velocity", default=None, dest="oracle_velocity",
                           help="CSV with one velocity (m/s) per frame, controller test hook")
        if name == "report":
            p.add_argument("--report", required=True, help="stored evaluation report (JSON)")
        if name == "grad-check":
            p.add_argument("--probes", type=int, default=200)
            p.add_argument("--epsilon", type=float, default=1e-4)
            p.add_argument("--tolerance", type=float, default=1e-3)
    return parser


def _overrides(args) -> dict:
    return {"seed": args.seed, "stride_in": args.stride_in,
            "stride_out": args.stride_out, "window": args.window}


def _require(value, message: str):
    if value is None:
        raise ConfigError(message)
    return value


def _load_config(args):
    return load_run_config(_require(args.config, "this command needs --config"),
                           _overrides(args))


def _out_dir(args) -> str:
    out = _require(args.out, "this command needs --out")
    os.makedirs(out, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    run = _load_config(args)
    section = run.synth
    seed = args.seed if args.seed is not None else int(section.get("seed", 0))
    kinds = section.get("kinds", ["sinusoidal-limbs"])
    count = int(section.get("sequences", 4))
    specs = [
        MotionSpec(
            kind=kinds[i % len(kinds)],
            duration=int(section.get("duration", 500)),
            frame_rate=float(section.get("frame_rate", 50.0)),
            skeleton=H36M_SKELETON,
            amplitude_mm=float(section.get("amplitude_mm", 100.0)),
            frequency_hz=float(section.get("frequency_hz", 1.0)),
            seed=seed * 1000 + i,
        )
        for i in range(count)
    ]
    sigma = float(section.get("noise_sigma", 0.0))
    dropout = float(section.get("noise_dropout", 0.0))
    noise = NoiseConfig(sigma=sigma, dropout=dropout) if (sigma > 0 or dropout > 0) else None
    dataset = build_dataset(specs, CameraRanges(), noise=noise, seed=seed)
    problems = validate_dataset(dataset)
    if problems:
        raise SparseliftError("generated dataset failed validation: " + "; ".join(problems))
    out = _require(args.out, "synth needs --out FILE")
    write_dataset(dataset, out)
    print(f"wrote {len(dataset.records)} sequences to {out}")
    return 0


def _train_common(args, phase: str) -> int:
    run = _load_config(args)
    model_cfg = _require(run.model, "config needs a model section")
    train_cfg = _require(run.train, "config needs a train section")
    dataset = read_dataset(_require(args.data, "this command needs --data"))
    torch.manual_seed(train_cfg.seed)
    if phase == "finetune":
        model, _ = load_model(_require(args.checkpoint, "finetune needs --checkpoint"))
        model.train()
    else:
        model = UpliftModel(model_cfg)
    trainer = Trainer(model, dataset, train_cfg)
    history = trainer.run()
    out = _out_dir(args)
    write_training_log(history, os.path.join(out, f"{phase}_log.csv"))
    save_checkpoint(os.path.join(out, f"{phase}.ckpt"), model, metadata={"phase": phase})
    if trainer.ema is not None:
        with trainer.ema.applied(model):
            save_checkpoint(os.path.join(out, f"{phase}_ema.ckpt"), model,
                            metadata={"phase": phase, "ema": True})
    final = history[-1]["loss"] if history else float("nan")
    print(f"{phase} finished: {len(history)} steps, final loss {final:.3f} mm")
    print(f"checkpoint: {os.path.join(out, phase + '.ckpt')}")
    return 0


def cmd_train(args) -> int:
    return _train_common(args, "train")


def cmd_pretrain(args) -> int:
    return _train_common(args, "pretrain")


def cmd_finetune(args) -> int:
    return _train_common(args, "finetune")


def cmd_eval(args) -> int:
    model, _ = load_model(_require(args.checkpoint, "eval needs --checkpoint"))
    dataset = read_dataset(_require(args.data, "eval needs --data"))
    report = evaluate(model, dataset, stride_in=args.stride_in, flip_tta=args.flip_tta)
    out = _out_dir(args)
    with open(os.path.join(out, "eval_report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    if args.format == "csv":
        for tag, rep in (("all_frames", report.all_frames), ("key_frames", report.key_frames)):
            metrics_mod.write_report_csv(
                rep,
                os.path.join(out, f"{tag}_summary.csv"),
                os.path.join(out, f"{tag}_frames.csv"),
                os.path.join(out, f"{tag}_velocity_histogram.csv"),
            )
    a = report.all_frames
    print(f"stride_in={report.stride_in} flip_tta={report.flip_tta}")
    print(f"all frames: MPJPE {a.mpjpe_mm:.2f} mm | N-MPJPE {a.n_mpjpe_mm:.2f} | "
          f"P-MPJPE {a.p_mpjpe_mm:.2f} | PCK {a.pck_percent:.1f}% | AUC {a.auc_percent:.1f}%")
    k = report.key_frames
    print(f"key frames: MPJPE {k.mpjpe_mm:.2f} mm | N-MPJPE {k.n_mpjpe_mm:.2f} | "
          f"P-MPJPE {k.p_mpjpe_mm:.2f} | PCK {k.pck_percent:.1f}% | AUC {k.auc_percent:.1f}%")
    return 0


def cmd_infer(args) -> int:
    model, _ = load_model(_require(args.checkpoint, "infer needs --checkpoint"))
    dataset = read_dataset(_require(args.data, "infer needs --data"))
    schedule = model.config.schedule
    if args.stride_in is not None:
        schedule = schedule.with_stride_in(args.stride_in)
    out = _require(args.out, "infer needs --out FILE")
    with open(out, "w") as fh:
        fh.write(json.dumps({"format": "sparselift-predictions",
                             "stride_in": schedule.stride_in,
                             "stride_out": schedule.stride_out}) + "\n")
        for rec in dataset.records:
            pred = predict_dense(model, rec.poses_2d, schedule, dataset.skeleton)
            fh.write(json.dumps({"id": rec.seq_id, "poses_3d": pred.tolist()}) + "\n")
    print(f"wrote predictions for {len(dataset.records)} sequences to {out}")
    return 0


def cmd_adaptive_infer(args) -> int:
    run = _load_config(args)
    model, _ = load_model(_require(args.checkpoint, "adaptive-infer needs --checkpoint"))
    dataset = read_dataset(_require(args.data, "adaptive-infer needs --data"))
    oracle = None
    if args.oracle_velocity:
        oracle = np.loadtxt(args.oracle_velocity, delimiter=",", ndmin=1)
    out = _out_dir(args)
    for rec in dataset.records:
        result = adaptive_infer(model, rec.poses_2d, run.adaptive, dataset.skeleton,
                                dataset.frame_rate, oracle_velocity=oracle)
        with open(os.path.join(out, f"{rec.seq_id}_trace.csv"), "w") as fh:
            fh.write("frame,stride\n")
            for f, s in enumerate(result.stride_trace):
                fh.write(f"{f},{s}\n")
        with open(os.path.join(out, f"{rec.seq_id}_poses.json"), "w") as fh:
            json.dump({"id": rec.seq_id, "poses_3d": result.poses.tolist(),
                       "switch_frames": result.switch_frames}, fh)
        fast = int((result.stride_trace == run.adaptive.fast_stride).sum())
        print(f"{rec.seq_id}: {fast}/{len(result.stride_trace)} frames at fast stride, "
              f"switches at {result.switch_frames}")
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint:
        model, _ = load_model(args.checkpoint)
    else:
        run = _load_config(args)
        model = UpliftModel(_require(run.model, "config needs a model section"))
    section = {}
    if args.config:
        section = load_run_config(args.config, _overrides(args)).bench
    report = bench_mod.bench_throughput(
        model,
        stride_in=args.stride_in,
        duration_s=float(section.get("duration_s", 2.0)),
        frame_rate=float(section.get("frame_rate", 50.0)),
    )
    print(f"FLOPs/forward: {report.flops / 1e6:.1f} M ({report.flops_convention})")
    print(f"forwards/sec: {report.forwards_per_sec:.1f} | poses/sec: {report.poses_per_sec:.1f} "
          f"at {report.frame_rate:.0f} Hz (x{report.realtime_factor:.2f} real time)")
    print(f"latency: median {report.median_ms:.2f} ms, p95 {report.p95_ms:.2f} ms "
          f"over {report.n_forwards} forwards")
    if args.out:
        out = _out_dir(args)
        bench_mod.write_bench_csv(report, os.path.join(out, "bench.csv"))
        bench_mod.write_bench_json(report, os.path.join(out, "bench.json"))
    return 0


def cmd_grad_check(args) -> int:
    if args.config:
        run = _load_config(args)
        model_cfg = _require(run.model, "config needs a model section")
    else:
        model_cfg = ModelConfig(
            joints=5, schedule=StrideSchedule(9, 4, 1), d_joint=4, d_temp=8,
            blocks_spatial=1, blocks_temporal=1, blocks_strided=1,
            heads_spatial=2, heads_temporal=2, reduction_strides=(9,),
            drop_path_rate=0.0,
        )
    seed = args.seed if args.seed is not None else 0
    torch.manual_seed(seed)
    model = UpliftModel(model_cfg).double()
    from .sequencing import token_layout
    layout = token_layout(model_cfg.schedule)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(2, layout.n_in, model_cfg.joints, 2, generator=gen, dtype=torch.float64)
    gt_seq = 100.0 * torch.randn(2, layout.n_out, model_cfg.joints, 3, generator=gen, dtype=torch.float64)
    gt_center = gt_seq[:, layout.center_slot]

    def loss_fn(m):
        out = m(x, layout)
        return loss_total(out.sequence, out.center, gt_seq, gt_center, 0, 0.5, 0.5)

    result = grad_check(model, loss_fn, probes=args.probes, epsilon=args.epsilon, seed=seed,
                        tolerance=args.tolerance)
    print(f"max relative error {result.max_rel_error:.3e} over {result.probes} probes "
          f"(worst: {result.worst_parameter})")
    if result.failures:
        print(f"{len(result.failures)} probes above tolerance {args.tolerance}")
        return 1
    return 0


def cmd_report(args) -> int:
    with open(args.report) as fh:
        raw = json.load(fh)
    out = _out_dir(args)
    sections = [("all_frames", raw["all_frames"]), ("key_frames", raw["key_frames"])] \
        if "all_frames" in raw else [("report", raw)]
    for tag, section in sections:
        rep = metrics_mod.MetricsReport.from_dict(section)
        metrics_mod.write_report_csv(
            rep,
            os.path.join(out, f"{tag}_summary.csv"),
            os.path.join(out, f"{tag}_frames.csv"),
            os.path.join(out, f"{tag}_velocity_histogram.csv"),
        )
    print(f"wrote CSV reports to {out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "adaptive-infer": cmd_adaptive_infer,
    "bench": cmd_bench,
    "grad-check": cmd_grad_check,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SPARSELIFT_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (SparseliftError, OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
