"""Headless command-line entry point.

Exit codes (stable contract):
  0  success / run finished
  2  usage or invalid input
  3  run aborted
  4  policy stuck (scripted operator had no command for an awaited state)
  5  run timed out
  6  missing weights
  7  dataset too small
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import nn
from .bench import BenchConfig, calibrate_flow_threshold, run_benchmark, train_motion_cnn
from .landmark import (
    DatasetTooSmall,
    evaluate_cascade,
    generate_dataset,
    load_dataset,
    save_dataset,
    train_cascade,
)
from .metrics import build_report, samples_csv
from .motion import ThresholdTable
from .runlog import CorruptLog, RunLog, SchemaVersionMismatch
from .scenario import InvalidScenario, load_scenario
from .service import ServiceConfig, serve_forever
from .session import make_policy, replay, run_scripted

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORTED = 3
EXIT_POLICY_STUCK = 4
EXIT_TIMEOUT = 5
EXIT_MISSING_WEIGHTS = 6
EXIT_DATASET_TOO_SMALL = 7

_STATUS_EXIT = {"done": EXIT_OK, "aborted": EXIT_ABORTED, "policy_stuck": EXIT_POLICY_STUCK, "timeout": EXIT_TIMEOUT}


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = load_scenario(args.scenario)
        policy = make_policy(args.policy)
    except (InvalidScenario, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    log, status = run_scripted(scenario, policy=policy, profile=args.profile, seed=args.seed)
    out = _out_dir(args.out)
    log.write(out / "run.jsonl")
    report = build_report(log)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "samples.csv").write_text(samples_csv(report))
    print(f"status: {status}")
    print(f"stitches: {report.stitches}")
    print(f"replans: {report.replans}  deformation events: {report.deformation_events_detected}")
    print(f"hesitancy/stitch: {report.hesitancy_per_stitch:.3f}  first attempt: {report.first_attempt_rate:.1%}")
    if report.spacing_mean_mm is not None:
        print(
            f"spacing: {report.spacing_mean_mm:.2f} mm mean, COV {report.spacing_cov_pct:.1f}%"
        )
    if report.bite_depth_mean_mm is not None:
        print(
            f"bite depth: {report.bite_depth_mean_mm:.2f} mm mean, COV {report.bite_depth_cov_pct:.1f}%"
        )
    times = report.time_minutes
    print(
        "time (min): planning %.2f, supervision %.2f, suturing %.2f, mode transitions %.2f"
        % (times["planning"], times["supervision"], times["suturing"], times["mode_transitions"])
    )
    print(f"artifacts: {out}")
    return _STATUS_EXIT.get(status, EXIT_USAGE)


def cmd_motion_bench(args: argparse.Namespace) -> int:
    if args.cycles < 1 or args.orientations < 1:
        print("error: cycles and orientations must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    config = BenchConfig(
        distances_mm=tuple(args.distances),
        n_orientations=args.orientations,
        cycles=args.cycles,
        seed=args.seed,
    )
    out = _out_dir(args.out)
    weights_path = Path(args.weights) if args.weights else out / "motion_cnn.npz"
    if args.train:
        cnn, losses = train_motion_cnn(config, seed=args.seed)
        nn.save_weights(cnn, weights_path)
        (out / "train_losses.json").write_text(json.dumps(losses))
        print(f"trained CNN saved to {weights_path}")
    elif weights_path.exists():
        cnn = nn.load_weights(weights_path)
    else:
        print(
            f"error: no CNN weights at {weights_path}; pass --train to train",
            file=sys.stderr,
        )
        return EXIT_MISSING_WEIGHTS
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 7)))
    of_threshold = calibrate_flow_threshold(config, rng)
    oa_table = ThresholdTable(entries={config.calibration_distance_mm: of_threshold})
    result = run_benchmark(config, cnn, of_threshold, oa_table)
    (out / "bench_cells.csv").write_text(result.to_csv())
    summary = result.summary() | {
        "of_threshold": of_threshold,
        "oa_table": {str(k): v for k, v in oa_table.entries.items()},
        "grid": {
            "distances_mm": list(config.distances_mm),
            "orientations": config.n_orientations,
            "cycles": config.cycles,
        },
    }
    (out / "bench_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    acc = summary["accuracy"]
    for name in ("CNN", "OF", "OA"):
        if name in acc:
            print(f"{name}: {acc[name]:.2%} over {summary['cases_per_detector'][name]} cases")
    ordered = acc.get("CNN", 0) > acc.get("OF", 0) > acc.get("OA", 0)
    print(f"ordering CNN > OF > OA: {'yes' if ordered else 'NO'}")
    print(f"artifacts: {out}")
    return EXIT_OK


def cmd_landmark(args: argparse.Namespace) -> int:
    data_dir = Path(args.data)
    out = _out_dir(args.out)
    if args.mode == "train":
        if (data_dir / "manifest.json").exists():
            dataset = load_dataset(data_dir)
        else:
            dataset = generate_dataset(n_frames=args.frames, seed=args.seed)
            save_dataset(dataset, data_dir)
            print(f"generated synthetic dataset ({args.frames} frames) in {data_dir}")
        try:
            result = train_cascade(dataset, epochs=args.epochs, seed=args.seed)
        except DatasetTooSmall as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATASET_TOO_SMALL
        nn.save_weights(result.seg_net, out / "landmark_seg.npz")
        nn.save_weights(result.heat_net, out / "landmark_heat.npz")
        (out / "landmark_train_losses.json").write_text(json.dumps(result.losses))
        print(f"final training loss: {result.losses[-1]:.4f}")
        print(f"weights: {out / 'landmark_seg.npz'}, {out / 'landmark_heat.npz'}")
        return EXIT_OK
    # eval
    if not (data_dir / "manifest.json").exists():
        print(f"error: no dataset manifest in {data_dir}", file=sys.stderr)
        return EXIT_USAGE
    seg_path = Path(args.weights_dir or args.out) / "landmark_seg.npz"
    heat_path = Path(args.weights_dir or args.out) / "landmark_heat.npz"
    if not seg_path.exists() or not heat_path.exists():
        print(f"error: missing weights in {seg_path.parent}", file=sys.stderr)
        return EXIT_MISSING_WEIGHTS
    dataset = load_dataset(data_dir)
    seg_net = nn.load_weights(seg_path)
    heat_net = nn.load_weights(heat_path)
    ev = evaluate_cascade(dataset, seg_net, heat_net, split=args.split)
    rows = ["serial,mean_error_px,complete,injected_detected,injected_removed"]
    for f in ev.frames:
        rows.append(
            f"{f.serial},{f.mean_px:.4f},{int(f.complete)},{f.injected_peaks_detected},{f.injected_peaks_removed}"
        )
    (out / "landmark_eval.csv").write_text("\n".join(rows) + "\n")
    summary = {
        "split": args.split,
        "mean_error_px": ev.mean_error_px,
        "sd_error_px": ev.sd_error_px,
        "effective_radius_reference_px": ev.effective_radius_reference,
        "passes": ev.passes,
        "injected_peaks_detected": ev.total_injected_peaks_detected,
        "injected_peaks_removed": ev.total_injected_peaks_removed,
    }
    (out / "landmark_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(
        "landmark error: %.2f +/- %.2f px (allowable %.2f px) -> %s"
        % (
            ev.mean_error_px,
            ev.sd_error_px,
            ev.effective_radius_reference,
            "pass" if ev.passes else "FAIL",
        )
    )
    print(
        f"injected background peaks removed: {ev.total_injected_peaks_removed}/{ev.total_injected_peaks_detected}"
    )
    return EXIT_OK if ev.passes else EXIT_USAGE


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        original = RunLog.read(args.log)
    except (CorruptLog, SchemaVersionMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    replayed, status = replay(original)
    identical_events = replayed.event_sequence() == original.event_sequence()
    identical_bytes = replayed.to_jsonl() == original.to_jsonl()
    if args.out:
        out = _out_dir(args.out)
        replayed.write(out / "replay.jsonl")
    print(f"replay status: {status}")
    print(f"event sequence identical: {identical_events}")
    print(f"byte identical: {identical_bytes}")
    return EXIT_OK if identical_events else EXIT_USAGE


def cmd_report(args: argparse.Namespace) -> int:
    try:
        log = RunLog.read(args.log)
    except (CorruptLog, SchemaVersionMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = build_report(log)
    out = _out_dir(args.out)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "samples.csv").write_text(samples_csv(report))
    print(report.to_json())
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    serve_forever(
        ServiceConfig(
            host=args.host, port=args.port, log_dir=args.log_dir, static_dir=args.static_dir
        )
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="suturesim",
        description="Conditionally autonomous laparoscopic suturing simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scripted session headlessly")
    p.add_argument("--scenario", default="default", help="builtin name or JSON path")
    p.add_argument("--policy", default="auto_approve")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", default="ex_vivo", choices=["ex_vivo", "in_vivo"])
    p.add_argument("--out", default="out/run")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("motion-bench", help="motion-detector accuracy grid")
    p.add_argument("--distances", type=float, nargs="+", default=[30.0, 65.0, 100.0])
    p.add_argument("--orientations", type=int, default=11)
    p.add_argument("--cycles", type=int, default=5)
    p.add_argument("--train", action="store_true", help="train the CNN first")
    p.add_argument("--weights", default=None, help="CNN weights file")
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--out", default="out/motion_bench")
    p.set_defaults(func=cmd_motion_bench)

    p = sub.add_parser("landmark", help="landmark cascade training/evaluation")
    p.add_argument("--mode", choices=["train", "eval"], required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", default="out/landmark")
    p.add_argument("--weights-dir", default=None)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_landmark)

    p = sub.add_parser("replay", help="replay a run log and verify identity")
    p.add_argument("--log", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("report", help="score a run log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", default="out/report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="host sessions over HTTP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8777)
    p.add_argument("--log-dir", default=None)
    p.add_argument("--static-dir", default=None, help="serve the operator console from here")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
