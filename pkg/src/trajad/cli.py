"""Command-line entry point: generate, train, calibrate, detect, evaluate.

Every command writes a ``*.manifest.json`` next to its output recording the
resolved configuration and SHA-256 hashes of inputs and outputs. Log
verbosity comes from ``TRAJAD_LOG_LEVEL`` (default ``WARNING``).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (ABNORMAL, NORMAL, UNKNOWN, read_checkpoints, read_trajectories, span_label,
                   split_corpus, write_checkpoints, write_trajectories)
from .detection import Detector, ScoreReport
from .evaluation import (Calibration, calibrate_theta, f1_sweep, format_summary, pr_curve,
                         roc_curve, summary)
from .seq2seq import ModelConfig, load_model, reconstruction_error, save_model
from .simgen import BENCHMARK_SIZES, make_benchmark
from .training import TrainConfig, TrainingError, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("trajad")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict[str, str] = field(default_factory=dict)   # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)
    version: str = __version__

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"input not found: {p}")


def _manifest(command: str, args, inputs, outputs, manifest_path, seeds=None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    RunManifest(command, cfg, seeds or {},
                {str(p): sha256(p) for p in inputs if p is not None},
                {str(p): sha256(p) for p in outputs}).write(Path(manifest_path))


def _jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, separators=(",", ":")) + "\n")


def _read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- commands -----------------------------------------------------------------

def cmd_generate(args) -> None:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = make_benchmark(args.benchmark, seed=args.seed, n_abnormal=args.n_abnormal,
                           n_train=args.n_train, n_val_normal=args.n_val_normal,
                           n_val_abnormal=args.n_val_abnormal)
    files = {"train.jsonl": bench.train, "validation.jsonl": bench.validation,
             "test.jsonl": bench.test}
    for name, trajs in files.items():
        write_trajectories(out / name, trajs)
    write_checkpoints(out / "checkpoints.jsonl", bench.plan.checkpoint_set())
    (out / "plan.json").write_text(json.dumps(bench.plan.to_dict(), indent=2) + "\n")
    outputs = [out / n for n in (*files, "checkpoints.jsonl", "plan.json")]
    _manifest("generate", args, [], outputs, out / "manifest.json", {"seed": args.seed})
    log.info("wrote %d train, %d validation, %d test trajectories to %s",
             len(bench.train), len(bench.validation), len(bench.test), out)


def cmd_train(args) -> None:
    _require(args.train, args.checkpoints)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, initial_lr=args.lr,
                      lr_decay_factor=args.lr_decay, patience=args.patience,
                      clip_norm=args.clip_norm, validation_fraction=args.validation_fraction,
                      bucket_width=args.bucket_width, rng_seed=args.seed)
    cps = read_checkpoints(args.checkpoints)
    trajs = [t for t in read_trajectories(args.train) if t.label != ABNORMAL]
    subs = split_corpus(trajs, cps)
    if len(subs) < 2:
        raise ValueError("training file yields fewer than 2 sub-trajectories")
    params, report = train(subs, cfg, ModelConfig())
    out = Path(args.out)
    save_model(out, params, {"train_config": asdict(cfg)})
    report_path = Path(args.report) if args.report else out.with_suffix(".train.jsonl")
    # wall-clock time stays out of the artifact so reruns are byte-identical
    _jsonl(report_path, report.records())
    _manifest("train", args, [args.train, args.checkpoints], [out, report_path],
              out.with_suffix(".manifest.json"), {"seed": args.seed})
    log.info("trained %d epochs in %.1fs, best epoch %d", cfg.epochs, report.duration_s,
             report.best_epoch)


def _labelled_errors(params, path, cps):
    subs = [s for s in split_corpus(read_trajectories(path), cps) if s.label != UNKNOWN]
    eps = np.array([reconstruction_error(params, s) for s in subs])
    return eps, np.array([s.label == ABNORMAL for s in subs])


def cmd_calibrate(args) -> None:
    _require(args.model, args.validation, args.checkpoints)
    params = load_model(args.model)
    eps, pos = _labelled_errors(params, args.validation, read_checkpoints(args.checkpoints))
    if pos.all() or not pos.any():
        raise UsageError("validation file must contain both normal and abnormal "
                         "sub-trajectories to calibrate a threshold")
    cal = calibrate_theta((eps, pos))
    out = Path(args.out)
    out.write_text(json.dumps(cal.to_dict(), indent=2) + "\n")
    _manifest("calibrate", args, [args.model, args.validation, args.checkpoints], [out],
              out.with_suffix(".manifest.json"))
    log.info("theta* = %.6g (F1 %.4f)", cal.theta_star, cal.best_f1_abnormal)


def _theta(args) -> float:
    if args.theta is not None:
        return float(args.theta)
    return Calibration.from_dict(json.loads(Path(args.theta_file).read_text())).theta_star


def _parse_stream_line(line: str, lineno: int):
    parts = line.split()
    if len(parts) == 2 and parts[1].lower() == "end":
        return parts[0], None
    if len(parts) != 5:
        raise ValueError(f"stream line {lineno}: expected 'entity_id t x y z', got {line!r}")
    return parts[0], [float(v) for v in parts[1:]]


def _emit(fh, reports: list[ScoreReport]) -> None:
    for r in reports:
        fh.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")
    fh.flush()


def cmd_detect(args) -> None:
    _require(args.model, args.checkpoints, args.theta_file, args.input)
    params = load_model(args.model)
    det = Detector(params, read_checkpoints(args.checkpoints), _theta(args))
    out_fh = open(args.out, "w") if args.out else sys.stdout
    try:
        if args.input:
            for tr in read_trajectories(args.input):
                det.session(tr.entity_id, tr.label, tr.anomaly_span)
                for p in tr.points:
                    _emit(out_fh, det.feed(tr.entity_id, p))
                _emit(out_fh, det.close(tr.entity_id))
        else:
            for k, line in enumerate(sys.stdin, 1):
                if not line.strip() or line.startswith("#"):
                    continue
                eid, pt = _parse_stream_line(line, k)
                _emit(out_fh, det.close(eid) if pt is None else det.feed(eid, pt))
            _emit(out_fh, det.close_all())
    finally:
        if out_fh is not sys.stdout:
            out_fh.close()
    if args.out:
        inputs = [args.model, args.checkpoints, args.theta_file, args.input]
        _manifest("detect", args, inputs, [args.out],
                  Path(args.out).with_suffix(".manifest.json"))


def _relabel(reports: list[dict], path) -> list[dict]:
    trajs = {t.entity_id: t for t in read_trajectories(path)}
    out = []
    for r in reports:
        t = trajs.get(r["entity_id"])
        label = UNKNOWN if t is None else span_label(t.label, t.anomaly_span,
                                                      r["t_start"], r["t_end"])
        out.append({**r, "label": label})
    return out


def _write_xy(path, xs, ys) -> None:
    with open(path, "w") as fh:
        for x, y in zip(xs, ys):
            fh.write(f"{float(x)!r} {float(y)!r}\n")


def cmd_evaluate(args) -> None:
    _require(args.reports, args.labels)
    reports = _read_jsonl(args.reports)
    if args.labels:
        reports = _relabel(reports, args.labels)
    reports = [r for r in reports if r["label"] in (NORMAL, ABNORMAL)]
    if not reports:
        raise UsageError("no labelled reports to evaluate")
    thetas = {r["threshold_theta"] for r in reports}
    if args.theta is None and len(thetas) != 1:
        raise UsageError("reports use several thresholds; pass --theta")
    theta = float(args.theta) if args.theta is not None else thetas.pop()
    eps = np.array([r["epsilon"] for r in reports], dtype=np.float64)
    pos = np.array([r["label"] == ABNORMAL for r in reports])
    if pos.all() or not pos.any():
        raise UsageError("evaluation needs both normal and abnormal reports")
    s = summary((eps, pos), theta)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(s, indent=2, sort_keys=True) + "\n")
    (out / "metrics.txt").write_text(format_summary(s))
    fpr, tpr, _ = roc_curve((eps, pos))
    _write_xy(out / "roc.txt", fpr, tpr)
    rec, prec, _ = pr_curve((eps, pos))
    _write_xy(out / "pr.txt", rec, prec)
    grid = np.linspace(0.0, 3.0 * theta, args.grid) if theta > 0 else None
    sweep = f1_sweep((eps, pos), grid, n=args.grid)
    _write_xy(out / "f1_theta.txt", [t for t, _ in sweep], [f for _, f in sweep])
    outputs = [out / n for n in ("metrics.json", "metrics.txt", "roc.txt", "pr.txt",
                                 "f1_theta.txt")]
    _manifest("evaluate", args, [args.reports, args.labels], outputs, out / "manifest.json")
    print(format_summary(s), end="")


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trajad",
                                 description="Trajectory anomaly detection with an LSTM "
                                             "autoencoder")
    ap.add_argument("--version", action="version", version=f"trajad {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a seeded synthetic benchmark")
    g.add_argument("--benchmark", choices=sorted(BENCHMARK_SIZES), default="small")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--n-abnormal", type=int, default=60)
    g.add_argument("--n-train", type=int, default=400)
    g.add_argument("--n-val-normal", type=int, default=100)
    g.add_argument("--n-val-abnormal", type=int, default=60)
    g.set_defaults(func=cmd_generate)

    d = TrainConfig()
    t = sub.add_parser("train", help="train the autoencoder on normal trajectories")
    t.add_argument("--train", required=True, help="trajectory file (abnormal ones are skipped)")
    t.add_argument("--checkpoints", required=True)
    t.add_argument("--out", required=True, help="model checkpoint path")
    t.add_argument("--report", help="epoch records (default: <out>.train.jsonl)")
    t.add_argument("--epochs", type=int, default=d.epochs)
    t.add_argument("--batch-size", type=int, default=d.batch_size)
    t.add_argument("--lr", type=float, default=d.initial_lr)
    t.add_argument("--lr-decay", type=float, default=d.lr_decay_factor)
    t.add_argument("--patience", type=int, default=d.patience)
    t.add_argument("--clip-norm", type=float, default=d.clip_norm)
    t.add_argument("--validation-fraction", type=float, default=d.validation_fraction)
    t.add_argument("--bucket-width", type=int, default=d.bucket_width)
    t.add_argument("--seed", type=int, default=d.rng_seed)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="pick theta maximizing abnormal F1")
    c.add_argument("--model", required=True)
    c.add_argument("--validation", required=True)
    c.add_argument("--checkpoints", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("detect", help="score trajectories from a file or a live stream")
    s.add_argument("--model", required=True)
    s.add_argument("--checkpoints", required=True)
    th = s.add_mutually_exclusive_group(required=True)
    th.add_argument("--theta", type=float)
    th.add_argument("--theta-file")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="trajectory file")
    src.add_argument("--stream", action="store_true",
                     help="read 'entity_id t x y z' lines from stdin; 'entity_id end' closes")
    s.add_argument("--out", help="report file (default: stdout)")
    s.set_defaults(func=cmd_detect)

    e = sub.add_parser("evaluate", help="metrics and curves from score reports")
    e.add_argument("--reports", required=True)
    e.add_argument("--labels", help="trajectory file to take ground truth from")
    e.add_argument("--theta", type=float, help="override the reports' threshold")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--grid", type=int, default=200)
    e.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TRAJAD_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"trajad {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"trajad {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"trajad {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
