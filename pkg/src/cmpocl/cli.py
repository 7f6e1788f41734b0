"""Command-line entry point (``cmpocl``).

Exit codes: 0 success, 1 failed gradient check, 2 invalid configuration,
3 training aborted, 4 corrupted checkpoint. Errors are printed to stderr as
one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig
from .datastream import IngestError, synth_gaussian_stream, write_vectors_csv
from .experiment import aggregate, execute, load_data, probe_state
from .gradsuite import run_loss_suite, run_op_suite
from .trainer import TrainingAborted

EXIT_GRADCHECK, EXIT_CONFIG, EXIT_ABORT, EXIT_CHECKPOINT = 1, 2, 3, 4


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def _load_config(path: str, seed) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path)
    return cfg.replace(seed=seed) if seed is not None else cfg


def cmd_train(args) -> int:
    try:
        cfg = _load_config(args.config, args.seed)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), key=exc.key)
    except OSError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    out = Path(args.out)
    seeds = [cfg["seed"] + i for i in range(args.seeds)] if args.seeds > 1 else [cfg["seed"]]
    for seed in seeds:
        run_dir = out / f"seed_{seed}" if args.seeds > 1 else out
        try:
            outcome = execute(cfg, seed, run_dir, probe=not args.no_probe)
        except TrainingAborted as exc:
            return _fail(EXIT_ABORT, "aborted", str(exc), diagnostics=exc.diagnostics)
        except (IngestError, OSError) as exc:
            return _fail(EXIT_CONFIG, "data", str(exc))
        acc = outcome.probe.accuracy if outcome.probe is not None else None
        print(json.dumps({"run": str(run_dir), "seed": seed, "steps": len(outcome.reports), "accuracy": acc}))
    return 0


def cmd_probe(args) -> int:
    try:
        cfg = _load_config(args.config, args.seed)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), key=exc.key)
    try:
        state, _, _ = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, "checkpoint", str(exc))
    except OSError as exc:
        return _fail(EXIT_CHECKPOINT, "checkpoint", str(exc))
    train, test = load_data(cfg)
    result, erank = probe_state(cfg, state, train, test)
    payload = {**result.to_dict(), "effective_rank": erank}
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _collect_summaries(paths) -> list[dict]:
    found = []
    for p in map(Path, paths):
        if (p / "summary.json").is_file():
            found.append(p / "summary.json")
        else:
            found.extend(sorted(p.glob("*/summary.json")))
    return [json.loads(f.read_text()) for f in found]


def format_table(rows: list[dict]) -> tuple[str, str]:
    header = ["SSL Method", "Strategy", "M size", "Probing Accuracy"]
    lines = []
    for r in rows:
        if r["mean"] is None:
            acc = "-"
        elif r["std"] is None:
            acc = f"{r['mean']:.1f}"
        else:
            acc = f"{r['mean']:.1f} ± {r['std']:.1f}"
        lines.append([r["ssl"], r["strategy"], str(r["memory"]), acc])
    widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h) for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    text = "\n".join([fmt.format(*header), fmt.format(*("-" * w for w in widths))] +
                     [fmt.format(*l) for l in lines]) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["ssl", "strategy", "memory", "runs", "mean", "std", "config_hash"])
    for r in rows:
        writer.writerow([r["ssl"], r["strategy"], r["memory"], r["runs"],
                         "" if r["mean"] is None else f"{r['mean']:.4f}",
                         "" if r["std"] is None else f"{r['std']:.4f}", r["config_hash"]])
    return text, buf.getvalue()


def cmd_table(args) -> int:
    summaries = _collect_summaries(args.runs)
    if not summaries:
        return _fail(EXIT_CONFIG, "table", "no run summaries found")
    text, csv_text = format_table(aggregate(summaries))
    sys.stdout.write(text)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    return 0


def cmd_gradcheck(args) -> int:
    ops = run_op_suite(args.instances, args.seed)
    suite = run_loss_suite(args.instances, args.seed)
    report = {"ops": ops, "losses": suite.max_error, "barrier_violations": suite.barrier_violations,
              "tolerance": args.tol}
    failed = [name for name, err in ops.items() if not err < args.tol] + suite.failures(args.tol)
    report["failed"] = failed
    print(json.dumps(report, indent=2))
    if failed:
        return _fail(EXIT_GRADCHECK, "gradcheck", "gradient check failed for " + ", ".join(failed), failed=failed)
    return 0


def cmd_synth_data(args) -> int:
    ds = synth_gaussian_stream(args.classes, args.dim, args.samples_per_class, args.class_sep, args.seed)
    write_vectors_csv(args.out, ds)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmpocl", description="Replay-free online continual SSL experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train over one stream and probe the result")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=1, help="sweep this many consecutive seeds")
    p.add_argument("--no-probe", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="linear-probe a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("table", help="aggregate run directories into a results table")
    p.add_argument("runs", nargs="+")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every op and loss")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth-data", help="write a synthetic Gaussian dataset as vectors-csv")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--samples-per-class", type=int, default=200)
    p.add_argument("--class-sep", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("CMP_NUM_THREADS")
    if threads:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=int(threads)):
            return args.func(args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
