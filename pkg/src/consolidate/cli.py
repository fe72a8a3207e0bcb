"""Command-line front end.

Every command writes its effective configuration to ``<output-dir>/config.json``;
passing that file back with ``--config`` reruns the same experiment.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import data
from .consolidation import explosion_demo
from .exceptions import ConsolidateError
from .experiments import (
    PRUNE_CRITERIA,
    RunConfig,
    run_pruning,
    run_sequential,
    sweep_lambda,
    write_json,
    write_prune_csv,
    write_runs_csv,
    write_sweep_csv,
)
from .plots import render_plots

logger = logging.getLogger("consolidate")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

NET_SEQUENCES = {"dense": "permuted-mnist-10", "conv": "rotated-mnist-fashion-4"}

# command options (not RunConfig fields) and their defaults
COMMAND_OPTIONS = {
    "fetch-data": {"mirror": None, "corpora": ["mnist", "fashion"]},
    "train-seq": {"checkpoint": False},
    "sweep": {"lambdas": [1.0, 2.0, 4.5, 8.0, 16.0], "runs": 5, "full": False},
    "prune": {"criteria": list(PRUNE_CRITERIA), "fractions": [0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 1.0],
              "runs": 10, "per_layer": False},
    "demo-explosion": {"alpha": 0.1, "lambda": 10.0, "omega": 3.0, "steps": 10},
    "report": {"inputs": []},
}

HELP_EPILOG = """\
result files:
  runs.csv    method,penalty,lambda,seed,average_accuracy,failed,per_task_accuracy
              (per_task_accuracy is ';'-separated, in task order)
  sweep.csv   method,penalty,lambda,mean_accuracy,ci_halfwidth,n_runs,n_failed
  prune.csv   criterion,fraction,mean_accuracy,ci_halfwidth,n_runs
  ci_halfwidth is the 0.95 Student-t half-width over runs.

environment:
  CONSOLIDATE_DATA_DIR  dataset root holding mnist/ and fashion/ IDX files
"""


class CommandLineError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandLineError(f"{self.prog}: {message}")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _words(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser():
    parser = _Parser(
        prog="consolidate",
        description="Continual learning with (stabilized) elastic weight consolidation.",
        epilog=HELP_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config (e.g. a previous config.json)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any run setting, e.g. --set n_train=5000")
    common.add_argument("--output-dir", help="where result files go (default results/<command>)")
    common.add_argument("--seed", type=int, help="base seed for all randomness (default 0)")
    common.add_argument("--jobs", type=int, default=None, help="worker processes (default: logical cores)")
    common.add_argument("--data-dir", help="dataset root (default $CONSOLIDATE_DATA_DIR or ./data)")

    run = _Parser(add_help=False)
    run.add_argument("--net", choices=sorted(NET_SEQUENCES), help="dense: permuted MNIST; conv: rotated MNIST/Fashion")
    run.add_argument("--method", choices=["fisher", "mas", "si", "total_abs_signal"])
    run.add_argument("--penalty", choices=["none", "original", "stabilized"])
    run.add_argument("--lambda", dest="ewc_lambda", type=float)
    run.add_argument("--fisher-mode", choices=["label", "argmax", "sampled"])
    run.add_argument("--tasks", dest="n_tasks", type=int)
    run.add_argument("--epochs", type=int)
    run.add_argument("--n-train", type=int, help="use only the first N training samples per task")
    run.add_argument("--n-test", type=int)
    run.add_argument("--importance-samples", dest="n_importance_samples", type=int)
    run.add_argument("--clip-norm", type=float)

    p = sub.add_parser("fetch-data", parents=[common], help="download or validate IDX files")
    p.add_argument("--mirror", help="base URL holding <corpus>/<file>.gz; omit to validate local files")
    p.add_argument("--corpora", type=_words)

    p = sub.add_parser("train-seq", parents=[common, run], help="one sequential-training run")
    p.add_argument("--checkpoint", action="store_true", default=None, help="save per-task weights and importances")

    p = sub.add_parser("sweep", parents=[common, run], help="lambda grid search with confidence intervals")
    p.add_argument("--lambdas", type=_floats)
    p.add_argument("--runs", type=int)
    p.add_argument("--full", action="store_true", default=None, help="20 runs per lambda")

    p = sub.add_parser("prune", parents=[common, run], help="pruning degradation curves")
    p.add_argument("--criteria", type=_words)
    p.add_argument("--fractions", type=_floats)
    p.add_argument("--runs", type=int)
    p.add_argument("--per-layer", action="store_true", default=None)

    p = sub.add_parser("demo-explosion", parents=[common], help="single-weight SGD trajectory under both penalties")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--omega", type=float)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("report", parents=[common], help="render SVG plots from result CSVs")
    p.add_argument("inputs", nargs="*", default=None, help="sweep.csv / prune.csv files")
    return parser


def _coerce(field_name, text):
    default = RunConfig.__dataclass_fields__[field_name].default
    if text.lower() in ("none", "null"):
        return None
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0"):
            raise CommandLineError(f"{field_name} expects true/false, got {text!r}")
        return text.lower() in ("true", "1")
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.split(","))
    if field_name in ("n_tasks", "n_importance_samples", "n_train", "n_test", "epochs", "batch_size", "seed"):
        return int(text)
    if field_name in ("clip_norm",) or isinstance(default, float):
        return float(text)
    return text


def resolve_config(args):
    """Merge defaults, ``--config``, explicit flags and ``--set`` (in that order)."""
    command = args.command
    options = json.loads(json.dumps(COMMAND_OPTIONS[command]))
    run = RunConfig().to_dict()
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CommandLineError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(loaded) - {"command", "run", "options"}
        if unknown:
            raise CommandLineError(f"unknown top-level config keys: {sorted(unknown)}")
        bad = set(loaded.get("options", {})) - set(options)
        if bad:
            raise CommandLineError(f"unknown options for {command}: {sorted(bad)}")
        options.update(loaded.get("options", {}))
        bad = set(loaded.get("run", {})) - set(run)
        if bad:
            raise CommandLineError(f"unknown run settings: {sorted(bad)}")
        run.update(loaded.get("run", {}))

    ns = vars(args)
    for key in options:
        if ns.get(key) is not None:
            options[key] = ns[key]
    if ns.get("net"):
        run["task_sequence"] = NET_SEQUENCES[ns["net"]]
    for key in ("method", "penalty", "ewc_lambda", "fisher_mode", "n_tasks", "epochs", "n_train",
                "n_test", "n_importance_samples", "clip_norm", "seed", "data_dir"):
        if ns.get(key) is not None:
            run[key] = ns[key]
    for item in args.set:
        if "=" not in item:
            raise CommandLineError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        if key not in run:
            raise CommandLineError(f"unknown run setting {key!r}")
        try:
            run[key] = _coerce(key, value)
        except ValueError:
            raise CommandLineError(f"bad value for {key}: {value!r}") from None
    try:
        cfg = RunConfig.from_dict(run)
    except (KeyError, TypeError) as exc:
        raise CommandLineError(str(exc)) from None
    if command == "sweep" and options.get("full"):
        options["runs"] = 20
    return cfg, options


def _echo(out_dir, command, cfg, options):
    write_json(out_dir / "config.json", {"command": command, "run": cfg.to_dict(), "options": options})


def _required_corpora(cfg, command):
    if command == "prune":
        return ["mnist"]
    seq = data.make_sequence(cfg.task_sequence, cfg.seed, cfg.n_tasks, cfg.first_identity)
    return sorted({t.source for t in seq})


def _check_data(cfg, command):
    missing = data.missing_files(cfg.data_dir, _required_corpora(cfg, command))
    if missing:
        listing = "\n  ".join(str(p) for p in missing)
        raise FileNotFoundError(
            f"missing dataset files:\n  {listing}\n"
            "place the MNIST/FashionMNIST IDX files there, set CONSOLIDATE_DATA_DIR, "
            "or run `consolidate fetch-data --mirror URL`"
        )


def cmd_fetch_data(cfg, options, out_dir, jobs):
    if options["mirror"]:
        data.fetch_data(options["mirror"], cfg.data_dir, options["corpora"])
    missing = data.missing_files(cfg.data_dir, options["corpora"])
    if missing:
        raise FileNotFoundError("missing dataset files:\n  " + "\n  ".join(map(str, missing)))
    for corpus in options["corpora"]:
        for split in data.IDX_FILES:
            n = data.validate_corpus(corpus, split, cfg.data_dir)
            print(f"{corpus:8s} {split:5s} {n:6d} samples OK")


def cmd_train_seq(cfg, options, out_dir, jobs):
    _check_data(cfg, "train-seq")
    ckpt = out_dir / "checkpoints" if options["checkpoint"] else None
    result = run_sequential(cfg, checkpoint_dir=ckpt, verbose=logger.isEnabledFor(logging.INFO))
    write_runs_csv(out_dir / "runs.csv", [(cfg.method, cfg.penalty, cfg.ewc_lambda, result)])
    write_json(out_dir / "result.json", result)
    if result.failed:
        print(f"run diverged: {result.error}")
        return
    for k, acc in enumerate(result.per_task_accuracy):
        print(f"task {k:2d}  accuracy {acc:.4f}")
    print(f"average accuracy {result.average_accuracy:.4f}")


def cmd_sweep(cfg, options, out_dir, jobs):
    _check_data(cfg, "sweep")
    sw = sweep_lambda(cfg, options["lambdas"], options["runs"], seed_base=cfg.seed, jobs=jobs)
    write_runs_csv(out_dir / "runs.csv", [(cfg.method, cfg.penalty, lam, r) for lam, r in sw.runs])
    write_sweep_csv(out_dir / "sweep.csv", [sw])
    write_json(out_dir / "results.json", {"points": sw.points, "best_lambda": sw.best_lambda,
                                          "wall_time": [r.wall_time for _, r in sw.runs]})
    render_plots(out_dir / "sweep.csv")
    for p in sw.points:
        print(f"lambda {p.ewc_lambda:<10g} mean {p.mean_accuracy:.4f} +/- {p.ci_halfwidth:.4f}"
              f"  ({p.n_runs - p.n_failed}/{p.n_runs} runs)")
    print(f"best lambda {sw.best_lambda}")


def cmd_prune(cfg, options, out_dir, jobs):
    _check_data(cfg, "prune")
    curves = run_pruning(cfg, options["criteria"], options["fractions"], options["runs"],
                         seed_base=cfg.seed, jobs=jobs, per_layer=options["per_layer"])
    write_prune_csv(out_dir / "prune.csv", curves)
    write_json(out_dir / "results.json", curves)
    render_plots(out_dir / "prune.csv")
    for c in curves:
        cells = "  ".join(f"{f:.2f}:{m:.4f}" for f, m, _ in c.points)
        print(f"{c.criterion:17s} {cells}")


def cmd_demo_explosion(cfg, options, out_dir, jobs):
    a, lam, om, n = options["alpha"], options["lambda"], options["omega"], options["steps"]
    orig = explosion_demo(a, lam, om, n, stabilized=False)
    stab = explosion_demo(a, lam, om, n, stabilized=True)
    print(f"alpha*lambda*omega = {a * lam * om:g}")
    rows = ["step,original,stabilized"]
    print(f"{'step':>4}  {'original':>14}  {'ratio':>8}  {'stabilized':>14}  {'ratio':>8}")
    for t in range(n + 1):
        o = orig.distances[t] if t < len(orig.distances) else float("nan")
        s = stab.distances[t] if t < len(stab.distances) else float("nan")
        ro = o / orig.distances[t - 1] if t and t < len(orig.distances) and orig.distances[t - 1] else float("nan")
        rs = s / stab.distances[t - 1] if t and t < len(stab.distances) and stab.distances[t - 1] else float("nan")
        print(f"{t:4d}  {o:14.6g}  {ro:8.4g}  {s:14.6g}  {rs:8.4g}")
        rows.append(f"{t},{o!r},{s!r}")
    if orig.diverged:
        print("original penalty: diverged (overflow)")
    (out_dir / "explosion.csv").write_text("\n".join(rows) + "\n")


def cmd_report(cfg, options, out_dir, jobs):
    inputs = options["inputs"]
    if not inputs:
        raise CommandLineError("report needs at least one CSV file")
    for path in inputs:
        print(render_plots(path, out_dir))


COMMANDS = {
    "fetch-data": cmd_fetch_data,
    "train-seq": cmd_train_seq,
    "sweep": cmd_sweep,
    "prune": cmd_prune,
    "demo-explosion": cmd_demo_explosion,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        cfg, options = resolve_config(args)
    except CommandLineError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = Path(args.output_dir or Path("results") / args.command)
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        _echo(out_dir, args.command, cfg, options)
        COMMANDS[args.command](cfg, options, out_dir, jobs)
    except CommandLineError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConsolidateError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
