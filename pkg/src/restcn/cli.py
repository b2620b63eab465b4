"""Command-line entry point: train / eval / explain / gradcheck / synth.

Every command is deterministic given --seed and never mutates input data
files. Exit codes: 0 ok, 1 check failure, 2 config error, 3 data error,
4 checkpoint error, 5 interpretability refusal.

Options may come from a flat `key = value` config file (--config); explicit
command-line flags override file values, and the fully resolved
configuration is persisted as `config.resolved` inside the run directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as data_mod
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DomainError,
    InterpretabilityError,
    RestcnError,
)
from .gradcheck import DEFAULT_TOL, run_all
from .interpret import explain, render_report
from .model import build_model, capacity_config, interpretable_config, load_checkpoint
from .train import TrainConfig, evaluate, train


def read_config_file(path) -> dict[str, str]:
    """Flat `key = value` lines; blank lines and # comments ignored."""
    values: dict[str, str] = {}
    for raw in Path(path).read_text("utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line (expected key = value): {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, text: str, like) -> object:
    if isinstance(like, bool):
        low = text.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"config key {key}: expected a boolean, got {text!r}")
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {text!r}") from None
    return text


def resolve_config(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags (flags parsed with default None)."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_values = read_config_file(args.config)
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key, text in file_values.items():
            resolved[key] = _coerce(key, text, defaults[key])
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def write_resolved_config(resolved: dict, path) -> None:
    lines = [f"{k} = {resolved[k]}" for k in sorted(resolved)]
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")


TRAIN_DEFAULTS = {
    "run_dir": "",
    "seed": 0,
    "synth": False,
    "data": "",
    "split": "cs",
    "train_ids": "",
    "classes": 4,
    "per_class": 50,
    "test_per_class": 20,
    "profile": "interpretable",
    "filters": 64,
    "filter_length": 8,
    "units": 8,
    "dropout": 0.5,
    "l1": 1e-4,
    "lr": 0.01,
    "momentum": 0.9,
    "batch_size": 128,
    "patience": 10,
    "epochs": 300,
    "timing": False,
}


def _load_sets(resolved: dict):
    if resolved["synth"]:
        return data_mod.synth_train_test(
            int(resolved["classes"]), int(resolved["per_class"]),
            int(resolved["test_per_class"]), int(resolved["seed"]),
        )
    if not resolved["data"]:
        raise ConfigError("either --synth or --data <directory> is required")
    directory = Path(resolved["data"])
    if not directory.is_dir():
        raise ConfigError(f"data directory not found: {directory}")
    dataset = data_mod.load_dataset(directory)
    if resolved["train_ids"]:
        spec = data_mod.SplitSpec(resolved["split"], data_mod.load_id_file(resolved["train_ids"]))
    else:
        spec = data_mod.canonical_split(resolved["split"])
    return data_mod.make_split(dataset, spec)


def _model_config(resolved: dict):
    if resolved["profile"] == "capacity":
        return capacity_config(int(resolved["classes"]), dropout_rate=float(resolved["dropout"]),
                               l1_weight=float(resolved["l1"]))
    if resolved["profile"] != "interpretable":
        raise ConfigError(f"unknown profile {resolved['profile']!r}")
    return interpretable_config(
        int(resolved["classes"]),
        num_filters=int(resolved["filters"]),
        filter_length=int(resolved["filter_length"]),
        num_units=int(resolved["units"]),
        dropout_rate=float(resolved["dropout"]),
        l1_weight=float(resolved["l1"]),
    )


def cmd_train(args: argparse.Namespace) -> int:
    resolved = resolve_config(args, TRAIN_DEFAULTS)
    if not resolved["run_dir"]:
        raise ConfigError("--run-dir is required")
    train_set, test_set = _load_sets(resolved)
    labels = {s.label for s in train_set} | {s.label for s in test_set}
    if resolved["data"]:
        resolved["classes"] = max(labels) + 1
    if min(labels, default=0) < 0 or max(labels, default=0) >= int(resolved["classes"]):
        raise DataError(f"labels {sorted(labels)} do not fit {resolved['classes']} classes")

    model = build_model(_model_config(resolved), int(resolved["seed"]))
    config = TrainConfig(
        lr0=float(resolved["lr"]),
        momentum=float(resolved["momentum"]),
        l1_weight=float(resolved["l1"]),
        batch_size=int(resolved["batch_size"]),
        plateau_patience=int(resolved["patience"]),
        max_epochs=int(resolved["epochs"]),
        seed=int(resolved["seed"]),
        timing=bool(resolved["timing"]),
    )

    run_dir = Path(resolved["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "reports").mkdir(exist_ok=True)
    write_resolved_config(resolved, run_dir / "config.resolved")
    _, history = train(model, train_set, test_set, config, run_dir=run_dir)
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: train_acc {last.train_acc:.4f} test_acc {last.test_acc:.4f}")
    print(f"run artifacts in {run_dir}")
    return 0


EVAL_DEFAULTS = {
    "checkpoint": "",
    "seed": 0,
    "synth": False,
    "data": "",
    "split": "cs",
    "train_ids": "",
    "classes": 4,
    "per_class": 50,
    "test_per_class": 20,
    "out": "",
}


def cmd_eval(args: argparse.Namespace) -> int:
    resolved = resolve_config(args, EVAL_DEFAULTS)
    if not resolved["checkpoint"]:
        raise ConfigError("--checkpoint is required")
    model = load_checkpoint(resolved["checkpoint"])
    _, test_set = _load_sets(resolved)
    result = evaluate(model, test_set)
    print(f"accuracy {result.accuracy:.4f}")
    print(f"mean_loss {result.mean_loss!r}")
    out = Path(resolved["out"]) if resolved["out"] else Path(resolved["checkpoint"]).with_name("confusion.csv")
    k = result.confusion.shape[0]
    rows = ["true\\pred," + ",".join(str(c) for c in range(k))]
    for r in range(k):
        rows.append(f"{r}," + ",".join(str(v) for v in result.confusion[r]))
    out.write_text("\n".join(rows) + "\n", "utf-8")
    print(f"confusion matrix written to {out}")
    return 0


def cmd_explain(args: argparse.Namespace) -> int:
    if not 0.0 < args.percentile < 100.0:
        raise ConfigError(f"--percentile must be in (0, 100), got {args.percentile}")
    model = load_checkpoint(args.checkpoint)
    sequence = data_mod.parse_skeleton_file(args.input)
    report = explain(
        model, sequence,
        layer=args.layer, percentile=args.percentile,
        num_filters=args.top, top_m=args.top_m, depth=args.depth,
        force=args.force,
    )
    out = Path(args.out) if args.out else Path(args.input).with_suffix(".report.json")
    svg = out.with_suffix(".svg") if args.svg else None
    render_report(report, out, svg)
    print(f"predicted class {report.predicted_class} "
          f"(p={report.predicted_probability:.4f}) for {sequence.source or args.input}")
    for rf in report.filters:
        top = max(rf.joint_energies.items(), key=lambda kv: kv[1]) if rf.joint_energies else None
        where = (f"actor {top[0][0]} joint {top[0][1] + 1} ({top[1]:.2f})" if top else "n/a")
        print(f"  layer {rf.layer} filter {rf.filter_id}: peak frame {rf.peak_frame}, "
              f"max magnitude {rf.max_magnitude:.4f}, dominant joint {where}")
    print(f"report written to {out}")
    if svg is not None:
        print(f"timelines written to {svg}")
    return 0


def cmd_gradcheck(args: argparse.Namespace, perturb=None) -> int:
    results = run_all(seed=args.seed, perturb=perturb)
    failures = []
    for res in results:
        status = "ok" if res.ok(DEFAULT_TOL) else "FAIL"
        print(f"{res.name:45s} max_rel_error {res.max_rel_error:.3e}  {status}")
        if not res.ok(DEFAULT_TOL):
            failures.append(res)
    worst = max(res.max_rel_error for res in results)
    print(f"worst relative error {worst:.3e} (tolerance {DEFAULT_TOL:.0e})")
    if failures:
        print(f"{len(failures)} gradient check(s) failed: "
              + ", ".join(res.name for res in failures))
        return 1
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    dataset = data_mod.synth_generate(args.classes, args.per_class, args.seed)
    data_mod.save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} sequences ({args.classes} classes) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="restcn",
        description="Interpretable temporal-convolutional action recognition on 3D skeletons",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_flags(p, with_test_counts=True):
        p.add_argument("--synth", action="store_const", const=True, default=None,
                       help="use the built-in synthetic motif dataset")
        p.add_argument("--data", help="directory of .skeleton files")
        p.add_argument("--split", choices=["cs", "cv"], default=None,
                       help="cross-subject or cross-view split for --data")
        p.add_argument("--train-ids", dest="train_ids",
                       help="id file overriding the canonical train-side ids")
        p.add_argument("--classes", type=int, default=None)
        p.add_argument("--per-class", dest="per_class", type=int, default=None,
                       help="synthetic training sequences per class")
        if with_test_counts:
            p.add_argument("--test-per-class", dest="test_per_class", type=int, default=None,
                           help="synthetic test sequences per class")

    p_train = sub.add_parser("train", help="train a model and write a run directory")
    p_train.add_argument("--run-dir", dest="run_dir", help="output directory for run artifacts")
    p_train.add_argument("--config", help="flat key = value config file")
    add_data_flags(p_train)
    p_train.add_argument("--profile", choices=["interpretable", "capacity"], default=None)
    p_train.add_argument("--filters", type=int, default=None)
    p_train.add_argument("--filter-length", dest="filter_length", type=int, default=None)
    p_train.add_argument("--units", type=int, default=None)
    p_train.add_argument("--dropout", type=float, default=None)
    p_train.add_argument("--l1", type=float, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--momentum", type=float, default=None)
    p_train.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p_train.add_argument("--patience", type=int, default=None)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--timing", action="store_const", const=True, default=None,
                         help="record real epoch wall time (breaks byte-level run determinism)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", help="path to a .rtcn checkpoint")
    p_eval.add_argument("--config", help="flat key = value config file")
    add_data_flags(p_eval)
    p_eval.add_argument("--out", help="confusion matrix CSV path")
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_explain = sub.add_parser("explain", help="write an explanation report for one sequence")
    p_explain.add_argument("--checkpoint", required=True)
    p_explain.add_argument("--input", required=True, help="a .skeleton sequence file")
    p_explain.add_argument("--layer", type=int, default=None,
                           help="layer to inspect (default: the one feeding the final merge)")
    p_explain.add_argument("--percentile", type=float, default=80.0)
    p_explain.add_argument("--top", type=int, default=3, help="filters to report")
    p_explain.add_argument("--top-m", dest="top_m", type=int, default=3,
                           help="trace branching factor")
    p_explain.add_argument("--depth", type=int, default=None)
    p_explain.add_argument("--svg", action="store_true")
    p_explain.add_argument("--force", action="store_true",
                           help="explain a capacity-profile model anyway")
    p_explain.add_argument("--out", help="report JSON path")
    p_explain.set_defaults(func=cmd_explain)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_synth = sub.add_parser("synth", help="write a synthetic dataset as .skeleton files")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--classes", type=int, default=4)
    p_synth.add_argument("--per-class", dest="per_class", type=int, default=50)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 4
    except InterpretabilityError as exc:
        print(f"interpretability refused: {exc}", file=sys.stderr)
        return 5
    except RestcnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
