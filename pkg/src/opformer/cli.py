"""``opformer`` command-line entry point.

Subcommands::

    opformer gen izhikevich|lif|riemann --out DATA [--config FILE] [--key value ...]
    opformer train --data DATA --out MODEL [--config FILE] [--key value ...]
    opformer eval --ckpt MODEL --data DATA [--out FILE.csv]
    opformer predict --ckpt MODEL --data DATA --out PRED [--split test] [--samples 4]
    opformer plot --report PRED --out fig.svg

Configuration files are JSON objects whose keys are the fields of the
matching configuration dataclass.  Every key also exists as a flag
(``n_train`` becomes ``--n-train``) and flags win over the file.  Each
command writes ``effective_config.json`` next to its outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 missing input,
4 format/version mismatch, 5 corrupt container, 6 architecture mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .container import ContainerError, VersionError, read_container, write_container
from .datasets import (IzhikevichDataConfig, LIFDataConfig, RiemannDataConfig, gen_izhikevich_dataset,
                       gen_lif_dataset, gen_riemann_dataset, load_dataset, save_dataset)
from .train import (ArchitectureError, ConfigError, EnsembleReport, TrainConfig, evaluate_ensemble,
                    evaluate_per_field, load_checkpoint, predict, save_checkpoint, summarize, train_ensemble,
                    train_per_field, write_report)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_VERSION = 4
EXIT_CORRUPT = 5
EXIT_ARCH = 6

PREDICTION_FORMAT = "opformer-predictions"
PREDICTION_VERSION = 1
CONFIG_ECHO = "effective_config.json"

GEN_CONFIGS = {
    "izhikevich": IzhikevichDataConfig,
    "lif": LIFDataConfig,
    "riemann": RiemannDataConfig,
}


class UsageError(Exception):
    """Bad command line or configuration file contents."""


# ---------------------------------------------------------------------------
# dataclass <-> argparse bridge
# ---------------------------------------------------------------------------

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _field_kind(f: dataclasses.Field) -> tuple[type, bool]:
    """(scalar type, is_sequence) for a config field, from its string annotation."""
    ann = str(f.type).replace("typing.", "")
    seq = ann.startswith("tuple")
    for name, typ in (("bool", bool), ("int", int), ("float", float), ("str", str)):
        if (f"[{name}" in ann) if seq else ann.split("|")[0].strip() == name:
            return typ, seq
    return str, seq


def add_config_flags(parser: argparse.ArgumentParser, cls) -> None:
    group = parser.add_argument_group(f"{cls.__name__} keys (override --config)")
    for f in dataclasses.fields(cls):
        typ, seq = _field_kind(f)
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        help_text = f"default: {default!r}"
        if typ is bool:
            group.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction,
                               default=None, help=help_text)
        else:
            group.add_argument(_flag(f.name), dest=f.name, type=typ, nargs="+" if seq else None,
                               default=None, metavar=f.name.upper(), help=help_text)


def build_config(cls, args: argparse.Namespace, fixed: dict | None = None):
    """Merge defaults, ``--config`` file, then explicit flags into ``cls``."""
    names = {f.name for f in dataclasses.fields(cls)}
    values: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        unknown = set(loaded) - names
        if unknown:
            raise UsageError(f"unknown keys in {path}: {sorted(unknown)}")
        values.update(loaded)
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    values.update(fixed or {})
    for f in dataclasses.fields(cls):
        if isinstance(values.get(f.name), list):
            values[f.name] = tuple(values[f.name])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def echo_config(out: Path, command: str, config, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    body = {"command": command, "version": __version__,
            "config": dataclasses.asdict(config) if dataclasses.is_dataclass(config) else config}
    body.update(extra or {})
    (out / CONFIG_ECHO).write_text(json.dumps(body, indent=2, sort_keys=True, default=list) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cls = GEN_CONFIGS[args.problem]
    cfg = build_config(cls, args)
    t0 = time.perf_counter()
    if args.problem == "izhikevich":
        ds = gen_izhikevich_dataset(cfg)
    elif args.problem == "lif":
        ds = gen_lif_dataset(cfg.case, cfg)
        cfg = cfg.resolved()
    else:
        if cfg.case not in ("ipr", "hpr"):
            raise UsageError(f"--case must be 'ipr' or 'hpr', got {cfg.case!r}")
        ds = gen_riemann_dataset(cfg.case, cfg)
    out = Path(args.out)
    save_dataset(out, ds)
    echo_config(out, f"gen {args.problem}", cfg)
    print(f"{ds.problem}: {ds.count('train')} train / {ds.count('test')} test samples "
          f"written to {out} ({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def _member_dirs(path: Path) -> list[Path]:
    if (path / "checkpoint.json").is_file():
        return [path]
    members = sorted(p for p in path.glob("member_*") if (p / "checkpoint.json").is_file())
    if not members:
        raise FileNotFoundError(f"no checkpoint found in {path}")
    return members


def _field_dirs(path: Path) -> dict[str, Path]:
    return {p.name[len("field_"):]: p for p in sorted(path.glob("field_*")) if p.is_dir()}


def _save_members(out: Path, results, label: str = "") -> None:
    for k, (ckpt, report) in enumerate(results):
        member = out / f"member_{k}"
        save_checkpoint(member, ckpt)
        write_report(member / "report.json", report)
        flag = "" if report.converged else f" (diverged at step {report.diverged_at})"
        print(f"{label}member {k} seed {report.seed}: test loss {report.test_loss:.4e} "
              f"in {report.wall_time:.0f}s{flag}")


def cmd_train(args) -> int:
    cfg = build_config(TrainConfig, args)
    data = Path(args.data)
    ds = load_dataset(data)
    out = Path(args.out)
    echo_config(out, "train", cfg, {"data": str(data)})
    if cfg.per_field:
        groups = train_per_field(ds, cfg)
        for name, results in groups.items():
            _save_members(out / f"field_{name}", results, label=f"{name} ")
        size = cfg.ensemble
        errors = [[groups[n][k][1].test_errors[0] for n in ds.field_names] for k in range(size)]
        converged = [all(groups[n][k][1].converged for n in ds.field_names) for k in range(size)]
    else:
        results = train_ensemble(ds, cfg)
        _save_members(out, results)
        errors = [r.test_errors for _, r in results]
        converged = [r.converged for _, r in results]
    summary = summarize(ds.field_names, errors, converged, percent=ds.problem.startswith("riemann"))
    write_report(out / "summary.json", summary)
    summary.write_csv(out / "summary.csv")
    _print_summary(summary)
    return EXIT_OK


def _print_summary(summary: EnsembleReport) -> None:
    for row in summary.rows():
        print(f"{row['field']}: {row['mean']:.4g} +/- {row['std']:.4g} {row['unit']} "
              f"({row['members']} converged, {row['excluded']} excluded)")


def cmd_eval(args) -> int:
    ckpt_path = Path(args.ckpt)
    ds = load_dataset(args.data)
    per_field = _field_dirs(ckpt_path)
    if per_field:
        groups = {name: [load_checkpoint(p) for p in _member_dirs(d)] for name, d in per_field.items()}
        summary = evaluate_per_field(groups, ds)
    else:
        summary = evaluate_ensemble([load_checkpoint(p) for p in _member_dirs(ckpt_path)], ds)
    out = Path(args.out) if args.out else Path(args.ckpt) / "eval.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    summary.write_csv(out)
    write_report(out.with_suffix(".json"), summary)
    echo_config(out.parent, "eval", {"ckpt": str(args.ckpt), "data": str(args.data), "out": str(out)})
    _print_summary(summary)
    return EXIT_OK


def _predict_with(ckpt, ds, split, idx) -> np.ndarray:
    if ckpt.config.input_channels != ds.input_channels or ckpt.config.output_channels != ds.output_channels:
        raise ArchitectureError("checkpoint channels do not match the dataset")
    return predict(ckpt.model(), ckpt.normalizer, ds, split, idx=idx)


def cmd_predict(args) -> int:
    ckpt_path = Path(args.ckpt)
    ds = load_dataset(args.data)
    n = ds.count(args.split)
    if n == 0:
        raise UsageError(f"split {args.split!r} is empty")
    idx = np.linspace(0, n - 1, min(args.samples, n)).round().astype(int)
    per_field = _field_dirs(ckpt_path)
    if per_field:
        pred = np.concatenate([_predict_with(load_checkpoint(_member_dirs(per_field[name])[0]),
                                             ds.select_fields([name]), args.split, idx)
                               for name in ds.field_names], axis=-1)
    else:
        pred = _predict_with(load_checkpoint(_member_dirs(ckpt_path)[0]), ds, args.split, idx)
    arrays = {"pred": pred, "truth": ds.get(args.split, "targets")[idx],
              "queries": ds.get(args.split, "queries")[idx], "params": ds.get(args.split, "params")[idx]}
    meta = {"problem": ds.problem, "field_names": ds.field_names, "param_names": ds.param_names,
            "split": args.split, "indices": idx.tolist()}
    out = Path(args.out)
    write_container(out, PREDICTION_FORMAT, PREDICTION_VERSION, arrays, meta)
    echo_config(out, "predict", {"ckpt": str(args.ckpt), "data": str(args.data),
                                 "split": args.split, "samples": args.samples})
    print(f"wrote {len(idx)} {args.split} predictions to {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    manifest, arrays = read_container(args.report, PREDICTION_FORMAT, PREDICTION_VERSION)
    fields = manifest["field_names"]
    pred, truth, x, params = arrays["pred"], arrays["truth"], arrays["queries"], arrays["params"]
    fig, axes = plt.subplots(1, len(fields), figsize=(4.2 * len(fields), 3.4), squeeze=False)
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for j, name in enumerate(fields):
        ax = axes[0, j]
        for i in range(pred.shape[0]):
            c = colors[i % len(colors)]
            label = f"{manifest['param_names'][0]}={params[i, 0]:.3g}" if j == 0 else None
            ax.plot(x[i], truth[i, :, j], color=c, lw=1.6, label=label)
            ax.plot(x[i], pred[i, :, j], color=c, lw=1.0, ls="--")
        ax.set_title(name)
        ax.set_xlabel("x" if manifest["problem"].startswith("riemann") else "t")
    axes[0, 0].legend(fontsize=7, title="solid: exact, dashed: model", title_fontsize=7)
    fig.suptitle(f"{manifest['problem']} ({manifest['split']} split)")
    fig.tight_layout()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg")
    plt.close(fig)
    echo_config(out.parent, "plot", {"report": str(args.report), "out": str(out)})
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="opformer", description="Operator transformer experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    gen = sub.add_parser("gen", help="generate a dataset")
    gen_sub = gen.add_subparsers(dest="problem", parser_class=_Parser, required=True)
    for name, cls in GEN_CONFIGS.items():
        p = gen_sub.add_parser(name, help=f"{name} dataset")
        p.add_argument("--out", required=True, help="output dataset directory")
        p.add_argument("--config", help="JSON file with configuration keys")
        add_config_flags(p, cls)
        p.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train one model or an ensemble")
    tr.add_argument("--data", required=True, help="dataset directory")
    tr.add_argument("--out", required=True, help="output directory for checkpoints and reports")
    tr.add_argument("--config", help="JSON file with training keys")
    add_config_flags(tr, TrainConfig)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="per-field relative l2 error of a checkpoint or ensemble")
    ev.add_argument("--ckpt", required=True, help="checkpoint directory or ensemble directory")
    ev.add_argument("--data", required=True, help="dataset directory")
    ev.add_argument("--out", help="CSV path (default: <ckpt>/eval.csv)")
    ev.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="store predictions for a few samples")
    pr.add_argument("--ckpt", required=True, help="checkpoint (first member of an ensemble is used)")
    pr.add_argument("--data", required=True, help="dataset directory")
    pr.add_argument("--out", required=True, help="output prediction directory")
    pr.add_argument("--split", default="test", choices=["train", "test"])
    pr.add_argument("--samples", type=int, default=4, help="number of evenly spaced samples")
    pr.set_defaults(func=cmd_predict)

    pl = sub.add_parser("plot", help="SVG of predicted vs exact profiles")
    pl.add_argument("--report", required=True, help="prediction directory written by 'predict'")
    pl.add_argument("--out", required=True, help="SVG file")
    pl.set_defaults(func=cmd_plot)
    return parser


def run(argv: list[str] | None = None) -> int:
    """Execute one command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        code, msg = EXIT_USAGE, str(exc)
    except ConfigError as exc:
        code, msg = EXIT_USAGE, f"invalid configuration: {exc}"
    except FileNotFoundError as exc:
        code, msg = EXIT_MISSING, f"missing input: {exc}"
    except VersionError as exc:
        code, msg = EXIT_VERSION, f"format mismatch: {exc}"
    except ContainerError as exc:
        code, msg = EXIT_CORRUPT, f"corrupt container: {exc}"
    except ArchitectureError as exc:
        code, msg = EXIT_ARCH, f"architecture mismatch: {exc}"
    except Exception as exc:  # noqa: BLE001 - top-level guard, one-line diagnostic
        code, msg = EXIT_FAILURE, f"{type(exc).__name__}: {exc}"
    print(f"opformer: error: {msg}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
