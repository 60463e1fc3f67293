"""Command-line entry point: ``condistfl {gen-data,train,eval,ablation}``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import METHODS, ConfigError, ExperimentConfig, load_config, reference_doc

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("condistfl")


class UsageError(Exception):
    """Bad paths or flags; reported with exit code 1."""


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} exists and is not empty; pass --force to overwrite")
    if path.exists() and force:
        import shutil

        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _need(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command} needs {' and '.join(missing)}")


def _load_data(path):
    from .synth_data import read_data

    if not Path(path).is_dir():
        raise UsageError(f"data directory {path} does not exist")
    return read_data(path)


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #
def cmd_gen_data(args) -> int:
    from .synth_data import generate, write_data

    cfg = _config(args)
    _need(args, "out")
    out = _prepare_out(Path(args.out), args.force)
    write_data(generate(cfg.data), out)
    log.info("wrote datasets to %s", out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .federation import run_experiment

    cfg = _config(args)
    _need(args, "data", "out")
    data = _load_data(args.data)
    out = _prepare_out(Path(args.out), args.force)
    (out / "config.toml").write_text(cfg.render())
    res = run_experiment(cfg, data, out, workers=args.workers)
    log.info("finished %d rounds; best validation round %d", cfg.federation.rounds, res.best_round)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate, write_reports_csv, write_reports_json
    from .seg_model import load_checkpoint
    from .synth_data import dataset_path, load_dataset

    cfg = _config(args)
    _need(args, "checkpoint", "data", "out")
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint {ckpt_path} does not exist")
    ckpt = load_checkpoint(ckpt_path)
    union = args.union or cfg.eval.union_mode
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for name in cfg.eval.datasets:
        client = None if name == "external" else name.split("_", 1)[1]
        path = dataset_path(args.data, client, "test")
        if not path.exists():
            raise UsageError(f"dataset {path} does not exist")
        ds = load_dataset(path)
        ds.name = name
        classes = None
        if client is not None:
            from .synth_data import client_classes

            classes = client_classes(client)
        reports.append(evaluate(ckpt, ds, classes, union, cfg.model, run_id=ckpt_path.parent.name))
    write_reports_csv(reports, out / "dice.csv")
    write_reports_json(reports, out / "dice.json")
    for r in reports:
        print(f"{r.dataset}: average Dice {r.average:.4f}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    from .evaluation import ablation_local_steps, summarize_ablation, write_ablation_tsv

    cfg = _config(args)
    _need(args, "data", "out")
    budget = cfg.federation.total_steps
    steps = args.steps or [cfg.federation.local_steps]
    settings = []
    for s in steps:
        if s < 1 or budget % s:
            raise UsageError(f"local steps {s} does not divide the budget of {budget} steps")
        settings.append((s, budget // s))
    methods = args.methods or ["fedavg", "condistfl"]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise UsageError(f"unknown methods {unknown}; choose from {sorted(METHODS)}")
    data = _load_data(args.data)
    out = _prepare_out(Path(args.out), args.force)
    rows = ablation_local_steps(cfg, data, settings, methods, args.seeds, out, args.workers)
    write_ablation_tsv(rows, out / "ablation.tsv")
    summary = summarize_ablation(rows)
    (out / "ablation.json").write_text(json.dumps(
        [{"method": m, "local_steps": s, "median_average_dice": v} for (m, s), v in summary.items()], indent=2
    ) + "\n")
    for (m, s), v in summary.items():
        print(f"{m}\tS={s}\t{v:.4f}")
    return EXIT_OK


def cmd_config(args) -> int:
    print(reference_doc(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment TOML (defaults apply when omitted)")
    common.add_argument("--data", type=Path, help="dataset directory written by gen-data")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--workers", type=int, help="client worker threads (default: number of clients)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="condistfl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate synthetic client datasets").set_defaults(
        func=cmd_gen_data)
    sub.add_parser("train", parents=[common], help="run one federated experiment").set_defaults(func=cmd_train)
    e = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    e.add_argument("--checkpoint", type=Path, help="CDFL checkpoint file")
    e.add_argument("--union", action="store_true", help="merge tumors into their organs before scoring")
    e.set_defaults(func=cmd_eval)
    a = sub.add_parser("ablation", parents=[common], help="local-steps ablation at a fixed budget")
    a.add_argument("--steps", type=int, nargs="+", help="local steps per round to compare")
    a.add_argument("--methods", nargs="+", help=f"methods among {sorted(METHODS)}")
    a.add_argument("--seeds", type=int, nargs="+", default=[0], help="run seeds")
    a.set_defaults(func=cmd_ablation)
    sub.add_parser("config", parents=[common], help="print the default config").set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime abort: report and exit non-zero
        print(f"aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
