"""``routechoice`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..core import NumericalError, StructuralError
from ..models import DCMKind, DCMSpec
from ..eval import comparison_table, fit_dcm_data
from .config import PRESETS, ConfigError, RunConfig, preset
from .dataio import DataError, dataset_summary, read_dataset
from .pipeline import (
    RunDir,
    StageError,
    choice_data,
    fold_plan,
    generate,
    load_observations,
    load_reports,
    load_run_config,
    render_reports,
    run_elasticity,
    run_pipeline,
    stage,
    train_model,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("routechoice")


def _config(args, run=None):
    """--config FILE, else --preset NAME, else the run directory's config.json."""
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read {args.config}: {e}") from e
        cfg = RunConfig.from_json(text)
    elif getattr(args, "preset", None):
        cfg = preset(args.preset)
    else:
        cfg = load_run_config(run) if run is not None else None
        if cfg is None:
            raise ConfigError("give --config or --preset (or a run directory holding config.json)")
    out = getattr(args, "out", None)
    if out:
        cfg.output_dir = str(out)
    return cfg


def _run(args, cfg):
    run = RunDir(cfg.output_dir)
    run.root.mkdir(parents=True, exist_ok=True)
    if not run.config.exists() or getattr(args, "config", None) or getattr(args, "preset", None):
        run.config.write_text(cfg.to_json())
    return run


def cmd_config(args):
    sys.stdout.write(_config(args).to_json())


def cmd_gen_data(args):
    cfg = _config(args)
    if args.seed is not None:
        cfg.data.seed = args.seed
    if args.n_observations is not None:
        if args.n_observations < 1:
            raise ConfigError("--n-observations must be positive")
        cfg.data.n_observations = args.n_observations
    out = Path(args.out or Path(cfg.output_dir) / "data")
    with stage("gen-data"):
        generate(cfg, out)
    _, obs = read_dataset(out)
    print(json.dumps(dataset_summary(obs), sort_keys=True))


def cmd_fit_dcm(args):
    _, obs = read_dataset(args.data)
    data = choice_data(RunConfig(), obs)
    with stage(f"fit-dcm {args.kind}"):
        table, stats = fit_dcm_data(DCMSpec(DCMKind(args.kind)), data)
    text = table.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(json.dumps(stats.to_dict(), sort_keys=True))


def _run_from(args):
    run = RunDir(args.out) if getattr(args, "out", None) else None
    cfg = _config(args, run)
    return cfg, _run(args, cfg)


def cmd_train(args):
    cfg, run = _run_from(args)
    names = args.model or [e.name for e in cfg.models]
    obs = load_observations(cfg, run, args.data)
    data = choice_data(cfg, obs)
    plan = fold_plan(cfg, data.n_obs)
    for name in names:
        train_model(cfg, run, data, cfg.entry(name), plan)


def cmd_evaluate(args):
    cfg, run = _run_from(args)
    reports = load_reports(cfg, run)
    if not reports:
        raise DataError(f"no model reports under {run.root}")
    sys.stdout.write(comparison_table([reports[e.name] for e in cfg.models if e.name in reports]))


def cmd_elasticity(args):
    cfg, run = _run_from(args)
    obs = load_observations(cfg, run, args.data)
    run_elasticity(cfg, run, obs)
    print(run.file("elasticity.csv"))


def cmd_report(args):
    cfg, run = _run_from(args)
    render_reports(cfg, run)
    sys.stdout.write(run.file("report.txt").read_text())


def cmd_pipeline(args):
    cfg = _config(args)
    run_pipeline(cfg, args.data, cfg.output_dir)
    sys.stdout.write(RunDir(cfg.output_dir).file("report.txt").read_text())


def build_parser():
    p = argparse.ArgumentParser(prog="routechoice", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", action="store_true", help="log stage progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, out_help="run directory (overrides output_dir)"):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--config", help="JSON run configuration")
        g.add_argument("--preset", choices=PRESETS, help="named configuration")
        sp.add_argument("--out", help=out_help)
        return sp

    sp = with_config(sub.add_parser("config", help="print a configuration as JSON"))
    sp.set_defaults(func=cmd_config)
    sp = with_config(sub.add_parser("gen-data", help="simulate a network and observations"),
                     "data directory (default <output_dir>/data)")
    sp.add_argument("--seed", type=int, help="data seed (overrides the configuration)")
    sp.add_argument("--n-observations", type=int, help="number of observations")
    sp.set_defaults(func=cmd_gen_data)
    sp = sub.add_parser("fit-dcm", help="estimate an MNL or PSL on a dataset")
    sp.add_argument("--data", required=True, help="data directory")
    sp.add_argument("--kind", choices=[k.value for k in DCMKind], default="MNL")
    sp.add_argument("--out", help="write the parameter table CSV here")
    sp.set_defaults(func=cmd_fit_dcm)
    sp = with_config(sub.add_parser("train", help="cross-validate configured models"))
    sp.add_argument("--data", help="data directory (default: the run's data, generated if missing)")
    sp.add_argument("--model", action="append", help="model name (repeatable; default all)")
    sp.set_defaults(func=cmd_train)
    sp = with_config(sub.add_parser("evaluate", help="print the fold comparison table"))
    sp.set_defaults(func=cmd_evaluate)
    sp = with_config(sub.add_parser("elasticity", help="point-elasticity curves"))
    sp.add_argument("--data", help="data directory")
    sp.set_defaults(func=cmd_elasticity)
    sp = with_config(sub.add_parser("report", help="rebuild report files from reports and checkpoints"))
    sp.set_defaults(func=cmd_report)
    sp = with_config(sub.add_parser("pipeline", help="run every stage"))
    sp.add_argument("--data", help="use this data directory instead of simulating")
    sp.set_defaults(func=cmd_pipeline)
    return p


def exit_code(exc):
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (DataError, StructuralError, FileNotFoundError, KeyError)):
        return EXIT_DATA
    if isinstance(exc, (FloatingPointError, ArithmeticError)):
        return EXIT_NUMERICAL
    return EXIT_DATA


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (ConfigError, DataError, NumericalError, StructuralError, StageError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code(e)
    return EXIT_OK


__all__ = ["main", "build_parser", "exit_code", "EXIT_OK", "EXIT_CONFIG", "EXIT_DATA", "EXIT_NUMERICAL"]
