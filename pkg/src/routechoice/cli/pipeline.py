"""Pipeline stages shared by the command-line subcommands.

Run directory layout::

    config.json                 configuration used for the run
    data/                       network.json + observations.jsonl
    reports/<model>.json        per-fold metrics and parameter table
    checkpoints/<model>/fold<k>.npz
    tables/<model>_parameters.csv
    comparison.txt  bl_ci.json  elasticity.csv  report.txt

Everything except ``data/`` and the checkpoints is a *report file*; the
``report`` stage rebuilds all of them from the reports and checkpoints.
"""
from __future__ import annotations

import contextlib
import csv
import json
import logging
from pathlib import Path

import numpy as np

from ..core import POLICY_NAMES, EvalReport
from ..datagen import generate_dataset, generate_network
from ..eval import (
    FoldPlan,
    _aggregate_policy,
    attach_path_size,
    bl_ci,
    comparison_table,
    cross_validate,
    curves_to_csv,
    elasticity_study,
)
from ..features import ChoiceData
from ..models import DCMKind, DCMSpec, DeepSpec, ModelKind, load_model, save_model
from .config import RunConfig
from .dataio import dataset_summary, read_dataset, write_dataset

log = logging.getLogger("routechoice")

CONFIG_FILE = "config.json"
REPORT_FILES = ("comparison.txt", "bl_ci.json", "elasticity.csv", "report.txt")


class StageError(Exception):
    """Wraps the failure of one named stage; ``cause`` keeps the original error."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage, self.cause = stage, cause


@contextlib.contextmanager
def stage(name):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    config = property(lambda self: self.root / CONFIG_FILE)
    data = property(lambda self: self.root / "data")

    def report(self, name):
        return self.root / "reports" / f"{name}.json"

    def checkpoint(self, name, fold):
        return self.root / "checkpoints" / name / f"fold{fold}.npz"

    def table(self, name):
        return self.root / "tables" / f"{name}_parameters.csv"

    def file(self, name):
        return self.root / name


def _dump(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


# --------------------------------------------------------------------- data


def generate(cfg, out_dir):
    """Simulate the configured network and observations into ``out_dir``."""
    net = generate_network(cfg.network, cfg.data.network_seed)
    obs = generate_dataset(net, cfg.truth, cfg.data.n_observations, cfg.data.n_od,
                           seed=cfg.data.seed, card_shares=cfg.data.card_shares)
    write_dataset(out_dir, net, obs)
    return out_dir


def load_observations(cfg, run, data_dir=None):
    """Observations from ``data_dir``, the run's data folder, or a fresh simulation.

    Generated data is written first and read back so every later stage sees
    exactly what is on disk.
    """
    if data_dir is None:
        data_dir = run.data
        if not (data_dir / "observations.jsonl").exists():
            with stage("gen-data"):
                generate(cfg, data_dir)
    _, obs = read_dataset(data_dir)
    return obs


def choice_data(cfg, observations):
    data = ChoiceData.from_observations(observations, cfg.transform, with_context=True)
    return attach_path_size(data, observations)


# ------------------------------------------------------------------- models


def fold_plan(cfg, n_obs):
    return FoldPlan.make(n_obs, cfg.fold_seed, cfg.n_folds)


def _spec(entry, cfg, source=None):
    if entry.is_dcm:
        return DCMSpec(DCMKind(entry.kind))
    return DeepSpec(ModelKind(entry.kind), entry.feature_dim, frozen_policy_source=source,
                    transformer=entry.transformer, seed=entry.seed)


def fold_models(run, name, n_folds):
    return [load_model(run.checkpoint(name, k))[0] for k in range(n_folds)]


def train_model(cfg, run, data, entry, plan):
    """Cross-validate one configured model and write its report and checkpoints."""
    with stage(f"train {entry.name}"):
        sources = None
        source = None
        if entry.constrained:
            sources = fold_models(run, entry.source, plan.n_folds)
            source = sources[0]

        def keep(fold, model):
            if not entry.is_dcm:
                path = run.checkpoint(entry.name, fold)
                path.parent.mkdir(parents=True, exist_ok=True)
                save_model(model, path, {"model": entry.name, "fold": fold})

        report = cross_validate(_spec(entry, cfg, source), data, plan, entry.schedule,
                                sources=sources, on_fold=keep)
        _dump(run.report(entry.name), report.to_dict())
        m = report.mean
        log.info("%s: valid acc %.4f, valid loss %.4f", entry.name, m["valid_acc"], m["valid_loss"])
        return report


def load_reports(cfg, run):
    out = {}
    for entry in cfg.models:
        path = run.report(entry.name)
        if path.exists():
            out[entry.name] = EvalReport.from_dict(json.loads(path.read_text()))
    return out


# --------------------------------------------------------------- elasticity


def elasticity_models(cfg, run):
    """DCMs use their full-data tables, deep models the fold-0 checkpoint."""
    reports = load_reports(cfg, run)
    models = {}
    for name in cfg.elasticity.models:
        entry = cfg.entry(name)
        if entry.is_dcm:
            if name not in reports:
                raise FileNotFoundError(f"no report for {name}; train it first")
            models[name] = reports[name].parameter_table
        else:
            models[name] = load_model(run.checkpoint(name, 0))[0]
    return models


def run_elasticity(cfg, run, observations):
    with stage("elasticity"):
        curves, n = elasticity_study(elasticity_models(cfg, run), observations, cfg.elasticity.n_od,
                                     cfg.elasticity.seed, cfg.elasticity.grid_points, cfg.transform)
        run.file("elasticity.csv").write_text(curves_to_csv(curves))
        log.info("elasticity: %d sampled observations", n)
        return curves


# ------------------------------------------------------------------ reports


def _deep_table(cfg, run, entry):
    return _aggregate_policy([m.policy_table() for m in fold_models(run, entry.name, cfg.n_folds)])


def bl_ci_rows(cfg, reports):
    rows = []
    for mnl, con, unc in cfg.bl_ci:
        if not all(n in reports for n in (mnl, con, unc)):
            continue
        a_m, a_c, a_u = (reports[n].mean["valid_acc"] for n in (mnl, con, unc))
        bl, ci = bl_ci(a_m, a_c, a_u)
        rows.append({"mnl": mnl, "constrained": con, "unconstrained": unc,
                     "acc_mnl": a_m, "acc_constrained": a_c, "acc_unconstrained": a_u,
                     "BL": bl, "CI": ci, "total": a_u - a_m,
                     "identity_residual": (bl + ci) - (a_u - a_m)})
    return rows


def _fmt(x, width=10, digits=4):
    return f"{'-':>{width}}" if x is None or not np.isfinite(x) else f"{x:>{width}.{digits}f}"


def _dcm_section(cfg, reports):
    dcms = [e.name for e in cfg.models if e.is_dcm and e.name in reports]
    if not dcms:
        return []
    names = []
    for n in dcms:
        names += [p for p in reports[n].parameter_table.names if p not in names]
    head = f"{'Parameter':<12}" + "".join(f"{n + ' est':>12}{'s.e.':>10}{'t':>10}" for n in dcms)
    lines = ["Discrete choice models (full-data estimates, fare fixed)", head, "-" * len(head)]
    for p in names:
        cells = ""
        for n in dcms:
            t = reports[n].parameter_table
            if p in t.names:
                est, se, tstat, _ = t.row(p)
                cells += f"{est:>12.4f}{_fmt(se)}{_fmt(tstat, 10, 2)}"
            else:
                cells += f"{'':>32}"
        lines.append(f"{p:<12}{cells}")
    for key, label in (("loglik", "Log-lik."), ("null_loglik", "Null log-lik"),
                       ("rho_bar_squared", "Adj. rho^2")):
        cells = "".join(f"{reports[n].extras.get('fit', {}).get(key, float('nan')):>12.4f}{'':>20}" for n in dcms)
        lines.append(f"{label:<12}{cells}".rstrip())
    return lines + [""]


def _deep_section(cfg, tables):
    if not tables:
        return []
    head = f"{'Model':<10}" + "".join(f"{p:>18}" for p in POLICY_NAMES)
    lines = ["Policy coefficients of deep models (fold mean ± std, * frozen)", head, "-" * len(head)]
    for name, t in tables.items():
        cells = ""
        for p in POLICY_NAMES:
            est, se, _, frozen = t.row(p)
            mark = "*" if frozen else " "
            spread = f"± {se:.4f}" if se is not None and np.isfinite(se) else "        "
            cells += f"{est:>9.4f}{mark}{spread:>8}"
        lines.append(f"{name:<10}{cells}")
    return lines + [""]


def _elasticity_section(run):
    path = run.file("elasticity.csv")
    if not path.exists():
        return []
    acc = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            v = float(row["mean"])
            if np.isfinite(v):
                acc.setdefault((row["model_id"], row["attribute"]), []).append(v)
    models = list(dict.fromkeys(m for m, _ in acc))
    head = f"{'Model':<10}" + "".join(f"{a:>10}" for a in POLICY_NAMES)
    lines = ["Chosen-route point elasticity, averaged over the attribute grid", head, "-" * len(head)]
    for m in models:
        lines.append(f"{m:<10}" + "".join(_fmt(float(np.mean(acc[(m, a)])) if (m, a) in acc else None)
                                          for a in POLICY_NAMES))
    return lines + [""]


def render_reports(cfg, run):
    """(Re)write every report file from reports/*.json, checkpoints and elasticity.csv."""
    with stage("report"):
        reports = load_reports(cfg, run)
        deep_tables = {}
        for entry in cfg.models:
            if entry.name not in reports:
                continue
            if entry.is_dcm:
                table = reports[entry.name].parameter_table
            else:
                table = _deep_table(cfg, run, entry)
                deep_tables[entry.name] = table
            path = run.table(entry.name)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(table.to_csv())
        ordered = [reports[e.name] for e in cfg.models if e.name in reports]
        run.file("comparison.txt").write_text(comparison_table(ordered))
        rows = bl_ci_rows(cfg, reports)
        _dump(run.file("bl_ci.json"), rows)

        lines = ["Route choice run report", "=" * 23, ""]
        data_dir = run.data
        if (data_dir / "observations.jsonl").exists():
            _, obs = read_dataset(data_dir)
            s = dataset_summary(obs)
            lines += [f"Observations {s['n_observations']}, OD pairs {s['n_od_pairs']}, "
                      f"mean choice-set size {s['mean_choice_set_size']:.2f}", ""]
        lines += [f"{cfg.n_folds}-fold cross-validation, fold seed {cfg.fold_seed}", ""]
        lines += _dcm_section(cfg, reports)
        lines += _deep_section(cfg, deep_tables)
        lines += ["Fold performance (mean ± std)", comparison_table(ordered)]
        if rows:
            lines.append("Benefit of learning (BL) and cost of interpretability (CI), validation accuracy")
            for r in rows:
                lines.append(f"  {r['mnl']} -> {r['constrained']} -> {r['unconstrained']}: "
                             f"BL {r['BL'] * 100:+.2f} pts, CI {r['CI'] * 100:+.2f} pts, "
                             f"total {r['total'] * 100:+.2f} pts")
            lines.append("")
        lines += _elasticity_section(run)
        run.file("report.txt").write_text("\n".join(lines).rstrip() + "\n")
        return reports


# ----------------------------------------------------------------- pipeline


def run_pipeline(cfg, data_dir=None, output_dir=None):
    """Data, every configured model in order, elasticity, report files."""
    run = RunDir(output_dir or cfg.output_dir)
    run.root.mkdir(parents=True, exist_ok=True)
    run.config.write_text(cfg.to_json())
    obs = load_observations(cfg, run, data_dir)
    data = choice_data(cfg, obs)
    plan = fold_plan(cfg, data.n_obs)
    for entry in cfg.models:
        train_model(cfg, run, data, entry, plan)
    if cfg.elasticity.models:
        run_elasticity(cfg, run, obs)
    return render_reports(cfg, run)


def load_run_config(run):
    if not run.config.exists():
        return None
    return RunConfig.from_json(run.config.read_text())
