"""Cross-validation, BL/CI decomposition and point-elasticity analysis."""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import io
from dataclasses import dataclass

import numpy as np

from .core import (
    FOLD_METRICS,
    POLICY_DIM,
    POLICY_NAMES,
    EvalReport,
    ParameterTable,
    StructuralError,
)
from .engine import masked_softmax_xent
from .features import TransformSpec, route_features, transform_values
from .models import (
    DCMKind,
    DCMSpec,
    DeepSpec,
    ModelKind,
    Schedule,
    build_model,
    evaluate,
    fit_dcm,
    path_size,
    train,
)
from .models.training import accuracy

N_FOLDS = 5
GRID_POINTS = 25
ATTRIBUTES = POLICY_NAMES
# Raw unit per attribute: seconds, cents, seconds, count.
_RAW_FIELDS = ("ivtt_seconds", "fare_cents", "walk_transfer_seconds", "num_transfers")


@dataclass(frozen=True)
class FoldPlan:
    folds: np.ndarray
    seed: int = 0

    @classmethod
    def make(cls, n_obs, seed=0, n_folds=N_FOLDS):
        """Random balanced assignment; fold sizes differ by at most one."""
        perm = np.random.default_rng(seed).permutation(n_obs)
        folds = np.empty(n_obs, dtype=np.int64)
        folds[perm] = np.arange(n_obs) % n_folds
        return cls(folds, seed)

    @property
    def n_folds(self):
        return int(self.folds.max()) + 1 if len(self.folds) else 0

    @property
    def sizes(self):
        return np.bincount(self.folds, minlength=self.n_folds)

    def validate(self, n_obs):
        if len(self.folds) != n_obs:
            raise StructuralError(f"fold plan covers {len(self.folds)} observations, data has {n_obs}")
        if np.any(self.folds < 0):
            raise StructuralError("negative fold id")
        if self.n_folds < 2 or np.any(self.sizes == 0):
            raise StructuralError("every fold needs at least one observation")

    def train_idx(self, fold):
        return np.flatnonzero(self.folds != fold)

    def valid_idx(self, fold):
        return np.flatnonzero(self.folds == fold)

    def to_dict(self):
        return {"seed": self.seed, "folds": self.folds.tolist()}


def bl_ci(acc_mnl, acc_constrained, acc_unconstrained):
    """Benefit of learning and cost of interpretability.

    ``BL + CI`` equals ``acc_unconstrained - acc_mnl`` up to float rounding
    of the two subtractions.
    """
    for a in (acc_mnl, acc_constrained, acc_unconstrained):
        if not 0.0 <= a <= 1.0:
            raise StructuralError("accuracies must lie in [0, 1]")
    return acc_constrained - acc_mnl, acc_unconstrained - acc_constrained


def model_id(spec):
    if isinstance(spec, DCMSpec):
        return spec.kind.value
    suffix = "" if spec.kind in (ModelKind.TFMU, ModelKind.TFMC) else f"-{spec.feature_dim}"
    return spec.kind.value + suffix


def view_for(spec, data):
    """The slice of ``data`` a model consumes (policy-only for 4-feature models)."""
    dim = POLICY_DIM if isinstance(spec, DCMSpec) else spec.feature_dim
    if data.feature_dim == dim:
        return data
    if dim == POLICY_DIM:
        return data.policy_only()
    raise StructuralError(f"model needs {dim} features, data has {data.feature_dim}")


def _dcm_inputs(data):
    ln_ps = data.meta.get("ln_path_size")
    return data.dense(), data.mask, data.chosen, ln_ps


def dcm_metrics(table, data):
    """Mean loss and accuracy of a DCM parameter table."""
    x, mask, chosen, ln_ps = _dcm_inputs(data)
    u = x[..., :POLICY_DIM] @ np.array([table[n] for n in POLICY_NAMES])
    if "Pathsize" in table.names:
        u = u + table["Pathsize"] * ln_ps
    losses, probs = masked_softmax_xent(u, mask, chosen)
    return float(losses.mean()), accuracy(probs, chosen)


def fit_dcm_data(spec, data):
    x, mask, chosen, ln_ps = _dcm_inputs(data)
    if spec.kind is DCMKind.PSL and ln_ps is None:
        raise StructuralError("data carries no path-size values; build it with path sizes for PSL")
    return fit_dcm(spec, x, mask, chosen, ln_ps if spec.kind is DCMKind.PSL else None)


def _aggregate_policy(tables):
    est = np.array([t.estimates for t in tables])
    frozen = tables[0].frozen
    se = est.std(axis=0) if len(tables) > 1 else None
    if se is not None:
        se = np.where(frozen, np.nan, se)
    return ParameterTable(tables[0].names, est.mean(axis=0), se, frozen=frozen)


def cross_validate(spec, data, plan, schedule=Schedule(), source_schedule=None, sources=None,
                   on_fold=None):
    """K-fold evaluation of one model configuration.

    Each fold trains on the other folds and reports loss and accuracy on
    both sides.  Constrained deep models need a CNN 1 per fold: pass them as
    ``sources[fold]`` (betas, model or checkpoint) or give
    ``source_schedule`` to train one on the fold's training part; otherwise
    the frozen source given in ``spec`` serves every fold.
    ``on_fold(fold, model)`` receives every fitted model.

    The parameter table holds fold means with the across-fold standard
    deviation in the error column (DCMs: full-data estimates and asymptotic
    errors).
    """
    data = view_for(spec, data)
    plan.validate(data.n_obs)
    per_fold, tables, n_params = [], [], None
    for fold in range(plan.n_folds):
        tr = data.subset(plan.train_idx(fold))
        va = data.subset(plan.valid_idx(fold))
        if isinstance(spec, DCMSpec):
            table, stats = fit_dcm_data(spec, tr)
            model = table
            n_params = stats.n_estimated
            tl, ta = dcm_metrics(table, tr)
            vl, vacc = dcm_metrics(table, va)
        else:
            fold_spec = spec
            if spec.kind.constrained:
                src = None if sources is None else sources[fold]
                if src is None and source_schedule is not None:
                    src = _train_cnn1(tr, va, source_schedule, spec.seed)
                elif src is None:
                    src = spec.frozen_policy_source
                fold_spec = dataclasses.replace(spec, frozen_policy_source=src)
            model = build_model(fold_spec)
            train(model, tr, va, schedule)
            n_params = model.parameter_count()
            tl, ta = evaluate(model, tr)
            vl, vacc = evaluate(model, va)
            table = model.policy_table()
        tables.append(table)
        per_fold.append({"train_loss": tl, "valid_loss": vl, "train_acc": ta, "valid_acc": vacc})
        if on_fold is not None:
            on_fold(fold, model)
    extras = {}
    if isinstance(spec, DCMSpec):
        table, stats = fit_dcm_data(spec, data)
        extras["fit"] = stats.to_dict()
    else:
        table = _aggregate_policy(tables)
    return EvalReport(model_id(spec), per_fold, table, n_params, extras)


def _train_cnn1(train_data, valid_data, schedule, seed=0):
    model = build_model(DeepSpec(ModelKind.CNN1, POLICY_DIM, seed=seed))
    train(model, train_data.policy_only(), valid_data.policy_only(), schedule)
    return model


def comparison_table(reports):
    """Plain-text table: model, parameter count, mean ± std of each fold metric."""
    head = f"{'Model':<10}{'Params':>10}" + "".join(f"{m:>22}" for m in FOLD_METRICS)
    lines = [head, "-" * len(head)]
    for r in reports:
        mean, std = r.mean, r.std
        cells = "".join(f"{mean[m]:>13.4f} ± {std[m]:<6.4f}" for m in FOLD_METRICS)
        lines.append(f"{r.model_id:<10}{r.n_parameters if r.n_parameters is not None else '-':>10}{cells}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- elasticity


@dataclass
class ElasticityCurve:
    attribute: str
    grid: np.ndarray
    mean_elasticity: np.ndarray
    std_band: np.ndarray
    model_id: str
    n_points: np.ndarray | None = None

    def __post_init__(self):
        if self.attribute not in ATTRIBUTES:
            raise StructuralError(f"unknown attribute {self.attribute}")
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if np.any(np.diff(self.grid) <= 0):
            raise StructuralError("elasticity grid must be strictly increasing")


def _raw_matrix(obs):
    return np.array([[getattr(r, f) for f in _RAW_FIELDS] for r in obs.alternatives], dtype=np.float64)


def _context_rows(obs, with_context, spec):
    if not with_context:
        return None
    return np.array([route_features(r, obs.card_type, spec, True)[POLICY_DIM:]
                     for r in obs.alternatives])


class ChoiceProbabilities:
    """Choice probabilities of one observation as a function of its raw attributes.

    ``model`` is a deep utility model or a DCM :class:`ParameterTable`.
    """

    def __init__(self, model, obs, with_context=None, spec=TransformSpec()):
        self.model, self.obs, self.spec = model, obs, spec
        if isinstance(model, ParameterTable):
            self.with_context = False
            self.ln_ps = path_size(obs.alternatives).ln_ps if "Pathsize" in model.names else None
        else:
            self.with_context = model.spec.feature_dim > POLICY_DIM if with_context is None else with_context
            model.eval()
        self.context = _context_rows(obs, self.with_context, spec)
        self.raw = _raw_matrix(obs)

    def __call__(self, raw):
        x = transform_values(raw[:, 0], raw[:, 1], raw[:, 2], raw[:, 3], self.spec)
        if isinstance(self.model, ParameterTable):
            u = x @ np.array([self.model[n] for n in POLICY_NAMES])
            if self.ln_ps is not None:
                u = u + self.model["Pathsize"] * self.ln_ps
        else:
            rows = x if self.context is None else np.concatenate([x, self.context], axis=1)
            with self.model.full_precision():
                u = self.model.row_utilities(rows)
        _, p = masked_softmax_xent(u, np.ones(len(u), dtype=bool), 0)
        return p


def point_elasticity(model, obs, attribute, x_value=None, alternative=None, spec=TransformSpec(),
                     probs=None):
    """Own point elasticity of ``alternative`` (default: the chosen one).

    Central finite difference on the raw attribute with step
    ``max(1e-4 * x, 1e-6)``, scaled by ``x / P``.  Returns NaN when the
    probability is below 1e-12.
    """
    k = ATTRIBUTES.index(attribute)
    i = obs.chosen if alternative is None else alternative
    probs = probs or ChoiceProbabilities(model, obs, spec=spec)
    raw = probs.raw.copy()
    if x_value is not None:
        raw[i, k] = x_value
    x = raw[i, k]
    p0 = probs(raw)[i]
    if p0 < 1e-12:
        return float("nan")
    h = float(_fd_step(x))
    up, down = raw.copy(), raw.copy()
    up[i, k] += h
    down[i, k] -= h
    dp = (probs(up)[i] - probs(down)[i]) / (2 * h)
    return float(dp * x / p0)


def non_fastest_sample(observations, n_od=1000, seed=0):
    """Indices of up to ``n_od`` observations, one per OD pair, whose choice was not the fastest."""
    by_od = {}
    for k, obs in enumerate(observations):
        fastest = int(np.argmin([r.journey_seconds for r in obs.alternatives]))
        if obs.chosen != fastest:
            by_od.setdefault(obs.od_pair, []).append(k)
    rng = np.random.default_rng(seed)
    keys = sorted(by_od)
    picks = [by_od[od][rng.integers(len(by_od[od]))] for od in keys]
    if len(picks) > n_od:
        picks = sorted(rng.choice(picks, size=n_od, replace=False).tolist())
    return picks


def _fd_step(x):
    return np.maximum(1e-4 * np.abs(x), 1e-6)


def _chosen_probabilities(model, sample, tables, spec):
    """Chosen-route probability under each raw attribute table.

    ``tables[j]`` has shape (M, A_j, 4) and perturbs observation
    ``sample[j]``; the result has shape (len(sample), M).
    """
    flat = np.concatenate([t.reshape(-1, len(_RAW_FIELDS)) for t in tables])
    x = transform_values(flat[:, 0], flat[:, 1], flat[:, 2], flat[:, 3], spec)
    if isinstance(model, ParameterTable):
        u = x @ np.array([model[n] for n in POLICY_NAMES])
        if "Pathsize" in model.names:
            ln_ps = np.concatenate([np.tile(path_size(o.alternatives).ln_ps, t.shape[0])
                                    for o, t in zip(sample, tables)])
            u = u + model["Pathsize"] * ln_ps
    else:
        if model.spec.feature_dim > POLICY_DIM:
            ctx = np.concatenate([np.tile(_context_rows(o, True, spec), (t.shape[0], 1))
                                  for o, t in zip(sample, tables)])
            x = np.concatenate([x, ctx], axis=1)
        u = model.row_utilities(x)
        model._prepared = []
    out, pos = [], 0
    for o, t in zip(sample, tables):
        m, a = t.shape[:2]
        uj = u[pos:pos + m * a].reshape(m, a)
        pos += m * a
        e = np.exp(uj - uj.max(axis=1, keepdims=True))
        out.append(e[:, o.chosen] / e.sum(axis=1))
    return np.array(out)


def chosen_elasticities(model, sample, attribute, grid, spec=TransformSpec(), batch=32):
    """Chosen-route point elasticities, shape (len(sample), len(grid)).

    Vectorised equivalent of :func:`point_elasticity` evaluated at every
    grid value for every observation.
    """
    k = ATTRIBUTES.index(attribute)
    grid = np.asarray(grid, dtype=np.float64)
    h = _fd_step(grid)
    probe = np.concatenate([grid, grid + h, grid - h])
    g = len(grid)
    if not isinstance(model, ParameterTable):
        model.eval()
    ctx = contextlib.nullcontext() if isinstance(model, ParameterTable) else model.full_precision()
    rows = []
    with ctx:
        for s in range(0, len(sample), batch):
            part = sample[s:s + batch]
            tables = []
            for o in part:
                t = np.repeat(_raw_matrix(o)[None], len(probe), axis=0)
                t[:, o.chosen, k] = probe
                tables.append(t)
            rows.append(_chosen_probabilities(model, part, tables, spec))
    p = np.concatenate(rows) if rows else np.zeros((0, 3 * g))
    p0, up, down = p[:, :g], p[:, g:2 * g], p[:, 2 * g:]
    with np.errstate(divide="ignore", invalid="ignore"):
        e = (up - down) / (2 * h) * grid / p0
    return np.where(p0 < 1e-12, np.nan, e)


def elasticity_study(models, observations, n_od=1000, seed=0, grid_points=GRID_POINTS,
                     spec=TransformSpec()):
    """Mean and spread of chosen-route elasticities over each attribute's observed range.

    ``models`` maps a model id to a deep model or DCM table.  Returns the
    curves and the number of sampled observations.
    """
    picks = non_fastest_sample(observations, n_od, seed)
    sample = [observations[k] for k in picks]
    curves = []
    if not sample:
        return curves, 0
    raw_all = np.concatenate([_raw_matrix(o) for o in sample])
    for name, model in models.items():
        for k, attr in enumerate(ATTRIBUTES):
            lo, hi = raw_all[:, k].min(), raw_all[:, k].max()
            if hi <= lo:
                hi = lo + 1.0
            grid = np.linspace(lo, hi, grid_points)
            values = chosen_elasticities(model, sample, attr, grid, spec)
            ok = np.isfinite(values)
            counts = ok.sum(axis=0)
            filled = np.where(ok, values, 0.0)
            mean = np.divide(filled.sum(axis=0), counts, out=np.full(grid_points, np.nan), where=counts > 0)
            var = np.divide((np.where(ok, values - mean, 0.0) ** 2).sum(axis=0), counts,
                            out=np.full(grid_points, np.nan), where=counts > 0)
            curves.append(ElasticityCurve(attr, grid, mean, np.sqrt(var), name, counts))
    return curves, len(sample)


def curves_to_csv(curves):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attribute", "x", "mean", "std", "model_id"])
    for c in curves:
        for x, m, s in zip(c.grid, c.mean_elasticity, c.std_band):
            w.writerow([c.attribute, repr(float(x)), repr(float(m)), repr(float(s)), c.model_id])
    return buf.getvalue()


def attach_path_size(data, observations):
    """Store ln path-size values in ``data.meta`` (needed by PSL)."""
    from .models import ln_path_size_matrix

    data.meta["ln_path_size"] = ln_path_size_matrix(observations, data.index.shape[1])
    return data
