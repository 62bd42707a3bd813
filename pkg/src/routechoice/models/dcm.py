"""Multinomial and path-size logit estimation by maximum likelihood.

The fare coefficient is fixed at -1 so the remaining coefficients are in
willingness-to-pay units.  Estimation uses damped Newton steps on an
analytic gradient with a finite-difference Hessian; standard errors come
from the inverse of that Hessian at the optimum.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from ..core import POLICY_NAMES, NumericalError, ParameterTable, StructuralError
from ..engine import masked_softmax_xent

log = logging.getLogger(__name__)

FARE_INDEX = POLICY_NAMES.index("Fare")


class DCMKind(enum.Enum):
    MNL = "MNL"
    PSL = "PSL"


@dataclass(frozen=True)
class DCMSpec:
    kind: DCMKind = DCMKind.MNL
    fare_coefficient_fixed: float = -1.0
    max_iter: int = 100
    gtol: float = 1e-6


@dataclass(frozen=True)
class PathSizeCache:
    ps: np.ndarray
    ln_ps: np.ndarray


def path_size(choice_set):
    """Path-size factor of each route given the links its competitors share.

    ``PS_r = sum_{l in r} (c_l / c_r) / (number of routes in the set using l)``.
    """
    counts = {}
    for r in choice_set:
        for link in set(r.links):
            counts[link] = counts.get(link, 0) + 1
    ps = np.empty(len(choice_set))
    for k, r in enumerate(choice_set):
        total = float(sum(r.link_costs))
        if not total > 0:
            raise StructuralError(f"route {k} has non-positive total cost")
        ps[k] = sum(c / total / counts[l] for l, c in zip(r.links, r.link_costs))
    return PathSizeCache(ps, np.log(ps))


def ln_path_size_matrix(observations, max_alternatives):
    """``(N, A)`` array of ln PS per alternative, zero in padded slots."""
    out = np.zeros((len(observations), max_alternatives))
    cache = {}
    for n, obs in enumerate(observations):
        key = tuple(id(r) for r in obs.alternatives)
        ln_ps = cache.get(key)
        if ln_ps is None:
            ln_ps = cache[key] = path_size(obs.alternatives).ln_ps
        out[n, :len(ln_ps)] = ln_ps
    return out


@dataclass
class FitStats:
    loglik: float
    null_loglik: float
    n_estimated: int
    n_obs: int
    n_iter: int
    grad_norm: float

    @property
    def rho_bar_squared(self):
        return rho_bar_squared(self.loglik, self.null_loglik, self.n_estimated)

    def to_dict(self):
        d = dict(vars(self))
        d["rho_bar_squared"] = self.rho_bar_squared
        return d


def rho_bar_squared(loglik, null_loglik, n_params):
    """McFadden's adjusted rho-squared ``1 - (LL - K) / LL(0)``."""
    return 1.0 - (loglik - n_params) / null_loglik


class LogitProblem:
    """Log-likelihood of a logit with the fare coefficient held fixed.

    ``x`` is the dense ``(N, A, 4)`` policy design, ``mask`` marks real
    alternatives and ``ln_ps`` (optional) adds the path-size column.
    """

    def __init__(self, x, mask, chosen, ln_ps=None, fare=-1.0):
        width = int(np.flatnonzero(mask.any(axis=0)).max()) + 1
        x = np.asarray(x, dtype=np.float64)[:, :width, :4]
        self.mask = np.asarray(mask, dtype=bool)[:, :width]
        self.chosen = np.asarray(chosen)
        self.offset = fare * x[..., FARE_INDEX]
        free = [k for k in range(4) if k != FARE_INDEX]
        self.names = [POLICY_NAMES[k] for k in free]
        cols = [x[..., k] for k in free]
        if ln_ps is not None:
            cols.append(np.asarray(ln_ps, dtype=np.float64)[:, :width])
            self.names.append("Pathsize")
        self.design = np.stack(cols, axis=-1)
        self.design[~self.mask] = 0.0
        self.fare = fare

    @property
    def n_params(self):
        return self.design.shape[-1]

    def utilities(self, theta):
        return self.offset + self.design @ theta

    def loglik(self, theta):
        losses, _ = masked_softmax_xent(self.utilities(theta), self.mask, self.chosen)
        return -float(np.sum(losses))

    def gradient(self, theta):
        _, probs = masked_softmax_xent(self.utilities(theta), self.mask, self.chosen)
        rows = np.arange(len(self.chosen))
        chosen_x = self.design[rows, self.chosen]
        expected = np.einsum("na,nak->k", probs, self.design)
        return chosen_x.sum(axis=0) - expected

    def hessian(self, theta, h=1e-5):
        """Central-difference Hessian of the log-likelihood from the analytic gradient."""
        k = self.n_params
        out = np.empty((k, k))
        for j in range(k):
            e = np.zeros(k)
            e[j] = h
            out[:, j] = (self.gradient(theta + e) - self.gradient(theta - e)) / (2 * h)
        return 0.5 * (out + out.T)

    def null_loglik(self):
        return -float(np.log(self.mask.sum(axis=1)).sum())


def _newton(problem, theta, max_iter, gtol):
    ll = problem.loglik(theta)
    g = problem.gradient(theta)
    for it in range(1, max_iter + 1):
        if np.linalg.norm(g) < gtol:
            return theta, it - 1, g
        hess = problem.hessian(theta)
        try:
            np.linalg.cholesky(-hess)
            direction = np.linalg.solve(-hess, g)
        except np.linalg.LinAlgError:
            direction = None
        if direction is None:
            res = optimize.minimize(lambda t: -problem.loglik(t), theta,
                                    jac=lambda t: -problem.gradient(t), method="BFGS",
                                    options={"gtol": gtol, "maxiter": 200})
            theta = res.x
            ll, g = problem.loglik(theta), problem.gradient(theta)
            continue
        step = 1.0
        while step > 1e-10:
            cand = theta + step * direction
            cand_ll = problem.loglik(cand)
            if cand_ll >= ll - 1e-12 * abs(ll):
                break
            step *= 0.5
        theta, ll = cand, cand_ll
        g = problem.gradient(theta)
    if np.linalg.norm(g) < gtol:
        return theta, max_iter, g
    raise NumericalError(
        f"logit estimation did not converge in {max_iter} iterations "
        f"(gradient norm {np.linalg.norm(g):.3g})",
        theta=theta, grad_norm=float(np.linalg.norm(g)),
    )


def _standard_errors(hess):
    # A parameter with an all-zero Hessian row (e.g. a constant path-size
    # column) is not identified: report NaN for it and invert the rest.
    scale = np.abs(np.diag(hess))
    keep = scale > 1e-12 * max(scale.max(), 1.0)
    se = np.full(len(hess), np.nan)
    try:
        cov = np.linalg.inv(-hess[np.ix_(keep, keep)])
    except np.linalg.LinAlgError as exc:
        raise NumericalError("information matrix is singular", hessian=hess) from exc
    var = np.diag(cov)
    if np.any(var <= 0):
        log.warning("Hessian is not negative definite at the optimum; some standard errors are undefined")
    se[keep] = np.sqrt(np.where(var > 0, var, np.nan))
    return se


def fit_dcm(spec, x, mask, chosen, ln_ps=None):
    """Estimate an MNL (or PSL when ``ln_ps`` is given) by maximum likelihood.

    Parameters
    ----------
    spec : DCMSpec
    x : ndarray (N, A, >=4)
        Dense design; only the four leading policy columns are used.
    mask : ndarray (N, A) of bool
    chosen : ndarray (N,)
    ln_ps : ndarray (N, A), optional
        Log path-size values; required for ``DCMKind.PSL``.

    Returns
    -------
    (ParameterTable, FitStats)
    """
    if spec.kind is DCMKind.PSL and ln_ps is None:
        raise StructuralError("PSL estimation needs path-size values")
    problem = LogitProblem(x, mask, chosen, ln_ps if spec.kind is DCMKind.PSL else None,
                           spec.fare_coefficient_fixed)
    theta, n_iter, g = _newton(problem, np.zeros(problem.n_params), spec.max_iter, spec.gtol)
    se = _standard_errors(problem.hessian(theta))
    names, est, ses, frozen = [], [], [], []
    free = iter(zip(problem.names, theta, se))
    for k, pname in enumerate(POLICY_NAMES):
        if k == FARE_INDEX:
            names.append(pname)
            est.append(spec.fare_coefficient_fixed)
            ses.append(np.nan)
            frozen.append(True)
        else:
            n, t, s = next(free)
            names.append(n)
            est.append(t)
            ses.append(s)
            frozen.append(False)
    for n, t, s in free:
        names.append(n)
        est.append(t)
        ses.append(s)
        frozen.append(False)
    table = ParameterTable(names, est, np.array(ses), frozen=frozen)
    stats = FitStats(problem.loglik(theta), problem.null_loglik(), problem.n_params,
                     len(problem.chosen), n_iter, float(np.linalg.norm(g)))
    return table, stats


def dcm_loglik(table, x, mask, chosen, ln_ps=None):
    """Log-likelihood of a fitted table on (possibly new) data."""
    beta = np.array([table[n] for n in POLICY_NAMES])
    width = x.shape[1]
    u = np.asarray(x[..., :4]) @ beta
    if "Pathsize" in table.names:
        u = u + table["Pathsize"] * np.asarray(ln_ps)[:, :width]
    losses, probs = masked_softmax_xent(u, mask, chosen)
    return -float(losses.sum()), probs
