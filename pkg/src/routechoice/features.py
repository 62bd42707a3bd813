"""Log transforms of raw route attributes and quadratic feature expansion."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import (
    LANDUSE_DIM,
    MAX_ALTERNATIVES,
    POLICY_DIM,
    POLICY_NAMES,
    CardType,
    FeatureMatrix,
    StructuralError,
    pad_and_mask,
)

MAX_EXPANDED_COLUMNS = 20_000


@dataclass(frozen=True)
class TransformSpec:
    ivtt_floor_minutes: float = 2.0
    fare_floor_dollars: float = 0.92
    walk_offset_seconds: float = 1.0
    transfers_offset: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if not v > 0:
                raise StructuralError(f"{k} must be strictly positive")


class Expansion(enum.Enum):
    NONE = "none"
    JOINT = "joint"
    SEPARATED = "separated"


@dataclass(frozen=True)
class ExpansionSpec:
    mode: Expansion = Expansion.NONE
    policy_dim: int = POLICY_DIM


def transform_values(ivtt_seconds, fare_cents, walk_seconds, num_transfers, spec=TransformSpec()):
    """Vectorised log transform of raw attributes (any broadcastable shapes)."""
    ivtt = np.log(np.maximum(np.asarray(ivtt_seconds, dtype=np.float64) / 60.0, spec.ivtt_floor_minutes))
    fare = np.log(np.maximum(np.asarray(fare_cents, dtype=np.float64) / 100.0, spec.fare_floor_dollars))
    walk = np.log((np.asarray(walk_seconds, dtype=np.float64) + spec.walk_offset_seconds) / 60.0)
    transfers = np.log(np.asarray(num_transfers, dtype=np.float64) + spec.transfers_offset)
    return np.stack(np.broadcast_arrays(ivtt, fare, walk, transfers), axis=-1)


def transform_route(route, spec=TransformSpec()):
    """Return ``[ln IVTT(min), ln Fare($), ln WT(min), ln(NoT+1)]`` with floors applied."""
    return transform_values(
        route.ivtt_seconds, route.fare_cents, route.walk_transfer_seconds, route.num_transfers, spec
    )


def context_columns():
    cards = [f"card_{c.value}" for c in CardType]
    lu = [f"{p}_lu{k:02d}" for p in ("orig", "dest", "xfer") for k in range(LANDUSE_DIM)]
    return cards + lu


def base_columns(with_context):
    return list(POLICY_NAMES) + (context_columns() if with_context else [])


def route_features(route, card_type, spec=TransformSpec(), with_context=True):
    policy = transform_route(route, spec)
    if not with_context:
        return policy
    card = np.zeros(len(CardType))
    card[card_type.index] = 1.0
    return np.concatenate(
        [policy, card, route.origin_landuse, route.dest_landuse, route.transfer_landuse]
    )


def assemble_features(obs, spec=TransformSpec(), with_context=False, max_alternatives=MAX_ALTERNATIVES):
    """Build the padded feature matrix of one observation (4 or 97 columns)."""
    rows = np.array([route_features(r, obs.card_type, spec, with_context) for r in obs.alternatives])
    return pad_and_mask(obs, rows, max_alternatives, columns=base_columns(with_context))


def quadratic_pairs(d):
    """Upper-triangular index pairs ``(i, j)``, ``i <= j``, in row-major order."""
    return np.triu_indices(d)


def expand_joint(x, names=None):
    """Append all pairwise products (squares included) to the last axis of ``x``."""
    d = x.shape[-1]
    i, j = quadratic_pairs(d)
    out = np.concatenate([x, x[..., i] * x[..., j]], axis=-1)
    if names is None:
        return out
    return out, list(names) + [f"{names[a]}×{names[b]}" for a, b in zip(i, j)]


def expanded_width(d):
    return d + d * (d + 1) // 2


def expand_array(x, mode, policy_dim=POLICY_DIM, names=None):
    """Expand the last axis of ``x``; returns ``(values, names, new_policy_dim)``."""
    mode = Expansion(mode)
    d = x.shape[-1]
    if names is None:
        names = [f"x{k}" for k in range(d)]
    if mode is Expansion.NONE:
        return x, list(names), policy_dim
    if mode is Expansion.JOINT:
        width = expanded_width(d)
    else:
        width = expanded_width(policy_dim) + expanded_width(d - policy_dim)
    if width > MAX_EXPANDED_COLUMNS:
        raise StructuralError(f"expansion to {width} columns exceeds budget of {MAX_EXPANDED_COLUMNS}")
    if mode is Expansion.JOINT:
        values, cols = expand_joint(x, names)
        return values, cols, expanded_width(policy_dim) if d == policy_dim else policy_dim
    pv, pn = expand_joint(x[..., :policy_dim], names[:policy_dim])
    ov, on = expand_joint(x[..., policy_dim:], names[policy_dim:])
    return np.concatenate([pv, ov], axis=-1), pn + on, expanded_width(policy_dim)


def expand(fm, spec):
    """Quadratic expansion of a :class:`FeatureMatrix`; padded rows stay zero."""
    if fm.policy_dim != POLICY_DIM or (fm.columns and len(fm.columns) != fm.feature_dim):
        raise StructuralError("expand expects an unexpanded feature matrix")
    names = list(fm.columns) or None
    values, cols, pdim = expand_array(fm.values, spec.mode, spec.policy_dim, names)
    values = np.where(fm.mask[:, None], values, 0.0)
    return FeatureMatrix(values, fm.mask.copy(), fm.chosen, pdim, tuple(cols))


def column_sources(names):
    """Map each column name to the set of base inputs it is built from."""
    return [frozenset(n.split("×")) for n in names]


class ChoiceData:
    """A batch of observations stored as unique alternative rows plus an index.

    ``index[n, a]`` points into ``rows`` for real alternatives and is ``-1``
    for padding.  Repeated (OD, card type) contexts share rows, which keeps
    the quadratic expansion and the transformer path affordable.
    """

    def __init__(self, rows, index, chosen, columns, policy_dim=POLICY_DIM, meta=None,
                 weights=None):
        self.weights = None if weights is None else np.asarray(weights, dtype=np.float64)
        self._compressed = None
        self.rows = np.ascontiguousarray(rows, dtype=np.float64)
        self.index = np.asarray(index, dtype=np.int64)
        self.chosen = np.asarray(chosen, dtype=np.int64)
        self.columns = list(columns)
        self.policy_dim = policy_dim
        self.meta = meta or {}
        if self.index.shape[0] != self.chosen.shape[0]:
            raise StructuralError("index and chosen disagree on the number of observations")
        if np.any(self.index[np.arange(len(self.chosen)), self.chosen] < 0):
            raise StructuralError("chosen alternative is padding")

    @classmethod
    def from_observations(cls, observations, spec=TransformSpec(), with_context=False,
                         max_alternatives=MAX_ALTERNATIVES):
        n = len(observations)
        width = POLICY_DIM + (3 + 3 * LANDUSE_DIM if with_context else 0)
        lookup = {}
        rows = []
        index = np.full((n, max_alternatives), -1, dtype=np.int64)
        chosen = np.empty(n, dtype=np.int64)
        ivtt = np.full((n, max_alternatives), np.nan)
        journey = np.full((n, max_alternatives), np.nan)
        for k, obs in enumerate(observations):
            if len(obs.alternatives) > max_alternatives:
                raise StructuralError(
                    f"OD {obs.od_pair}: {len(obs.alternatives)} alternatives exceed {max_alternatives}"
                )
            chosen[k] = obs.chosen
            for a, r in enumerate(obs.alternatives):
                key = (id(r), obs.card_type) if with_context else id(r)
                pos = lookup.get(key)
                if pos is None:
                    pos = len(rows)
                    lookup[key] = pos
                    rows.append(route_features(r, obs.card_type, spec, with_context))
                index[k, a] = pos
                ivtt[k, a] = r.ivtt_seconds
                journey[k, a] = r.journey_seconds
        used = int((index >= 0).sum(axis=1).max()) if n else 1
        index, ivtt, journey = index[:, :used], ivtt[:, :used], journey[:, :used]
        rows = np.array(rows).reshape(-1, width)
        # Identical routes held by distinct objects collapse here.
        uniq, inv = np.unique(rows, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        index = np.where(index >= 0, inv[np.maximum(index, 0)], -1)
        return cls(uniq, index, chosen, base_columns(with_context),
                   meta={"journey_seconds": journey, "ivtt_seconds": ivtt})

    @classmethod
    def from_feature_matrices(cls, fms):
        values = np.stack([fm.values for fm in fms])
        mask = np.stack([fm.mask for fm in fms])
        flat = values[mask]
        uniq, inv = np.unique(flat, axis=0, return_inverse=True)
        index = np.full(mask.shape, -1, dtype=np.int64)
        index[mask] = inv.reshape(-1)
        return cls(uniq, index, [fm.chosen for fm in fms], fms[0].columns or
                   [f"x{k}" for k in range(values.shape[2])], fms[0].policy_dim)

    @property
    def total_weight(self):
        return float(self.n_obs if self.weights is None else self.weights.sum())

    def compressed(self):
        """Merge observations with identical alternatives and choice into weighted groups.

        Likelihoods and accuracies computed on the result equal those of the
        original data (weights are observation counts).
        """
        if self.weights is not None:
            return self
        if self._compressed is None:
            key = np.concatenate([self.index, self.chosen[:, None]], axis=1)
            uniq, first, counts = np.unique(key, axis=0, return_index=True, return_counts=True)
            order = np.argsort(first, kind="stable")
            self._compressed = ChoiceData(self.rows, uniq[order, :-1], uniq[order, -1],
                                          self.columns, self.policy_dim,
                                          {k: v[first[order]] for k, v in self.meta.items()},
                                          weights=counts[order])
        return self._compressed

    @property
    def mask(self):
        return self.index >= 0

    @property
    def n_obs(self):
        return len(self.chosen)

    @property
    def feature_dim(self):
        return self.rows.shape[1]

    def __len__(self):
        return self.n_obs

    def dense(self):
        """Padded ``(N, A, d)`` array with zero rows where masked."""
        out = self.rows[np.maximum(self.index, 0)]
        out[~self.mask] = 0.0
        return out

    def feature_matrices(self):
        dense = self.dense()
        return [FeatureMatrix(dense[n], self.mask[n], int(self.chosen[n]), self.policy_dim,
                              tuple(self.columns)) for n in range(self.n_obs)]

    def subset(self, obs_idx):
        """Observations ``obs_idx`` with the row table compacted to rows they use."""
        obs_idx = np.asarray(obs_idx)
        index = self.index[obs_idx]
        used = np.unique(index[index >= 0])
        remap = np.full(len(self.rows), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        new_index = np.where(index >= 0, remap[np.maximum(index, 0)], -1)
        meta = {k: v[obs_idx] for k, v in self.meta.items()}
        weights = None if self.weights is None else self.weights[obs_idx]
        return ChoiceData(self.rows[used], new_index, self.chosen[obs_idx], self.columns,
                          self.policy_dim, meta, weights)

    def with_rows(self, rows, columns=None, policy_dim=None):
        return ChoiceData(rows, self.index, self.chosen,
                          self.columns if columns is None else columns,
                          self.policy_dim if policy_dim is None else policy_dim, self.meta,
                          self.weights)

    def policy_only(self):
        """Keep only the leading policy columns (4-feature models)."""
        rows = self.rows[:, :POLICY_DIM]
        uniq, inv = np.unique(rows, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        index = np.where(self.index >= 0, inv[np.maximum(self.index, 0)], -1)
        return ChoiceData(uniq, index, self.chosen, self.columns[:POLICY_DIM], POLICY_DIM, self.meta,
                          self.weights)

    def expanded(self, mode):
        values, cols, pdim = expand_array(self.rows, mode, self.policy_dim, self.columns)
        return self.with_rows(values, cols, pdim)
