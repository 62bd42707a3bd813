"""Domain types shared by the data, feature, model and evaluation layers."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

MAX_ALTERNATIVES = 30
MAX_PER_CATEGORY = 5
POLICY_DIM = 4
LANDUSE_DIM = 30
POLICY_NAMES = ("IVTT", "Fare", "WT", "NoT")


class StructuralError(ValueError):
    """Raised when inputs violate a shape or structural precondition."""


class NumericalError(RuntimeError):
    """Raised when an optimizer diverges or fails to converge."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class Category(enum.Enum):
    BUS = "Bus"
    BUS_BUS = "BusBus"
    RAIL = "Rail"
    BUS_RAIL = "BusRail"
    RAIL_BUS = "RailBus"
    BUS_RAIL_BUS = "BusRailBus"

    @property
    def legs(self):
        return {
            Category.BUS: ("bus",),
            Category.BUS_BUS: ("bus", "bus"),
            Category.RAIL: ("rail",),
            Category.BUS_RAIL: ("bus", "rail"),
            Category.RAIL_BUS: ("rail", "bus"),
            Category.BUS_RAIL_BUS: ("bus", "rail", "bus"),
        }[self]

    @property
    def transfers(self):
        return len(self.legs) - 1


class CardType(enum.Enum):
    STUDENT = "Student"
    ADULT = "Adult"
    SENIOR = "Senior"

    @property
    def index(self):
        return list(CardType).index(self)


def _as_landuse(v):
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (LANDUSE_DIM,):
        raise StructuralError(f"land-use vector must have {LANDUSE_DIM} entries, got {arr.shape}")
    if np.any(arr < 0) or np.any(arr > 1) or arr.sum() > 1.0 + 1e-9:
        raise StructuralError("land-use fractions must lie in [0, 1] and sum to at most 1")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Route:
    """One alternative with raw (untransformed) attributes.

    Durations are integer seconds and fares integer cents; conversion to
    model units happens in :mod:`routechoice.features`.
    """

    ivtt_seconds: int
    fare_cents: int
    walk_transfer_seconds: int
    num_transfers: int
    links: tuple
    link_costs: tuple
    category: Category
    origin_landuse: np.ndarray
    dest_landuse: np.ndarray
    transfer_landuse: np.ndarray = field(default_factory=lambda: np.zeros(LANDUSE_DIM))

    def __post_init__(self):
        for name in ("ivtt_seconds", "fare_cents", "walk_transfer_seconds", "num_transfers"):
            if getattr(self, name) < 0:
                raise StructuralError(f"{name} must be non-negative")
        if self.num_transfers != self.category.transfers:
            raise StructuralError(
                f"{self.category.value} implies {self.category.transfers} transfers, "
                f"got {self.num_transfers}"
            )
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "link_costs", tuple(float(c) for c in self.link_costs))
        if len(self.links) != len(self.link_costs):
            raise StructuralError("link_costs length must equal links length")
        for name in ("origin_landuse", "dest_landuse", "transfer_landuse"):
            object.__setattr__(self, name, _as_landuse(getattr(self, name)))

    @property
    def journey_seconds(self):
        return self.ivtt_seconds + self.walk_transfer_seconds

    def replace(self, **changes):
        fields = {
            k: getattr(self, k)
            for k in self.__dataclass_fields__  # noqa: SIM118
        }
        fields.update(changes)
        return Route(**fields)

    def __eq__(self, other):
        if not isinstance(other, Route):
            return NotImplemented
        return (
            self.ivtt_seconds == other.ivtt_seconds
            and self.fare_cents == other.fare_cents
            and self.walk_transfer_seconds == other.walk_transfer_seconds
            and self.num_transfers == other.num_transfers
            and self.links == other.links
            and self.link_costs == other.link_costs
            and self.category is other.category
            and np.array_equal(self.origin_landuse, other.origin_landuse)
            and np.array_equal(self.dest_landuse, other.dest_landuse)
            and np.array_equal(self.transfer_landuse, other.transfer_landuse)
        )

    __hash__ = None


@dataclass(frozen=True)
class ChoiceObservation:
    """One journey: the enumerated choice set, the chosen route and the card type."""

    od_pair: tuple
    alternatives: tuple
    chosen: int
    card_type: CardType

    def __post_init__(self):
        object.__setattr__(self, "od_pair", tuple(self.od_pair))
        object.__setattr__(self, "alternatives", tuple(self.alternatives))
        n = len(self.alternatives)
        if not 1 <= n:
            raise StructuralError(f"OD {self.od_pair}: empty choice set")
        if not 0 <= self.chosen < n:
            raise StructuralError(f"OD {self.od_pair}: chosen index {self.chosen} out of range")
        counts = {}
        for r in self.alternatives:
            counts[r.category] = counts.get(r.category, 0) + 1
        over = [c.value for c, k in counts.items() if k > MAX_PER_CATEGORY]
        if over:
            raise StructuralError(f"OD {self.od_pair}: more than {MAX_PER_CATEGORY} routes in {over}")


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Padded per-observation feature matrix; policy features lead the columns."""

    values: np.ndarray
    mask: np.ndarray
    chosen: int
    policy_dim: int = POLICY_DIM
    columns: tuple = ()

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.mask.shape[0]:
            raise StructuralError("values must be [max_alternatives x feature_dim] matching mask")
        if np.any(self.values[~self.mask] != 0):
            raise StructuralError("padded rows must be zero")
        if not self.mask[self.chosen]:
            raise StructuralError("chosen alternative is padding")

    @property
    def n_alternatives(self):
        return int(self.mask.sum())

    @property
    def feature_dim(self):
        return self.values.shape[1]


@dataclass
class ParameterTable:
    names: list
    estimates: np.ndarray
    std_errors: np.ndarray | None = None
    t_stats: np.ndarray | None = None
    frozen: np.ndarray | None = None

    def __post_init__(self):
        self.names = list(self.names)
        n = len(self.names)
        self.estimates = np.asarray(self.estimates, dtype=np.float64)
        if self.frozen is None:
            self.frozen = np.zeros(n, dtype=bool)
        self.frozen = np.asarray(self.frozen, dtype=bool)
        if self.std_errors is not None:
            self.std_errors = np.asarray(self.std_errors, dtype=np.float64)
            if self.t_stats is None:
                with np.errstate(divide="ignore", invalid="ignore"):
                    self.t_stats = np.where(
                        np.isfinite(self.std_errors) & (self.std_errors > 0),
                        self.estimates / self.std_errors,
                        np.nan,
                    )
        if self.t_stats is not None:
            self.t_stats = np.asarray(self.t_stats, dtype=np.float64)
        for vec in (self.estimates, self.std_errors, self.t_stats, self.frozen):
            if vec is not None and len(vec) != n:
                raise StructuralError("parameter table vectors must share a length")

    def __getitem__(self, name):
        return self.estimates[self.names.index(name)]

    def row(self, name):
        i = self.names.index(name)
        se = None if self.std_errors is None else self.std_errors[i]
        t = None if self.t_stats is None else self.t_stats[i]
        return self.estimates[i], se, t, bool(self.frozen[i])

    def subset(self, names):
        idx = [self.names.index(n) for n in names]
        pick = lambda v: None if v is None else v[idx]  # noqa: E731
        return ParameterTable(
            names=list(names),
            estimates=self.estimates[idx],
            std_errors=pick(self.std_errors),
            t_stats=pick(self.t_stats),
            frozen=self.frozen[idx],
        )

    def to_csv(self):
        lines = ["name,estimate,std_error,t_stat,frozen"]
        for i, name in enumerate(self.names):
            se = "" if self.std_errors is None or not np.isfinite(self.std_errors[i]) else repr(float(self.std_errors[i]))
            t = "" if self.t_stats is None or not np.isfinite(self.t_stats[i]) else repr(float(self.t_stats[i]))
            lines.append(f"{name},{float(self.estimates[i])!r},{se},{t},{int(self.frozen[i])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text):
        rows = [ln.split(",") for ln in text.strip().splitlines()[1:]]
        names = [r[0] for r in rows]
        est = [float(r[1]) for r in rows]
        se = [float(r[2]) if r[2] else np.nan for r in rows]
        t = [float(r[3]) if r[3] else np.nan for r in rows]
        frozen = [bool(int(r[4])) for r in rows]
        has_se = any(r[2] for r in rows)
        return cls(names, est, np.array(se) if has_se else None, np.array(t) if has_se else None, frozen)

    def to_dict(self):
        conv = lambda v: None if v is None else [None if not np.isfinite(x) else float(x) for x in v]  # noqa: E731
        return {
            "names": self.names,
            "estimates": [float(x) for x in self.estimates],
            "std_errors": conv(self.std_errors),
            "t_stats": conv(self.t_stats),
            "frozen": [bool(x) for x in self.frozen],
        }

    @classmethod
    def from_dict(cls, d):
        conv = lambda v: None if v is None else np.array([np.nan if x is None else x for x in v], dtype=np.float64)  # noqa: E731
        return cls(d["names"], d["estimates"], conv(d["std_errors"]), conv(d["t_stats"]), d["frozen"])


FOLD_METRICS = ("train_loss", "valid_loss", "train_acc", "valid_acc")


@dataclass
class EvalReport:
    model_id: str
    per_fold: list
    parameter_table: ParameterTable | None = None
    n_parameters: int | None = None
    extras: dict = field(default_factory=dict)

    @property
    def mean(self):
        return {k: float(np.mean([f[k] for f in self.per_fold])) for k in FOLD_METRICS}

    @property
    def std(self):
        return {k: float(np.std([f[k] for f in self.per_fold])) for k in FOLD_METRICS}

    def to_dict(self):
        return {
            "model_id": self.model_id,
            "n_parameters": self.n_parameters,
            "per_fold": [{k: float(f[k]) for k in FOLD_METRICS} for f in self.per_fold],
            "mean": self.mean,
            "std": self.std,
            "parameter_table": None if self.parameter_table is None else self.parameter_table.to_dict(),
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d):
        table = d.get("parameter_table")
        return cls(
            model_id=d["model_id"],
            per_fold=d["per_fold"],
            parameter_table=None if table is None else ParameterTable.from_dict(table),
            n_parameters=d.get("n_parameters"),
            extras=d.get("extras", {}),
        )


def pad_and_mask(obs, features, max_alternatives=MAX_ALTERNATIVES, columns=(), policy_dim=POLICY_DIM):
    """Pad a per-alternative feature matrix to ``max_alternatives`` rows."""
    features = np.asarray(features, dtype=np.float64)
    n = len(obs.alternatives)
    if n > max_alternatives:
        raise StructuralError(
            f"OD {obs.od_pair}: {n} alternatives exceed the maximum of {max_alternatives}"
        )
    if features.ndim != 2 or features.shape[0] != n:
        raise StructuralError(f"OD {obs.od_pair}: feature rows ({features.shape[0]}) != alternatives ({n})")
    values = np.zeros((max_alternatives, features.shape[1]))
    values[:n] = features
    mask = np.zeros(max_alternatives, dtype=bool)
    mask[:n] = True
    return FeatureMatrix(values, mask, obs.chosen, policy_dim, tuple(columns))
