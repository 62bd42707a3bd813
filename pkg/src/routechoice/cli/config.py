"""Run configuration: network, ground truth, data size, model list, folds, outputs."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from ..core import LANDUSE_DIM
from ..datagen import COMMERCIAL, MRT, GroundTruthUtility, NetworkConfig
from ..features import TransformSpec
from ..models import DCMKind, ModelKind, Schedule, TransformerConfig

DCM_KINDS = {k.value for k in DCMKind}
DEEP_KINDS = {k.value for k in ModelKind}


class ConfigError(Exception):
    """The run configuration is invalid."""


def _build(cls, d, what):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {what}: {e}") from e


@dataclass
class DataSpec:
    n_observations: int = 50_000
    n_od: int = 100
    seed: int = 0
    network_seed: int = 0
    card_shares: tuple = (0.15, 0.7, 0.15)

    def __post_init__(self):
        self.card_shares = tuple(float(x) for x in self.card_shares)
        if self.n_observations < 1 or self.n_od < 1:
            raise ConfigError("n_observations and n_od must be positive")
        if len(self.card_shares) != 3 or min(self.card_shares) < 0 or sum(self.card_shares) <= 0:
            raise ConfigError("card_shares needs three non-negative weights")


@dataclass
class ModelEntry:
    name: str
    kind: str
    feature_dim: int = 4
    source: str | None = None
    schedule: Schedule = field(default_factory=Schedule)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DCM_KINDS | DEEP_KINDS:
            raise ConfigError(f"model {self.name}: unknown kind {self.kind}")
        if isinstance(self.schedule, dict):
            self.schedule = _build(Schedule, self.schedule, f"schedule of {self.name}")
        if isinstance(self.transformer, dict):
            self.transformer = _build(TransformerConfig, self.transformer, f"transformer of {self.name}")
        if self.schedule.select not in ("accuracy", "loss"):
            raise ConfigError(f"model {self.name}: select must be 'accuracy' or 'loss'")
        if self.feature_dim not in (4, 97):
            raise ConfigError(f"model {self.name}: feature_dim must be 4 or 97")

    @property
    def is_dcm(self):
        return self.kind in DCM_KINDS

    @property
    def constrained(self):
        return not self.is_dcm and ModelKind(self.kind).constrained

    def to_dict(self):
        d = {"name": self.name, "kind": self.kind, "feature_dim": self.feature_dim,
             "source": self.source, "seed": self.seed}
        if not self.is_dcm:
            d["schedule"] = self.schedule.to_dict()
            d["transformer"] = self.transformer.to_dict()
        return d


@dataclass
class ElasticitySpec:
    n_od: int = 1000
    seed: int = 0
    grid_points: int = 25
    models: list = field(default_factory=list)


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    truth: GroundTruthUtility = field(default_factory=GroundTruthUtility)
    data: DataSpec = field(default_factory=DataSpec)
    transform: TransformSpec = field(default_factory=TransformSpec)
    models: list = field(default_factory=list)
    fold_seed: int = 0
    n_folds: int = 5
    elasticity: ElasticitySpec = field(default_factory=ElasticitySpec)
    # (mnl, constrained, unconstrained) model names for the BL/CI summary
    bl_ci: list = field(default_factory=list)
    output_dir: str = "run"

    def __post_init__(self):
        self.validate()

    def entry(self, name):
        for m in self.models:
            if m.name == name:
                return m
        raise ConfigError(f"no model named {name}")

    def validate(self):
        seen = {}
        for m in self.models:
            if m.name in seen:
                raise ConfigError(f"duplicate model name {m.name}")
            if m.constrained:
                src = seen.get(m.source)
                if src is None:
                    raise ConfigError(f"{m.name} must come after its CNN 1 source {m.source!r}")
                if src.kind != ModelKind.CNN1.value:
                    raise ConfigError(f"{m.name}: source {m.source} is not a CNN1 model")
            elif m.source is not None:
                raise ConfigError(f"{m.name} is not constrained and takes no source")
            seen[m.name] = m
        for triple in self.bl_ci:
            if len(triple) != 3 or any(n not in seen for n in triple):
                raise ConfigError(f"bl_ci entry {triple} must name three configured models")
        for n in self.elasticity.models:
            if n not in seen:
                raise ConfigError(f"elasticity model {n} is not configured")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be at least 2")

    def to_dict(self):
        return {
            "network": self.network.to_dict(),
            "truth": self.truth.to_dict(),
            "data": dataclasses.asdict(self.data),
            "transform": dataclasses.asdict(self.transform),
            "models": [m.to_dict() for m in self.models],
            "fold_seed": self.fold_seed,
            "n_folds": self.n_folds,
            "elasticity": dataclasses.asdict(self.elasticity),
            "bl_ci": [list(t) for t in self.bl_ci],
            "output_dir": self.output_dir,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        try:
            truth = GroundTruthUtility.from_dict(d["truth"]) if "truth" in d else GroundTruthUtility()
        except Exception as e:  # noqa: BLE001 - any malformed truth is a config problem
            raise ConfigError(f"invalid truth: {e}") from e
        try:
            return cls(
                network=_build(NetworkConfig, d.get("network", {}), "network"),
                truth=truth,
                data=_build(DataSpec, d.get("data", {}), "data"),
                transform=_build(TransformSpec, d.get("transform", {}), "transform"),
                models=[_build(ModelEntry, m, "model") for m in d.get("models", [])],
                fold_seed=int(d.get("fold_seed", 0)),
                n_folds=int(d.get("n_folds", 5)),
                elasticity=_build(ElasticitySpec, d.get("elasticity", {}), "elasticity"),
                bl_ci=[list(t) for t in d.get("bl_ci", [])],
                output_dir=str(d.get("output_dir", "run")),
            )
        except ConfigError:
            raise
        except Exception as e:  # noqa: BLE001
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"configuration is not valid JSON: {e}") from e
        return cls.from_dict(d)


# ------------------------------------------------------------------ presets

RICH_NETWORK = NetworkConfig(rail_lines=4, rail_stops=12, bus_routes=16, bus_stops=16,
                             transfer_radius_m=600.0)


def landuse_truth(amplitude=2.5, threshold=0.1554, sharpness=40.0):
    """Linear policy utility plus a saturating effect of transfer-station land use."""
    w = np.zeros(LANDUSE_DIM)
    w[COMMERCIAL] = 1.0
    w[MRT] = 1.0
    return GroundTruthUtility(landuse_threshold={
        "weights": w.tolist(), "threshold": threshold, "sharpness": sharpness, "amplitude": amplitude})


def standard_models(cnn1, cnn2, tfm, transformer, feature_dim=97):
    """MNL, PSL, CNN 1, CNN 2U/2S, CNN 2C, TFM C, TFM U in pipeline order."""
    deep = lambda name, kind, sched, dim, src=None: ModelEntry(  # noqa: E731
        name, kind, dim, src, sched, transformer)
    return [
        ModelEntry("MNL", "MNL"),
        ModelEntry("PSL", "PSL"),
        deep("CNN1", "CNN1", cnn1, 4),
        deep("CNN2U", "CNN2U", cnn2, feature_dim),
        deep("CNN2S", "CNN2S", cnn2, feature_dim),
        deep("CNN2C", "CNN2C", cnn2, feature_dim, "CNN1"),
        deep("TFMC", "TFMC", tfm, feature_dim, "CNN1"),
        deep("TFMU", "TFMU", tfm, feature_dim),
    ]


def preset(name):
    """Named configurations: ``desk`` (ordering study), ``quick`` (smoke runs), ``mnl``."""
    cnn1 = Schedule(epochs=1000, lr=0.1, lr_min=1e-6, batch_size=None, select="loss")
    if name == "desk":
        tfm = TransformerConfig(d_model=64, pool=64, n_heads=4, d_head=16, d_ff=64, n_layers=2,
                                dropout=0.0, chunk_mb=16, dtype="float32")
        return RunConfig(
            network=RICH_NETWORK,
            truth=landuse_truth(),
            data=DataSpec(n_observations=50_000, n_od=50, seed=3, network_seed=7),
            models=standard_models(
                cnn1,
                Schedule(epochs=300, lr=0.02, lr_min=1e-5, batch_size=None),
                Schedule(epochs=60, lr=0.05, lr_min=0.05 / 30, batch_size=None),
                tfm,
            ),
            elasticity=ElasticitySpec(models=["MNL", "CNN1", "CNN2C", "CNN2U", "TFMC", "TFMU"]),
            bl_ci=[["MNL", "CNN2C", "CNN2U"], ["MNL", "TFMC", "TFMU"]],
            output_dir="runs/desk",
        )
    if name == "quick":
        tfm = TransformerConfig(d_model=8, pool=8, n_heads=2, d_head=4, d_ff=8, n_layers=1,
                                dropout=0.1, chunk_mb=16)
        return RunConfig(
            network=NetworkConfig(),
            truth=landuse_truth(),
            data=DataSpec(n_observations=2000, n_od=20, seed=1, network_seed=1),
            models=standard_models(
                Schedule(epochs=200, lr=0.1, lr_min=1e-4, batch_size=None, select="loss"),
                Schedule(epochs=20, lr=0.02, batch_size=512),
                Schedule(epochs=3, lr=0.01, batch_size=None),
                tfm,
            ),
            elasticity=ElasticitySpec(n_od=20, grid_points=5, models=["MNL", "CNN1", "TFMC"]),
            bl_ci=[["MNL", "CNN2C", "CNN2U"], ["MNL", "TFMC", "TFMU"]],
            output_dir="runs/quick",
        )
    if name == "mnl":
        return RunConfig(
            network=RICH_NETWORK,
            data=DataSpec(n_observations=50_000, n_od=300, seed=3, network_seed=7),
            models=[ModelEntry("MNL", "MNL"), ModelEntry("PSL", "PSL"),
                    ModelEntry("CNN1", "CNN1", 4, None, cnn1)],
            elasticity=ElasticitySpec(models=["MNL", "CNN1"]),
            output_dir="runs/mnl",
        )
    raise ConfigError(f"unknown preset {name!r} (choose desk, quick or mnl)")


PRESETS = ("desk", "quick", "mnl")
