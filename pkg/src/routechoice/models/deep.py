"""Neural utility models: the linear CNN family and the Transformer family.

All models map one alternative's feature row to a scalar utility with
weights shared across alternatives; the choice probabilities are a masked
softmax over the alternatives of an observation.  Models work on the unique
rows of a :class:`~routechoice.features.ChoiceData` table so identical
alternatives are evaluated once.

Constrained kinds (CNN 2C, TFM C) hold the four linear policy weights fixed
at the values of a fitted CNN 1.
"""
from __future__ import annotations

import contextlib
import enum
from dataclasses import dataclass, field, asdict

import numpy as np

from ..core import POLICY_DIM, POLICY_NAMES, ParameterTable, StructuralError
from ..engine import (
    AdaptiveAvgPool1d,
    Dropout,
    EncoderLayer,
    Linear,
    Module,
    Param,
    TokenEmbedding,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from ..features import Expansion, expand_array, expanded_width

FARE = POLICY_NAMES.index("Fare")


class ModelKind(enum.Enum):
    CNN1 = "CNN1"
    CNN2U = "CNN2U"
    CNN2S = "CNN2S"
    CNN2C = "CNN2C"
    TFMU = "TFMU"
    TFMC = "TFMC"

    @property
    def constrained(self):
        return self in (ModelKind.CNN2C, ModelKind.TFMC)

    @property
    def transformer(self):
        return self in (ModelKind.TFMU, ModelKind.TFMC)


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 512
    pool: int = 512
    n_heads: int = 4
    d_head: int = 128
    d_ff: int = 2048
    n_layers: int = 2
    dropout: float = 0.2
    chunk_mb: float = 256.0
    # Activation precision of the encoder; parameters and optimizer state stay float64.
    dtype: str = "float64"

    def __post_init__(self):
        if self.dtype not in ("float64", "float32"):
            raise StructuralError("transformer dtype must be float64 or float32")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DeepSpec:
    kind: ModelKind
    feature_dim: int = 4
    frozen_policy_source: object = None
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.feature_dim < POLICY_DIM:
            raise StructuralError("feature_dim must include the four policy features")
        if self.kind.constrained and self.frozen_policy_source is None:
            raise StructuralError(f"{self.kind.value} needs a fitted CNN 1 as frozen policy source")
        if not self.kind.constrained and self.frozen_policy_source is not None:
            raise StructuralError(f"{self.kind.value} takes no frozen policy source")
        if self.kind.transformer and self.feature_dim == POLICY_DIM and self.kind is ModelKind.TFMC:
            raise StructuralError("TFM C needs non-policy features")


def frozen_policy_betas(source):
    """Resolve a CNN 1 checkpoint path, model or 4-vector to policy betas."""
    if isinstance(source, LinearUtilityModel):
        return source.weight.value[:POLICY_DIM].copy()
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        params, _ = load_checkpoint(source)
        for p in params:
            if p.name == "utility.weight":
                return p.value[:POLICY_DIM].copy()
        raise StructuralError(f"checkpoint {source} holds no linear utility weights")
    betas = np.asarray(source, dtype=np.float64)
    if betas.shape != (POLICY_DIM,):
        raise StructuralError("frozen policy betas must have four entries")
    return betas.copy()


class UtilityModel(Module):
    """Common interface; subclasses implement prepare/forward_rows/backward_rows."""

    spec: DeepSpec

    _CACHE_SLOTS = 4

    def __init__(self):
        self._prepared = []

    def prepared(self, rows):
        # Training alternates between a few row tables (train, validation).
        for cached_rows, prep in self._prepared:
            if cached_rows is rows:
                return prep
        prep = self.prepare(rows)
        self._prepared = [(rows, prep)] + self._prepared[: self._CACHE_SLOTS - 1]
        return prep

    @contextlib.contextmanager
    def full_precision(self):
        """Evaluate in float64 inside the block (finite differences need it)."""
        saved = getattr(self, "dtype", None)
        if saved is not None:
            self.dtype = "float64"
            self._prepared = []
        try:
            yield self
        finally:
            if saved is not None:
                self.dtype = saved
                self._prepared = []

    def row_utilities(self, rows, train=False):
        self.train(train)
        return self.forward_rows(self.prepared(rows))

    def utilities(self, data):
        u_rows = self.row_utilities(data.rows)
        return np.where(data.mask, u_rows[np.maximum(data.index, 0)], 0.0)

    def set_step(self, step):
        for m in self.modules():
            if isinstance(m, Dropout):
                m.step = step

    def parameter_count(self):
        return count_parameters(self.params())

    def trainable_count(self):
        return count_parameters(self.params(), trainable_only=True)

    def get_state(self):
        return [p.value.copy() for p in self.params()]

    def set_state(self, state):
        for p, v in zip(self.params(), state):
            p.value[...] = v

    def policy_table(self):
        est, frozen = self.policy_weights()
        return ParameterTable(list(POLICY_NAMES), est, frozen=frozen)


class LinearUtilityModel(UtilityModel):
    """CNN 1 / CNN 2U / CNN 2S / CNN 2C: a linear filter over (expanded) features."""

    _expansion = {
        ModelKind.CNN1: Expansion.NONE,
        ModelKind.CNN2U: Expansion.JOINT,
        ModelKind.CNN2S: Expansion.SEPARATED,
        ModelKind.CNN2C: Expansion.SEPARATED,
    }

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.expansion = self._expansion[spec.kind]
        d = spec.feature_dim
        if self.expansion is Expansion.NONE:
            width = d
        elif self.expansion is Expansion.JOINT:
            width = expanded_width(d)
        else:
            width = expanded_width(POLICY_DIM) + expanded_width(d - POLICY_DIM)
        w = np.zeros(width)
        frozen = np.zeros(width, dtype=bool)
        if spec.kind is not ModelKind.CNN2U:
            w[FARE] = -1.0
            frozen[FARE] = True
        if spec.kind is ModelKind.CNN2C:
            w[:POLICY_DIM] = frozen_policy_betas(spec.frozen_policy_source)
            frozen[:POLICY_DIM] = True
        self.weight = Param("utility.weight", w, frozen)

    def prepare(self, rows):
        if rows.shape[1] != self.spec.feature_dim:
            raise StructuralError(f"expected {self.spec.feature_dim} features, got {rows.shape[1]}")
        z, _, _ = expand_array(rows, self.expansion)
        return np.ascontiguousarray(z)

    def forward_rows(self, z):
        self._z = z
        return z @ self.weight.value

    def backward_rows(self, du):
        self.weight.grad += self._z.T @ du

    def policy_weights(self):
        return self.weight.value[:POLICY_DIM].copy(), self.weight.frozen[:POLICY_DIM].copy()

    def column_names(self, base_names):
        _, names, _ = expand_array(np.zeros((1, len(base_names))), self.expansion,
                                   names=list(base_names))
        return names


class TransformerUtilityModel(UtilityModel):
    """TFM U / TFM C.

    The transformer path expands its inputs quadratically, pools them to
    ``pool`` scalar tokens, embeds each token with its own affine map, runs
    the encoder stack and averages the token states.  The averaged state is
    concatenated with the path's original features and a linear head gives
    the utility.  TFM U feeds all features through the path and its head;
    TFM C routes only the non-policy features through it and adds the frozen
    CNN 1 policy utility at the end.
    """

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        cfg = spec.transformer
        rng = np.random.default_rng(spec.seed)
        d = spec.feature_dim
        self.dtype = cfg.dtype
        self.path_dim = d if spec.kind is ModelKind.TFMU else d - POLICY_DIM
        self.pool = AdaptiveAvgPool1d(expanded_width(self.path_dim), cfg.pool)
        # Per-token standardisation fitted once on training rows; pooled tokens
        # are tiny and non-negative, which LayerNorm would otherwise flatten.
        self.token_shift = Param("tokens.shift", np.zeros(cfg.pool), frozen=True)
        self.token_scale = Param("tokens.scale", np.ones(cfg.pool), frozen=True)
        # Same for the skip-connected features; policy columns keep their units.
        self.skip_shift = Param("skip.shift", np.zeros(self.path_dim), frozen=True)
        self.skip_scale = Param("skip.scale", np.ones(self.path_dim), frozen=True)
        self.embed = TokenEmbedding(cfg.pool, cfg.d_model, rng)
        self.layers = [
            EncoderLayer(cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_ff, cfg.dropout, rng,
                         layer_id=k, seed=spec.seed, name=f"enc{k}")
            for k in range(cfg.n_layers)
        ]
        self.head = Linear(cfg.d_model + self.path_dim, 1, bias=False, name="head", init="zeros")
        if spec.kind is ModelKind.TFMC:
            self.policy = Param("policy.weight", frozen_policy_betas(spec.frozen_policy_source), True)

    def _path(self, rows):
        if rows.shape[1] != self.spec.feature_dim:
            raise StructuralError(f"expected {self.spec.feature_dim} features, got {rows.shape[1]}")
        return rows if self.spec.kind is ModelKind.TFMU else rows[:, POLICY_DIM:]

    def _raw_tokens(self, path):
        z, _, _ = expand_array(path, Expansion.JOINT)
        return self.pool.forward(z)

    def calibrate(self, rows):
        """Fit the token standardisation on (training) rows; a no-op once fitted."""
        stats = (self.token_shift, self.token_scale, self.skip_shift, self.skip_scale)
        if any(np.any(p.value != (1.0 if p.name.endswith("scale") else 0.0)) for p in stats):
            return
        path = np.unique(self._path(rows), axis=0)
        tokens = self._raw_tokens(path)
        std = tokens.std(axis=0)
        self.token_shift.value[:] = tokens.mean(axis=0)
        self.token_scale.value[:] = np.where(std > 1e-12, std, 1.0)
        first = POLICY_DIM if self.spec.kind is ModelKind.TFMU else 0
        std = path[:, first:].std(axis=0)
        self.skip_shift.value[first:] = path[:, first:].mean(axis=0)
        self.skip_scale.value[first:] = np.where(std > 1e-12, std, 1.0)
        self._prepared = []

    def prepare(self, rows):
        path = self._path(rows)
        uniq, inverse = np.unique(path, axis=0, return_inverse=True)
        tokens = (self._raw_tokens(uniq) - self.token_shift.value) / self.token_scale.value
        tokens = tokens.astype(self.dtype)
        return {
            "tokens": tokens,
            "inverse": inverse.reshape(-1),
            "head_x": (path - self.skip_shift.value) / self.skip_scale.value,
            "policy_x": np.ascontiguousarray(rows[:, :POLICY_DIM]),
        }

    def _chunk_rows(self):
        cfg = self.spec.transformer
        per_row = 8 * cfg.n_layers * (cfg.n_heads * cfg.pool * cfg.pool * 2
                                      + cfg.pool * (8 * cfg.d_model + 2 * cfg.d_ff))
        return max(1, int(cfg.chunk_mb * 2**20 // per_row))

    def _encode(self, tokens, offset):
        for m in self.modules():
            if isinstance(m, Dropout):
                m.offset = offset
        h = self.embed.forward(tokens)
        for layer in self.layers:
            h = layer.forward(h)
        return h.mean(axis=-2)

    def _encode_backward(self, g):
        cfg = self.spec.transformer
        g = (g / cfg.pool).astype(self.dtype)
        gh = np.broadcast_to(g[:, None, :], (g.shape[0], cfg.pool, g.shape[1]))
        for layer in reversed(self.layers):
            gh = layer.backward(gh)
        self.embed.backward(gh)

    def forward_rows(self, prep):
        tokens = prep["tokens"]
        step = self._chunk_rows()
        self._chunks = [(s, min(s + step, len(tokens))) for s in range(0, len(tokens), step)]
        states = np.concatenate([self._encode(tokens[a:b], a) for a, b in self._chunks]) \
            if len(tokens) else np.zeros((0, self.spec.transformer.d_model))
        self._prep = prep
        gathered = states[prep["inverse"]]
        u = self.head.forward(np.concatenate([gathered, prep["head_x"]], axis=1))[:, 0]
        if self.spec.kind is ModelKind.TFMC:
            u = u + prep["policy_x"] @ self.policy.value
        return u

    def backward_rows(self, du):
        prep = self._prep
        if self.spec.kind is ModelKind.TFMC:
            self.policy.grad += prep["policy_x"].T @ du
        g = self.head.backward(du[:, None])[:, : self.spec.transformer.d_model]
        g_states = np.zeros((len(prep["tokens"]), g.shape[1]))
        np.add.at(g_states, prep["inverse"], g)
        tokens = prep["tokens"]
        if len(self._chunks) == 1:
            self._encode_backward(g_states)
            return
        for a, b in self._chunks:
            self._encode(tokens[a:b], a)
            self._encode_backward(g_states[a:b])

    def policy_weights(self):
        if self.spec.kind is ModelKind.TFMC:
            return self.policy.value.copy(), self.policy.frozen.copy()
        d = self.spec.transformer.d_model
        w = self.head.weight.value[d:d + POLICY_DIM, 0].copy()
        return w, self.head.weight.frozen[d:d + POLICY_DIM, 0].copy()


def build_model(spec):
    """Instantiate the architecture described by ``spec``."""
    if spec.kind.transformer:
        return TransformerUtilityModel(spec)
    return LinearUtilityModel(spec)


def save_model(model, path, extra_meta=None):
    """Checkpoint a deep model together with the settings needed to rebuild it."""
    spec = model.spec
    meta = {"kind": spec.kind.value, "feature_dim": spec.feature_dim, "seed": spec.seed,
            "transformer": spec.transformer.to_dict()}
    meta.update(extra_meta or {})
    save_checkpoint(path, model.params(), meta)


def load_model(path):
    """Rebuild a model saved by :func:`save_model`; returns ``(model, meta)``."""
    params, meta = load_checkpoint(path)
    kind = ModelKind(meta["kind"])
    values = {p.name: p for p in params}
    source = None
    if kind.constrained:
        key = "utility.weight" if kind is ModelKind.CNN2C else "policy.weight"
        source = values[key].value[:POLICY_DIM]
    spec = DeepSpec(kind, meta["feature_dim"], frozen_policy_source=source,
                    transformer=TransformerConfig(**meta["transformer"]), seed=meta["seed"])
    model = build_model(spec)
    for p in model.params():
        if p.name not in values or values[p.name].shape != p.shape:
            raise StructuralError(f"checkpoint {path} does not match a {kind.value} model ({p.name})")
        p.value[...] = values[p.name].value
        p.frozen[...] = values[p.name].frozen
    model._prepared = []
    return model.eval(), meta
