"""Small NumPy layer library with hand-written reverse-mode gradients.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into :class:`Param.grad` during
``backward``.  Only the layers the route-choice architectures use are
provided; there is no general computation graph.
"""
from __future__ import annotations

import io
import json
import math
import zipfile

import numpy as np

from .core import StructuralError

CHECKPOINT_VERSION = 1


class Param:
    """A named parameter array with gradient buffer and per-element freeze mask."""

    def __init__(self, name, value, frozen=False):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.frozen = np.broadcast_to(np.asarray(frozen, dtype=bool), self.value.shape).copy()

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    @property
    def n_trainable(self):
        return int((~self.frozen).sum())

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape}, trainable={self.n_trainable})"


class Module:
    """Base class: subclasses list their params and child modules."""

    training = False

    def params(self):
        out = []
        for v in vars(self).values():
            if isinstance(v, Param):
                out.append(v)
            elif isinstance(v, Module):
                out.extend(v.params())
            elif isinstance(v, (list, tuple)):
                for item in v:
                    if isinstance(item, Module):
                        out.extend(item.params())
        return out

    def modules(self):
        yield self
        for v in vars(self).values():
            if isinstance(v, Module):
                yield from v.modules()
            elif isinstance(v, (list, tuple)):
                for item in v:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()


def _cast(param, like):
    """Parameter value in the dtype of the activations (float32 runs keep float64 masters)."""
    return param.value.astype(like.dtype, copy=False)


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear(Module):
    """``y = x @ W + b`` over the last axis."""

    def __init__(self, d_in, d_out, bias=True, rng=None, name="linear", init="xavier"):
        if init == "zeros" or rng is None:
            w = np.zeros((d_in, d_out))
        else:
            w = xavier_uniform(rng, d_in, d_out)
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(d_out)) if bias else None

    def forward(self, x):
        self._x = x
        y = x @ _cast(self.weight, x)
        if self.bias is not None:
            y = y + _cast(self.bias, x)
        return y

    def backward(self, g):
        x = self._x
        lead = int(np.prod(x.shape[:-1]))
        x2 = x.reshape(lead, x.shape[-1])
        g2 = g.reshape(lead, g.shape[-1])
        self.weight.grad += x2.T @ g2
        if self.bias is not None:
            self.bias.grad += g2.sum(axis=0)
        return g @ _cast(self.weight, g).T


def adaptive_pool_matrix(length, target):
    """``(length, target)`` averaging matrix; column ``i`` covers
    ``[floor(i*L/T), ceil((i+1)*L/T))``."""
    if length < 1 or target < 1:
        raise StructuralError("adaptive pooling needs positive lengths")
    m = np.zeros((length, target))
    for i in range(target):
        start = (i * length) // target
        end = -((-(i + 1) * length) // target)
        m[start:end, i] = 1.0 / (end - start)
    return m


def adaptive_avg_pool(x, target):
    return x @ adaptive_pool_matrix(x.shape[-1], target)


class AdaptiveAvgPool1d(Module):
    def __init__(self, length, target):
        self.length = length
        self.target = target
        self.matrix = adaptive_pool_matrix(length, target)

    def forward(self, x):
        if x.shape[-1] != self.length:
            raise StructuralError(f"pool expects length {self.length}, got {x.shape[-1]}")
        return x @ self.matrix

    def backward(self, g):
        return g @ self.matrix.T


class TokenEmbedding(Module):
    """Embed each scalar token with its own affine map: ``e[t] = z[t] * W[t] + b[t]``."""

    def __init__(self, n_tokens, d_model, rng, name="embed"):
        self.weight = Param(f"{name}.weight", xavier_uniform(rng, 1, d_model, (n_tokens, d_model)))
        self.bias = Param(f"{name}.bias", np.zeros((n_tokens, d_model)))

    def forward(self, z):
        self._z = z
        return z[..., None] * _cast(self.weight, z) + _cast(self.bias, z)

    def backward(self, g):
        z = self._z
        t, d = self.weight.shape
        self.weight.grad += np.einsum("nt,ntd->td", z.reshape(-1, t), g.reshape(-1, t, d))
        self.bias.grad += g.reshape(-1, *g.shape[-2:]).sum(axis=0)
        return np.einsum("...td,td->...t", g, _cast(self.weight, g))


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5, name="ln"):
        self.gamma = Param(f"{name}.gamma", np.ones(d))
        self.beta = Param(f"{name}.beta", np.zeros(d))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return xhat * _cast(self.gamma, x) + _cast(self.beta, x)

    def backward(self, g):
        xhat, inv = self._cache
        d = xhat.shape[-1]
        self.gamma.grad += (g * xhat).reshape(-1, d).sum(axis=0)
        self.beta.grad += g.reshape(-1, d).sum(axis=0)
        gh = g * _cast(self.gamma, g)
        return inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over ``(..., T, d_model)``; no positional terms."""

    def __init__(self, d_model, n_heads, d_head, rng, name="mha"):
        self.d_model, self.n_heads, self.d_head = d_model, n_heads, d_head
        inner = n_heads * d_head
        self.q = Linear(d_model, inner, rng=rng, name=f"{name}.q")
        self.k = Linear(d_model, inner, rng=rng, name=f"{name}.k")
        self.v = Linear(d_model, inner, rng=rng, name=f"{name}.v")
        self.o = Linear(inner, d_model, rng=rng, name=f"{name}.o")

    def _split(self, x):
        *lead, t, _ = x.shape
        return x.reshape(*lead, t, self.n_heads, self.d_head).swapaxes(-2, -3)

    def _merge(self, x):
        x = x.swapaxes(-2, -3)
        return x.reshape(*x.shape[:-2], self.n_heads * self.d_head)

    def forward(self, x):
        if x.shape[-1] != self.d_model:
            raise StructuralError(f"attention expects d_model={self.d_model}, got {x.shape[-1]}")
        q = self._split(self.q.forward(x))
        k = self._split(self.k.forward(x))
        v = self._split(self.v.forward(x))
        scale = 1.0 / math.sqrt(self.d_head)
        attn = softmax((q @ k.swapaxes(-1, -2)) * scale)
        self._cache = (q, k, v, attn, scale)
        return self.o.forward(self._merge(attn @ v))

    def backward(self, g):
        q, k, v, attn, scale = self._cache
        g_ctx = self._split(self.o.backward(g))
        g_attn = g_ctx @ v.swapaxes(-1, -2)
        g_v = attn.swapaxes(-1, -2) @ g_ctx
        g_scores = attn * (g_attn - (g_attn * attn).sum(axis=-1, keepdims=True)) * scale
        g_q = g_scores @ k
        g_k = g_scores.swapaxes(-1, -2) @ q
        return (self.q.backward(self._merge(g_q)) + self.k.backward(self._merge(g_k))
                + self.v.backward(self._merge(g_v)))


class FeedForward(Module):
    def __init__(self, d_model, d_ff, rng, name="ffn"):
        self.fc1 = Linear(d_model, d_ff, rng=rng, name=f"{name}.fc1")
        self.fc2 = Linear(d_ff, d_model, rng=rng, name=f"{name}.fc2")

    def forward(self, x):
        h = self.fc1.forward(x)
        self._active = h > 0
        return self.fc2.forward(np.where(self._active, h, 0.0))

    def backward(self, g):
        return self.fc1.backward(np.where(self._active, self.fc2.backward(g), 0.0))


class Dropout(Module):
    """Inverted dropout with masks drawn from a counter-based generator.

    The mask depends only on ``(seed, step, layer_id, offset)`` so a forward
    pass can be replayed exactly, e.g. when activations are recomputed
    chunk by chunk.
    """

    def __init__(self, p, layer_id=0, seed=0):
        if not 0.0 <= p < 1.0:
            raise StructuralError("dropout rate must lie in [0, 1)")
        self.p, self.layer_id, self.seed = p, layer_id, seed
        self.step = 0
        self.offset = 0

    def forward(self, x):
        if not self.training or self.p == 0.0:
            self._mask = None
            return x
        ss = np.random.SeedSequence([self.seed, self.step, self.layer_id, self.offset])
        rng = np.random.Generator(np.random.Philox(ss))
        self._mask = ((rng.random(x.shape) >= self.p) / (1.0 - self.p)).astype(x.dtype)
        return x * self._mask

    def backward(self, g):
        return g if self._mask is None else g * self._mask


class EncoderLayer(Module):
    """Post-norm encoder block: ``LN(x + MHA(x))`` then ``LN(h + FFN(h))``."""

    def __init__(self, d_model, n_heads, d_head, d_ff, dropout, rng, layer_id=0, seed=0,
                 name="enc"):
        self.attn = MultiHeadAttention(d_model, n_heads, d_head, rng, name=f"{name}.attn")
        self.ln1 = LayerNorm(d_model, name=f"{name}.ln1")
        self.ffn = FeedForward(d_model, d_ff, rng, name=f"{name}.ffn")
        self.ln2 = LayerNorm(d_model, name=f"{name}.ln2")
        self.drop1 = Dropout(dropout, 2 * layer_id, seed)
        self.drop2 = Dropout(dropout, 2 * layer_id + 1, seed)

    def forward(self, x):
        h = self.ln1.forward(x + self.drop1.forward(self.attn.forward(x)))
        return self.ln2.forward(h + self.drop2.forward(self.ffn.forward(h)))

    def backward(self, g):
        g_h = self.ln2.backward(g)
        g_h = g_h + self.ffn.backward(self.drop2.backward(g_h))
        g_x = self.ln1.backward(g_h)
        return g_x + self.attn.backward(self.drop1.backward(g_x))


def concat(parts):
    """Concatenate along the last axis; returns the array and the split sizes."""
    return np.concatenate(parts, axis=-1), [p.shape[-1] for p in parts]


def split_grad(g, sizes):
    return np.split(g, np.cumsum(sizes)[:-1], axis=-1)


def masked_softmax_xent(utilities, mask, chosen):
    """Per-observation negative log-probability of the chosen alternative.

    ``utilities`` is ``(N, A)``, ``mask`` is boolean ``(N, A)`` and
    ``chosen`` is ``(N,)``.  Returns ``(losses, probs)`` where padded
    entries of ``probs`` are exactly zero.
    """
    u = np.asarray(utilities, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if u.ndim == 1:
        losses, probs = masked_softmax_xent(u[None], mask[None], np.atleast_1d(chosen))
        return losses[0], probs[0]
    chosen = np.asarray(chosen)
    rows = np.arange(u.shape[0])
    if not mask.any(axis=1).all():
        raise StructuralError("every observation needs at least one real alternative")
    if not mask[rows, chosen].all():
        raise StructuralError("chosen alternative is masked out")
    z = np.where(mask, u, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    probs = e / denom
    losses = np.log(denom[:, 0]) - z[rows, chosen]
    return losses, probs


def xent_grad(probs, chosen, weights=None):
    """Gradient of ``sum_n w_n * loss_n`` w.r.t. utilities."""
    g = probs.copy()
    g[np.arange(len(chosen)), chosen] -= 1.0
    if weights is not None:
        g *= np.asarray(weights)[:, None]
    return g


class Adam:
    """Adam restricted to unfrozen entries; frozen entries are never written."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.n_trainable]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self._free = [np.flatnonzero(~p.frozen.reshape(-1)) for p in self.params]
        self.m = [np.zeros(len(f)) for f in self._free]
        self.v = [np.zeros(len(f)) for f in self._free]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, free, m, v in zip(self.params, self._free, self.m, self.v):
            g = p.grad.reshape(-1)[free]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            flat = p.value.reshape(-1)
            flat[free] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


def count_parameters(params, trainable_only=False):
    return sum(p.n_trainable if trainable_only else p.size for p in params)


def save_checkpoint(path, params, meta=None):
    """Write parameters to an ``.npz`` archive (bit-exact round trip)."""
    arrays = {"__version__": np.array(CHECKPOINT_VERSION)}
    names = []
    for p in params:
        names.append(p.name)
        arrays[f"value::{p.name}"] = p.value
        arrays[f"frozen::{p.name}"] = p.frozen
    arrays["__names__"] = np.array(names)
    if meta is not None:
        arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    # np.savez stamps the current time into the archive; a fixed stamp keeps
    # reruns byte-identical.
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for key, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path):
    """Return ``(list of Param, meta dict)``."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise StructuralError(f"unsupported checkpoint version {version}")
        params = [Param(str(n), data[f"value::{n}"], data[f"frozen::{n}"]) for n in data["__names__"]]
        meta = json.loads(str(data["__meta__"])) if "__meta__" in data.files else {}
    return params, meta
