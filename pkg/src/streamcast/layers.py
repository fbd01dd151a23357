"""Parameter store and the handful of layers the models are built from."""
from __future__ import annotations

import hashlib
import math

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

MASK_NEG = -1e9


class ParamStore:
    """Flat, name-addressed collection of trainable tensors."""

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self.rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def zeros(self, name: str, *shape: int) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, *shape: int) -> Tensor:
        return self.add(name, np.ones(shape))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, t in self.tensors.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {a.shape} vs {t.shape}")
            t.data = a.copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k].data, dtype="<f8").tobytes())
        return h.hexdigest()


class Linear:
    def __init__(self, store: ParamStore, name: str, din: int, dout: int, bias: bool = True):
        self.w = store.glorot(f"{name}.w", din, dout)
        self.b = store.zeros(f"{name}.b", dout) if bias else None

    def __call__(self, x):
        x = dm.as_tensor(x)
        lead = x.shape[:-1]
        # flatten leading axes so the weight gradient is a single GEMM
        y = dm.matmul(dm.reshape(x, (-1, x.shape[-1])), self.w)
        if self.b is not None:
            y = y + self.b
        return dm.reshape(y, lead + (y.shape[-1],))


class MLP:
    """Linear -> ReLU -> Linear."""

    def __init__(self, store, name, din, dhidden, dout):
        self.l1 = Linear(store, f"{name}.l1", din, dhidden)
        self.l2 = Linear(store, f"{name}.l2", dhidden, dout)

    def __call__(self, x):
        return self.l2(dm.relu(self.l1(x)))


class LayerNorm:
    def __init__(self, store, name, d):
        self.g = store.ones(f"{name}.g", d)
        self.b = store.zeros(f"{name}.b", d)

    def __call__(self, x):
        return dm.layer_norm(x, self.g, self.b)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, d) -> (..., heads, L, d/heads)."""
    *lead, length, d = x.shape
    x = dm.reshape(x, tuple(lead) + (length, heads, d // heads))
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return dm.transpose(x, axes)


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, L, dh) -> (..., L, heads*dh)."""
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = dm.transpose(x, axes)
    *lead, length, heads, dh = x.shape
    return dm.reshape(x, tuple(lead) + (length, heads * dh))


class MultiHeadAttention:
    def __init__(self, store, name, d, heads):
        if d % heads:
            raise ValueError("width must be divisible by head count")
        self.heads = heads
        self.q = Linear(store, f"{name}.q", d, d)
        self.k = Linear(store, f"{name}.k", d, d)
        self.v = Linear(store, f"{name}.v", d, d)
        self.o = Linear(store, f"{name}.o", d, d)

    def __call__(self, query, memory, key_mask: np.ndarray | None = None, values=None):
        """``query`` (..., Lq, d), ``memory`` (..., Lk, d); ``key_mask`` (..., Lk) bool, True = keep.

        ``values`` defaults to ``memory``.
        """
        q = split_heads(self.q(query), self.heads)
        k = split_heads(self.k(memory), self.heads)
        v = split_heads(self.v(memory if values is None else values), self.heads)
        mask = None
        if key_mask is not None:
            mask = np.where(key_mask, 0.0, MASK_NEG)[..., None, None, :]
        return self.o(merge_heads(dm.attention(q, k, v, mask)))


class PairAttention:
    """Attention where every (receiver, sender) pair has its own key/value.

    ``query``: (..., R, d); ``pairs``: (..., R, S, d) sender tokens already
    fused with the pair's relative embedding.
    """

    def __init__(self, store, name, d, heads):
        self.heads = heads
        self.q = Linear(store, f"{name}.q", d, d)
        self.k = Linear(store, f"{name}.k", d, d)
        self.v = Linear(store, f"{name}.v", d, d)
        self.o = Linear(store, f"{name}.o", d, d)

    def __call__(self, query, pairs, key_mask: np.ndarray | None = None):
        h = self.heads
        *lead, r, d = query.shape
        s = pairs.shape[-2]
        dh = d // h
        q = dm.reshape(self.q(query), tuple(lead) + (r, h, 1, dh))
        k = dm.reshape(self.k(pairs), tuple(lead) + (r, s, h, dh))
        v = dm.reshape(self.v(pairs), tuple(lead) + (r, s, h, dh))
        nd = k.ndim
        perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        k = dm.transpose(k, perm)  # (..., r, h, s, dh)
        v = dm.transpose(v, perm)
        mask = None
        if key_mask is not None:
            mask = np.where(key_mask, 0.0, MASK_NEG)[..., None, None, :]
        out = dm.attention(q, k, v, mask)  # (..., r, h, 1, dh)
        return self.o(dm.reshape(out, tuple(lead) + (r, d)))


class FeedForward:
    def __init__(self, store, name, d, hidden):
        self.mlp = MLP(store, name, d, hidden, d)

    def __call__(self, x):
        return self.mlp(x)


class DecoderLayer:
    """Post-norm transformer decoder layer: self-attn, cross-attn, FFN."""

    def __init__(self, store, name, d, heads, hidden, self_attention: bool = True):
        self.self_attn = MultiHeadAttention(store, f"{name}.self", d, heads) if self_attention else None
        self.cross = MultiHeadAttention(store, f"{name}.cross", d, heads)
        self.ffn = FeedForward(store, f"{name}.ffn", d, hidden)
        self.n1 = LayerNorm(store, f"{name}.n1", d) if self_attention else None
        self.n2 = LayerNorm(store, f"{name}.n2", d)
        self.n3 = LayerNorm(store, f"{name}.n3", d)

    def __call__(self, x, memory, memory_mask=None, dropout=0.0, rng=None):
        if self.self_attn is not None:
            x = self.n1(x + dm.dropout(self.self_attn(x, x), dropout, rng))
        if memory is not None and memory.shape[-2] > 0:
            x = self.n2(x + dm.dropout(self.cross(x, memory, memory_mask), dropout, rng))
        return self.n3(x + dm.dropout(self.ffn(x), dropout, rng))
