"""Transformer building blocks over named parameter stores.

A parameter store is a plain ``dict[str, np.ndarray]``; forward functions take
the same mapping with values wrapped as :class:`~ivlab.tensor.Tensor`. Names
are dotted paths (``enc.blocks.0.attn.q.w``) so that depth-based learning rate
decay and freezing can be expressed as predicates on names.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

ParamStore = dict  # str -> np.ndarray
Params = Mapping[str, Tensor]

NEG_INF = -1e9


# init ----------------------------------------------------------------------

def init_linear(store: ParamStore, name: str, din: int, dout: int, rng: np.random.Generator,
                zero: bool = False, bias: bool = True) -> None:
    if zero:
        store[f"{name}.w"] = np.zeros((din, dout))
    else:
        store[f"{name}.w"] = rng.normal(0.0, 1.0 / np.sqrt(din), size=(din, dout))
    if bias:
        store[f"{name}.b"] = np.zeros(dout)


def init_norm(store: ParamStore, name: str, dim: int) -> None:
    store[f"{name}.g"] = np.ones(dim)
    store[f"{name}.b"] = np.zeros(dim)


def init_attention(store: ParamStore, name: str, dim: int, rng: np.random.Generator,
                   kv_dim: int | None = None) -> None:
    kv_dim = dim if kv_dim is None else kv_dim
    init_linear(store, f"{name}.q", dim, dim, rng)
    init_linear(store, f"{name}.k", kv_dim, dim, rng)
    init_linear(store, f"{name}.v", kv_dim, dim, rng)
    init_linear(store, f"{name}.o", dim, dim, rng)


def init_mlp(store: ParamStore, name: str, dim: int, rng: np.random.Generator, ratio: int = 4) -> None:
    init_linear(store, f"{name}.fc1", dim, ratio * dim, rng)
    init_linear(store, f"{name}.fc2", ratio * dim, dim, rng)


def init_block(store: ParamStore, name: str, dim: int, rng: np.random.Generator) -> None:
    init_norm(store, f"{name}.ln1", dim)
    init_attention(store, f"{name}.attn", dim, rng)
    init_norm(store, f"{name}.ln2", dim)
    init_mlp(store, f"{name}.mlp", dim, rng)


def init_cross_block(store: ParamStore, name: str, dim: int, kv_dim: int, rng: np.random.Generator) -> None:
    init_norm(store, f"{name}.ln1", dim)
    init_attention(store, f"{name}.xattn", dim, rng, kv_dim=kv_dim)
    init_norm(store, f"{name}.ln2", dim)
    init_mlp(store, f"{name}.mlp", dim, rng)


def init_decoder_block(store: ParamStore, name: str, dim: int, kv_dim: int, rng: np.random.Generator) -> None:
    init_norm(store, f"{name}.ln1", dim)
    init_attention(store, f"{name}.attn", dim, rng)
    init_norm(store, f"{name}.lnx", dim)
    init_attention(store, f"{name}.xattn", dim, rng, kv_dim=kv_dim)
    init_norm(store, f"{name}.ln2", dim)
    init_mlp(store, f"{name}.mlp", dim, rng)


# ops -----------------------------------------------------------------------

def linear(x: Tensor, P: Params, name: str) -> Tensor:
    out = x @ P[f"{name}.w"]
    b = P.get(f"{name}.b")
    return out if b is None else out + b


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise ValueError(f"layer_norm width mismatch: {x.shape} vs {gamma.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / T.sqrt(var + eps) * gamma + beta


def norm(x: Tensor, P: Params, name: str) -> Tensor:
    return layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention over the last two axes.

    ``q`` is ``[..., n, d]`` and ``k``/``v`` are ``[..., m, d]``; heads split
    ``d`` evenly. ``mask`` (broadcastable to ``[n, m]``) marks allowed pairs.
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch q={q.shape} k={k.shape} v={v.shape}")
    if q.shape[-2] < 1 or k.shape[-2] < 1:
        raise ValueError("attention needs at least one query and one key")
    dh = d // heads
    lead = q.shape[:-2]
    n, m = q.shape[-2], k.shape[-2]

    def split(t: Tensor, rows: int) -> Tensor:
        t = t.reshape(*t.shape[:-2], rows, heads, dh)
        return T.swapaxes(t, -2, -3)  # [..., h, rows, dh]

    qh, kh, vh = split(q, n), split(k, m), split(v, m)
    scores = (qh @ T.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + np.where(mask, 0.0, NEG_INF)
    weights = T.softmax(scores, axis=-1)
    out = T.swapaxes(weights @ vh, -2, -3)
    return out.reshape(*lead, n, d)


def mha(x: Tensor, ctx: Tensor, P: Params, name: str, heads: int, causal: bool = False) -> Tensor:
    q = linear(x, P, f"{name}.q")
    k = linear(ctx, P, f"{name}.k")
    v = linear(ctx, P, f"{name}.v")
    mask = None
    if causal:
        n, m = x.shape[-2], ctx.shape[-2]
        mask = np.tril(np.ones((n, m), dtype=bool))
    return linear(attention(q, k, v, heads, mask), P, f"{name}.o")


def mlp(x: Tensor, P: Params, name: str) -> Tensor:
    return linear(T.gelu(linear(x, P, f"{name}.fc1")), P, f"{name}.fc2")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; a no-op when ``rng`` is None (eval mode) or rate is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


def drop_path(branch: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Per-sample residual-branch dropout along the leading axis."""
    if rng is None or rate <= 0.0:
        return branch
    shape = (branch.shape[0],) + (1,) * (branch.ndim - 1)
    keep = rng.random(shape) >= rate
    return branch * (keep / (1.0 - rate))


def block(x: Tensor, P: Params, name: str, heads: int, causal: bool = False,
          drop_path_rate: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    h = norm(x, P, f"{name}.ln1")
    x = x + drop_path(mha(h, h, P, f"{name}.attn", heads, causal), drop_path_rate, rng)
    x = x + drop_path(mlp(norm(x, P, f"{name}.ln2"), P, f"{name}.mlp"), drop_path_rate, rng)
    return x


def cross_block(x: Tensor, ctx: Tensor, P: Params, name: str, heads: int) -> Tensor:
    x = x + mha(norm(x, P, f"{name}.ln1"), ctx, P, f"{name}.xattn", heads)
    return x + mlp(norm(x, P, f"{name}.ln2"), P, f"{name}.mlp")


def decoder_block(x: Tensor, ctx: Tensor, P: Params, name: str, heads: int) -> Tensor:
    h = norm(x, P, f"{name}.ln1")
    x = x + mha(h, h, P, f"{name}.attn", heads, causal=True)
    x = x + mha(norm(x, P, f"{name}.lnx"), ctx, P, f"{name}.xattn", heads)
    return x + mlp(norm(x, P, f"{name}.ln2"), P, f"{name}.mlp")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    return x / T.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)


def block_depth(name: str, marker: str) -> int | None:
    """Index ``i`` from a name containing ``{marker}.{i}.``, else None."""
    key = f"{marker}."
    pos = name.find(key)
    if pos < 0:
        return None
    rest = name[pos + len(key):]
    head = rest.split(".", 1)[0]
    return int(head) if head.isdigit() else None
