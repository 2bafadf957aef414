"""Graph-aware multi-head self-attention sublayers.

``GrMsa`` adds learned vectors, looked up by clamped signed tree distance, to
keys and values. ``KogMsa`` computes one score matrix per head, then masks it
once per neighbour order 0..K, re-projects each order's result with its own
matrix and sums them with learned scalar weights.

Both take features shaped ``(batch, l, d)``; a 2-D ``(l, d)`` input is
treated as a batch of one and returned 2-D.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .graph import OrderMaskSet, RelativeIndexMap, relative_table_size
from .nn import Module
from .tensor import Tensor


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, l, d = x.shape
    return T.transpose(T.reshape(x, (B, l, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, l, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, l, h * dh))


def _batched(x: Tensor):
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"attention expects (l, d) or (batch, l, d), got {x.shape}")
    return x, False


class GrMsa(Module):
    def __init__(self, dim: int, heads: int, delta: int, directed: bool,
                 rng: np.random.Generator, dropout: float = 0.0, dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
        self.w_q = T.parameter(T.init_uniform(rng, (dim, dim), dim, dim, dtype))
        self.w_k = T.parameter(T.init_uniform(rng, (dim, dim), dim, dim, dtype))
        self.w_v = T.parameter(T.init_uniform(rng, (dim, dim), dim, dim, dtype))
        rows = relative_table_size(delta, directed)
        dh = dim // heads
        # one (rows, d) table; head h owns columns h*dh:(h+1)*dh
        self.pos_k = T.parameter(T.init_uniform(rng, (rows, dim), rows, dh, dtype))
        self.pos_v = T.parameter(T.init_uniform(rng, (rows, dim), rows, dh, dtype))
        self._heads = heads
        self._delta = delta
        self._directed = directed
        self._dropout = dropout

    def __call__(self, x: Tensor, idx: RelativeIndexMap, train: bool = False, rng=None) -> Tensor:
        return gr_msa_forward(x, idx, self, train, rng)


def gr_msa_forward(x: Tensor, idx: RelativeIndexMap, params: GrMsa,
                   train: bool = False, rng=None) -> Tensor:
    x, squeeze = _batched(x)
    B, l, d = x.shape
    if idx.indices.shape != (l, l):
        raise ShapeError(f"gr-msa: index map is {idx.indices.shape} but input has {l} nodes")
    if idx.table_size != params.pos_k.shape[0]:
        raise ShapeError(f"gr-msa: index map needs {idx.table_size} table rows, "
                         f"params have {params.pos_k.shape[0]}")
    h = params._heads
    dh = d // h
    q = _split_heads(T.linear(x, params.w_q), h)
    k = _split_heads(T.linear(x, params.w_k), h)
    v = _split_heads(T.linear(x, params.w_v), h)

    # per-pair encodings, (l, l, heads, dh)
    ek = T.reshape(T.gather_rows(params.pos_k, idx.indices), (l, l, h, dh))
    ev = T.reshape(T.gather_rows(params.pos_v, idx.indices), (l, l, h, dh))

    # query-node-major layouts so the encoding terms are plain batched matmuls
    q_m = T.transpose(q, (2, 1, 0, 3))                                 # (l, h, B, dh)
    rel = T.bmm(q_m, T.transpose(ek, (0, 2, 3, 1)))                    # (l, h, B, l)
    s = T.bmm(q, T.transpose(k)) + T.transpose(rel, (2, 1, 0, 3))
    a = T.softmax(T.scale(s, 1.0 / math.sqrt(dh)))
    a = T.dropout(a, params._dropout, train, rng)
    a_m = T.transpose(a, (2, 1, 0, 3))                                 # (l, h, B, l)
    rel_v = T.bmm(a_m, T.transpose(ev, (0, 2, 1, 3)))                  # (l, h, B, dh)
    out = T.bmm(a, v) + T.transpose(rel_v, (2, 1, 0, 3))
    out = _merge_heads(out)
    return T.reshape(out, (l, d)) if squeeze else out


class KogMsa(Module):
    def __init__(self, dim: int, heads: int, order: int, rng: np.random.Generator,
                 dropout: float = 0.0, dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
        self.w_q = T.parameter(T.init_uniform(rng, (dim, dim), dim, dim, dtype))
        self.w_k = T.parameter(T.init_uniform(rng, (dim, dim), dim, dim, dtype))
        self.w_v = T.parameter(T.init_uniform(rng, (dim, dim), dim, dim, dtype))
        # W_0..W_K stacked on the leading axis
        self.w_orders = T.parameter(T.init_uniform(rng, (order + 1, dim, dim), dim, dim, dtype))
        self.c = T.parameter(np.full(order + 1, 1.0 / (order + 1), dtype=dtype))
        self._heads = heads
        self._order = order
        self._dropout = dropout

    @property
    def order(self) -> int:
        return self._order

    def __call__(self, x: Tensor, masks: OrderMaskSet, train: bool = False, rng=None) -> Tensor:
        return kog_msa_forward(x, masks, self, train, rng)

    def order_features(self, x: Tensor, masks: OrderMaskSet, train: bool = False, rng=None) -> Tensor:
        """Re-projected per-order features F'_i, shaped (K+1, batch, l, d)."""
        x, _ = _batched(x)
        if masks.order != self._order:
            raise ConfigError(f"kog-msa: masks built for K={masks.order}, layer has K={self._order}")
        B, l, d = x.shape
        if masks.allowed.shape[1:] != (l, l):
            raise ShapeError(f"kog-msa: masks are for {masks.allowed.shape[1]} nodes, input has {l}")
        h = self._heads
        dh = d // h
        q = _split_heads(T.linear(x, self.w_q), h)
        k = _split_heads(T.linear(x, self.w_k), h)
        v = _split_heads(T.linear(x, self.w_v), h)
        s = T.bmm(q, T.transpose(k))                                  # (B, h, l, l), shared
        # per-order masked softmax, (B, h, K+1, l, l); orders partition each row
        a = T.masked_softmax_stack(T.scale(s, 1.0 / math.sqrt(dh)), masks.allowed)
        a = T.dropout(a, self._dropout, train, rng)
        K1 = self._order + 1
        f = T.bmm(T.reshape(a, (B, h, K1 * l, l)), v)                 # (B, h, K+1 * l, dh)
        f = T.transpose(T.reshape(f, (B, h, K1, l, dh)), (2, 0, 3, 1, 4))
        f = T.reshape(f, (K1, B * l, d))                              # heads concatenated
        return T.reshape(T.bmm(f, self.w_orders), (K1, B, l, d))


def kog_msa_forward(x: Tensor, masks: OrderMaskSet, params: KogMsa,
                    train: bool = False, rng=None) -> Tensor:
    squeeze = x.ndim == 2
    fp = params.order_features(x, masks, train, rng)
    K1, B, l, d = fp.shape
    out = T.matmul(T.reshape(params.c, (1, K1)), T.reshape(fp, (K1, B * l * d)))
    return T.reshape(out, (l, d) if squeeze else (B, l, d))
