"""KOG-Transformer (2D joints -> 3D joints) and GASE-Net (3D joints -> mesh)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .attention import GrMsa, KogMsa
from .errors import ConfigError, ShapeError
from .graph import (ScaledLaplacian, SkeletonGraph, build_order_masks, build_relative_index_map,
                    build_scaled_laplacian, build_signed_distance, relative_table_size)
from .nn import LayerNorm, Linear, Mlp, Module
from .tensor import Tensor


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {unknown}")
    kw = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        val = d[f.name]
        default = getattr(cls(), f.name)
        if isinstance(default, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{f.name} must be a boolean, got {val!r}")
        elif isinstance(default, int):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"{f.name} must be an integer, got {val!r}")
        elif isinstance(default, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{f.name} must be a number, got {val!r}")
            val = float(val)
        elif isinstance(default, tuple):
            val = tuple(val)
        kw[f.name] = val
    return cls(**kw)


@dataclass(frozen=True)
class KogTransformerConfig:
    num_layers: int = 5
    dim: int = 128
    heads: int = 4
    order: int = 4
    delta: int = 2
    directed: bool = True
    dropout: float = 0.1
    num_joints: int = 16
    in_dim: int = 2
    out_dim: int = 3
    mlp_ratio: int = 2
    activation: str = "gelu_tanh"
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.order < 0:
            raise ConfigError("order must be >= 0")
        if self.delta < 1:
            raise ConfigError("delta must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.precision not in T.DTYPES:
            raise ConfigError(f"precision must be one of {sorted(T.DTYPES)}")

    kind = "kog"

    @classmethod
    def mini(cls, **kw) -> "KogTransformerConfig":
        return cls(**{"dim": 64, "order": 5, **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "KogTransformerConfig":
        return _from_dict(cls, d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GaseNetConfig:
    dim: int = 32
    dropout: float = 0.2
    num_joints: int = 21
    schedule: tuple[int, ...] = (21, 48, 96, 192, 389, 778)
    cheb_order: int = 2
    precision: str = "f32"
    seed: int = 0

    kind = "gase"

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(int(s) for s in self.schedule))
        s = self.schedule
        if len(s) != 6:
            raise ConfigError(f"schedule needs 6 node counts (5 blocks), got {len(s)}")
        if s[0] != self.num_joints:
            raise ConfigError(f"schedule must start at the joint count {self.num_joints}, got {s[0]}")
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ConfigError(f"schedule must be strictly increasing, got {list(s)}")
        if self.cheb_order < 1:
            raise ConfigError("cheb_order must be >= 1")
        if self.precision not in T.DTYPES:
            raise ConfigError(f"precision must be one of {sorted(T.DTYPES)}")

    @property
    def num_vertices(self) -> int:
        return self.schedule[-1]

    @classmethod
    def from_dict(cls, d: dict) -> "GaseNetConfig":
        return _from_dict(cls, d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = list(self.schedule)
        return d


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "kog")
    if kind == "kog":
        return KogTransformerConfig.from_dict(d)
    if kind == "gase":
        return GaseNetConfig.from_dict(d)
    raise ConfigError(f"unknown model kind {kind!r}")


def config_to_dict(cfg) -> dict:
    return {"kind": cfg.kind, **cfg.to_dict()}


def kog_param_count(cfg: KogTransformerConfig) -> int:
    """Closed-form parameter total of ``KogTransformer(cfg)``.

    Per layer: two KOG-MSA sublayers of (3 + K+1) d^2 weights plus K+1 fusion
    scalars, one GR-MSA with 3 d^2 weights plus two (table rows x d) tables,
    an MLP d -> r d -> d with biases, and four layer norms (2d each). Around the
    stack: input linear, final layer norm, output linear.
    """
    d, K, r = cfg.dim, cfg.order, cfg.mlp_ratio
    rows = relative_table_size(cfg.delta, cfg.directed)
    kog = (3 + K + 1) * d * d + (K + 1)
    gr = 3 * d * d + 2 * rows * d
    mlp = d * r * d + r * d + r * d * d + d
    norms = 4 * 2 * d
    per_layer = 2 * kog + gr + mlp + norms
    io = (cfg.in_dim * d + d) + 2 * d + (d * cfg.out_dim + cfg.out_dim)
    return cfg.num_layers * per_layer + io


class KogLayer(Module):
    def __init__(self, cfg: KogTransformerConfig, rng, dtype):
        d = cfg.dim
        self.norm1 = LayerNorm(d, dtype)
        self.kog1 = KogMsa(d, cfg.heads, cfg.order, rng, cfg.dropout, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.kog2 = KogMsa(d, cfg.heads, cfg.order, rng, cfg.dropout, dtype)
        self.norm3 = LayerNorm(d, dtype)
        self.gr = GrMsa(d, cfg.heads, cfg.delta, cfg.directed, rng, cfg.dropout, dtype)
        self.norm4 = LayerNorm(d, dtype)
        self.mlp = Mlp(d, cfg.mlp_ratio * d, rng, cfg.dropout, dtype)
        self._dropout = cfg.dropout

    def __call__(self, x, masks, idx, train=False, rng=None):
        p = self._dropout
        x = x + T.dropout(self.kog1(self.norm1(x), masks, train, rng), p, train, rng)
        x = x + T.dropout(self.kog2(self.norm2(x), masks, train, rng), p, train, rng)
        x = x + T.dropout(self.gr(self.norm3(x), idx, train, rng), p, train, rng)
        x = x + T.dropout(self.mlp(self.norm4(x), train, rng), p, train, rng)
        return x


class KogTransformer(Module):
    def __init__(self, cfg: KogTransformerConfig, skeleton: SkeletonGraph):
        if skeleton.num_nodes != cfg.num_joints:
            raise ShapeError(f"skeleton has {skeleton.num_nodes} nodes, config expects {cfg.num_joints}")
        self._cfg = cfg
        self._skeleton = skeleton
        dtype = T.DTYPES[cfg.precision]
        rng = T.seeded_rng(cfg.seed)
        self._masks = build_order_masks(skeleton, cfg.order)
        self._idx = build_relative_index_map(build_signed_distance(skeleton), cfg.delta, cfg.directed)
        self.input = Linear(cfg.in_dim, cfg.dim, rng, dtype)
        self.layers = [KogLayer(cfg, rng, dtype) for _ in range(cfg.num_layers)]
        self.norm = LayerNorm(cfg.dim, dtype)
        self.output = Linear(cfg.dim, cfg.out_dim, rng, dtype)
        self._dropout_rng = T.seeded_rng([cfg.seed, 1])

    @property
    def config(self) -> KogTransformerConfig:
        return self._cfg

    @property
    def skeleton(self) -> SkeletonGraph:
        return self._skeleton

    @property
    def dtype(self):
        return T.DTYPES[self._cfg.precision]

    def __call__(self, pose2d, train: bool = False, rng=None) -> Tensor:
        return kog_transformer_forward(self, pose2d, train, rng)

    def kog_modules(self) -> list[tuple[str, KogMsa]]:
        """Every KOG-MSA instance labelled ``layer-sublayer`` (1-based)."""
        out = []
        for i, layer in enumerate(self.layers, 1):
            out += [(f"{i}-1", layer.kog1), (f"{i}-2", layer.kog2)]
        return out

    def fusion_weights(self) -> list[tuple[str, np.ndarray]]:
        return [(label, m.c.data.copy()) for label, m in self.kog_modules()]


def kog_transformer_forward(model: KogTransformer, pose2d, train: bool = False, rng=None) -> Tensor:
    cfg = model.config
    x = T.as_tensor(pose2d, dtype=model.dtype)
    if x.ndim != 3 or x.shape[1:] != (cfg.num_joints, cfg.in_dim):
        raise ShapeError(f"expected input (batch, {cfg.num_joints}, {cfg.in_dim}), got {x.shape}")
    if train and rng is None:
        rng = model._dropout_rng
    h = model.input(x)
    for layer in model.layers:
        h = layer(h, model._masks, model._idx, train, rng)
    return model.output(model.norm(h))


# ---------------------------------------------------------------------------
# GASE-Net pieces

def chebyshev_conv(x: Tensor, L: ScaledLaplacian, order: int, theta: Tensor,
                   bias: Tensor | None = None) -> Tensor:
    """``sum_k T_k(L) x theta_k + bias`` for x shaped (l, d_in) or (batch, l, d_in)."""
    if order < 1:
        raise ConfigError("chebyshev order must be >= 1")
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    l = x.shape[1]
    if L.entries.shape != (l, l):
        raise ShapeError(f"laplacian is {L.entries.shape} but input has {l} nodes")
    if theta.shape[0] != order or theta.shape[1] != x.shape[-1]:
        raise ShapeError(f"theta {theta.shape} does not fit order {order}, input dim {x.shape[-1]}")
    Lt = T.Tensor(L.entries.astype(x.dtype))
    terms = [x]
    if order > 1:
        terms.append(T.node_matmul(Lt, x))
    for _ in range(2, order):
        nxt = T.scale(T.node_matmul(Lt, terms[-1]), 2.0) - terms[-2]
        terms.append(nxt)
    y = None
    for tk, wk in zip(terms, T.split(theta, [1] * order, axis=0)):
        yk = T.linear(tk, T.reshape(wk, theta.shape[1:]))
        y = yk if y is None else y + yk
    if bias is not None:
        y = T.add_bias(y, bias)
    return T.reshape(y, y.shape[1:]) if squeeze else y


class ChebConv(Module):
    def __init__(self, in_dim: int, out_dim: int, order: int, rng, dtype=np.float32):
        self.theta = T.parameter(T.init_uniform(rng, (order, in_dim, out_dim), in_dim, out_dim, dtype))
        self.bias = T.parameter(np.zeros(out_dim, dtype=dtype))
        self._order = order

    def __call__(self, x: Tensor, L: ScaledLaplacian) -> Tensor:
        return chebyshev_conv(x, L, self._order, self.theta, self.bias)


class GraAttention(Module):
    """Pre-norm residual self-attention with a learnable (nodes x nodes) score bias."""

    def __init__(self, dim: int, nodes: int, rng, dropout: float = 0.0, dtype=np.float32):
        self.norm = LayerNorm(dim, dtype)
        self.w_q = T.parameter(T.init_uniform(rng, (dim, dim), dim, dim, dtype))
        self.w_k = T.parameter(T.init_uniform(rng, (dim, dim), dim, dim, dtype))
        self.w_v = T.parameter(T.init_uniform(rng, (dim, dim), dim, dim, dtype))
        self.adj_bias = T.parameter(np.zeros((nodes, nodes), dtype=dtype))
        self._dropout = dropout
        self._nodes = nodes

    def __call__(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        return gra_attention_forward(x, self, train, rng)


def gra_attention_forward(x: Tensor, params: GraAttention, train: bool = False, rng=None) -> Tensor:
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[1] != params._nodes:
        raise ShapeError(f"GraAttention built for {params._nodes} nodes, input has {x.shape[1]}")
    d = x.shape[-1]
    h = params.norm(x)
    q = T.linear(h, params.w_q)
    k = T.linear(h, params.w_k)
    v = T.linear(h, params.w_v)
    s = T.masked_add(T.scale(T.bmm(q, T.transpose(k)), 1.0 / math.sqrt(d)), params.adj_bias)
    a = T.dropout(T.softmax(s), params._dropout, train, rng)
    y = x + T.dropout(T.bmm(a, v), params._dropout, train, rng)
    return T.reshape(y, y.shape[1:]) if squeeze else y


def upsample_nodes(x: Tensor, weights: Tensor) -> Tensor:
    """Map (…, l_in, d) to (…, l_out, d) with a learned (l_out, l_in) node-mixing matrix."""
    l_out, l_in = weights.shape
    if l_out <= l_in:
        raise ConfigError(f"upsampling must increase the node count, got {l_in} -> {l_out}")
    if x.shape[-2] != l_in:
        raise ShapeError(f"upsample expects {l_in} nodes, got {x.shape[-2]}")
    return T.node_matmul(weights, x)


class Upsample(Module):
    def __init__(self, l_in: int, l_out: int, rng, dtype=np.float32):
        if l_out <= l_in:
            raise ConfigError(f"upsampling must increase the node count, got {l_in} -> {l_out}")
        self.weight = T.parameter(T.init_uniform(rng, (l_out, l_in), l_in, l_out, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return upsample_nodes(x, self.weight)


class GaseNet(Module):
    def __init__(self, cfg: GaseNetConfig, skeleton: SkeletonGraph):
        if skeleton.num_nodes != cfg.num_joints:
            raise ShapeError(f"skeleton has {skeleton.num_nodes} nodes, config expects {cfg.num_joints}")
        self._cfg = cfg
        self._skeleton = skeleton
        dtype = T.DTYPES[cfg.precision]
        rng = T.seeded_rng(cfg.seed)
        self._laplacian = build_scaled_laplacian(skeleton)
        self.cheb = ChebConv(3, cfg.dim, cfg.cheb_order, rng, dtype)
        s = cfg.schedule
        self.blocks = [GraAttention(cfg.dim, s[i], rng, cfg.dropout, dtype) for i in range(5)]
        self.upsamples = [Upsample(s[i], s[i + 1], rng, dtype) for i in range(5)]
        self.output = Linear(cfg.dim, 3, rng, dtype)
        self._dropout_rng = T.seeded_rng([cfg.seed, 1])

    @property
    def config(self) -> GaseNetConfig:
        return self._cfg

    @property
    def skeleton(self) -> SkeletonGraph:
        return self._skeleton

    @property
    def dtype(self):
        return T.DTYPES[self._cfg.precision]

    def __call__(self, pose3d, train: bool = False, rng=None, trace: list | None = None) -> Tensor:
        return gase_net_forward(self, pose3d, train, rng, trace)


def gase_net_forward(model: GaseNet, pose3d, train: bool = False, rng=None,
                     trace: list | None = None) -> Tensor:
    """Pose (batch, j, 3) -> vertices (batch, v, 3). ``trace`` collects per-stage node counts."""
    cfg = model.config
    x = T.as_tensor(pose3d, dtype=model.dtype)
    if x.ndim != 3 or x.shape[1:] != (cfg.num_joints, 3):
        raise ShapeError(f"expected input (batch, {cfg.num_joints}, 3), got {x.shape}")
    if train and rng is None:
        rng = model._dropout_rng
    h = T.gelu(model.cheb(x, model._laplacian))
    for block, up in zip(model.blocks, model.upsamples):
        h = up(block(h, train, rng))
        if trace is not None:
            trace.append(h.shape[1])
    return model.output(h)


def build_model(cfg, skeleton: SkeletonGraph):
    if isinstance(cfg, KogTransformerConfig):
        return KogTransformer(cfg, skeleton)
    if isinstance(cfg, GaseNetConfig):
        return GaseNet(cfg, skeleton)
    raise ConfigError(f"unsupported config type {type(cfg).__name__}")
