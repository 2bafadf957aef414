"""Layers, Adam and learning-rate schedules shared by both models."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, GradientContractError, ShapeError
from .tensor import Tensor


class Module:
    """Parameter container; sub-modules and parameters are discovered by attribute."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        unknown = sorted(set(state) - set(own))
        missing = sorted(set(own) - set(state))
        bad = [f"{n}: expected {own[n].shape}, got {tuple(state[n].shape)}"
               for n in sorted(set(own) & set(state)) if tuple(state[n].shape) != own[n].shape]
        if unknown or missing or bad:
            parts = []
            if unknown:
                parts.append(f"unknown parameters {unknown}")
            if missing:
                parts.append(f"missing parameters {missing}")
            if bad:
                parts.append("shape mismatch: " + "; ".join(bad))
            raise ShapeError("cannot load state: " + ", ".join(parts))
        for n, p in own.items():
            p.data = np.array(state[n], dtype=p.dtype, copy=True)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float32, bias: bool = True):
        self.weight = T.parameter(T.init_uniform(rng, (in_dim, out_dim), in_dim, out_dim, dtype))
        self.bias = T.parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = T.parameter(np.ones(dim, dtype=dtype))
        self.beta = T.parameter(np.zeros(dim, dtype=dtype))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


class Mlp(Module):
    """d -> hidden -> d feed-forward sublayer with GELU."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 dropout: float = 0.0, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)
        self._dropout = dropout
        self._dim = dim

    def __call__(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        if x.shape[-1] != self._dim:
            raise ShapeError(f"mlp: expected last dim {self._dim}, got {x.shape[-1]}")
        h = T.gelu(self.fc1(x))
        h = T.dropout(h, self._dropout, train, rng)
        return self.fc2(h)


def mlp_forward(x: Tensor, mlp: Mlp, train: bool = False, rng=None) -> Tensor:
    return mlp(x, train, rng)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[tuple[str, Tensor]], state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    lr = state.lr if lr is None else lr
    for name, p in params:
        if p.grad is None:
            raise GradientContractError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - upd).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        names = [n for n, _ in params]
        if len(set(names)) != len(names) or len({id(p) for _, p in params}) != len(params):
            raise ConfigError("each parameter must be registered with the optimizer exactly once")
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, lr: float | None = None):
        adam_step(self.params, self.state, lr)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    """``base * factor ** floor(counter / interval)``; ``kind`` says what the counter counts."""

    base: float = 1e-3
    factor: float = 0.9
    interval: int = 50000
    kind: str = "step"

    def __post_init__(self):
        if not 0.0 < self.factor <= 1.0:
            raise ConfigError(f"schedule factor must be in (0, 1], got {self.factor}")
        if self.interval < 1:
            raise ConfigError(f"schedule interval must be >= 1, got {self.interval}")
        if self.kind not in ("step", "epoch"):
            raise ConfigError(f"schedule kind must be 'step' or 'epoch', got {self.kind!r}")

    def __call__(self, counter: int) -> float:
        return schedule_lr(self, counter)


def schedule_lr(schedule: LrSchedule, counter: int) -> float:
    if counter < 0:
        raise ConfigError("schedule counter must be non-negative")
    return schedule.base * schedule.factor ** math.floor(counter / schedule.interval)
