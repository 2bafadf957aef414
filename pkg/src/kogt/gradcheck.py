"""Central finite-difference validation of every differentiable primitive and layer.

All checks run in float64. Each case builds a scalar loss as a fixed random
projection of the op's output, compares the tape gradient of every input
against central differences, and reports the norm-wise relative error
``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import GrMsa, KogMsa
from .graph import (SkeletonGraph, build_order_masks, build_relative_index_map,
                    build_scaled_laplacian, build_signed_distance)
from .nn import Module

EPS = 1e-5
RTOL = 1e-4
# gradients smaller than this are structurally zero; FD round-off is ~1e-11
FLOOR = 1e-6

# a case builder takes an rng and returns (forward, inputs): forward maps the
# list of input Tensors to an output Tensor
Builder = Callable[[np.random.Generator], tuple[Callable[[list], T.Tensor], list[np.ndarray]]]


@dataclass
class CaseResult:
    name: str
    instance: int
    rel_error: float
    passed: bool


@dataclass
class GradcheckReport:
    results: list[CaseResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> list[CaseResult]:
        return [r for r in self.results if not r.passed]

    def summary(self) -> dict[str, dict]:
        out: dict[str, dict] = {}
        for r in self.results:
            s = out.setdefault(r.name, {"instances": 0, "max_rel_error": 0.0, "passed": True})
            s["instances"] += 1
            s["max_rel_error"] = max(s["max_rel_error"], r.rel_error)
            s["passed"] &= r.passed
        return out


def rel_error(a: np.ndarray, n: np.ndarray, floor: float = FLOOR) -> float:
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def check_function(forward: Callable[[list], T.Tensor], inputs: list[np.ndarray],
                   rng: np.random.Generator, eps: float = EPS) -> float:
    """Worst relative error over all inputs of ``forward``."""
    leaves = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    out = forward(leaves)
    # masked sentinel entries carry no useful signal and overflow the loss
    proj = T.Tensor(np.where(np.abs(out.data) < 1e100, rng.normal(size=out.shape), 0.0))

    def loss_value() -> float:
        return float((forward(leaves).data * proj.data).sum())

    loss = T.sum(T.mul(out, proj))
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss_value()
            flat[i] = old - eps
            down = loss_value()
            flat[i] = old
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def check_module(module: Module, forward: Callable[[T.Tensor], T.Tensor], x: np.ndarray,
                 rng: np.random.Generator, eps: float = EPS) -> float:
    """Like ``check_function`` but over the input and every parameter of ``module``."""
    params = [p for _, p in module.named_parameters()]
    xt = T.Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = forward(xt)
    proj = np.where(np.abs(out.data) < 1e100, rng.normal(size=out.shape), 0.0)
    module.zero_grad()
    T.sum(T.mul(out, T.Tensor(proj))).backward()
    worst = 0.0
    for leaf in [xt] + params:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = float((forward(xt).data * proj).sum())
            flat[i] = old - eps
            down = float((forward(xt).data * proj).sum())
            flat[i] = old
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


# ---------------------------------------------------------------------------
# random instances


def _dims(rng, n, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))


def random_tree(rng: np.random.Generator, l: int) -> SkeletonGraph:
    """Uniform-attachment random tree on ``l`` nodes with shuffled labels."""
    perm = rng.permutation(l)
    edges = [(int(perm[i]), int(perm[rng.integers(0, i)])) for i in range(1, l)]
    return SkeletonGraph(l, tuple(edges))


def _mask_dims(rng):
    return int(rng.integers(1, 4)), int(rng.integers(3, 8))


def _order_masks(rng, l, K):
    return build_order_masks(random_tree(rng, l), K)


def primitive_builders() -> dict[str, Builder]:
    def matmul(rng):
        m, k, n = _dims(rng, 3)
        return (lambda t: T.matmul(t[0], t[1])), [rng.normal(size=(m, k)), rng.normal(size=(k, n))]

    def bmm(rng):
        b, c, m, k, n = _dims(rng, 5, hi=3)
        return (lambda t: T.bmm(t[0], t[1])), [rng.normal(size=(b, c, m, k)), rng.normal(size=(b, c, k, n))]

    def node_matmul(rng):
        o, i, b, d = _dims(rng, 4)
        return (lambda t: T.node_matmul(t[0], t[1])), [rng.normal(size=(o, i)), rng.normal(size=(b, i, d))]

    def einsum(rng):
        b, m, n, d = _dims(rng, 4)
        return (lambda t: T.einsum("bmd,mnd->bmn", t[0], t[1])), [rng.normal(size=(b, m, d)),
                                                                   rng.normal(size=(m, n, d))]

    def linear(rng):
        b, l, i, o = _dims(rng, 4)
        return (lambda t: T.linear(t[0], t[1], t[2])), [rng.normal(size=(b, l, i)),
                                                        rng.normal(size=(i, o)), rng.normal(size=o)]

    def transpose(rng):
        shape = _dims(rng, 4)
        axes = tuple(int(a) for a in rng.permutation(4))
        return (lambda t: T.transpose(t[0], axes)), [rng.normal(size=shape)]

    def reshape(rng):
        a, b, c = _dims(rng, 3)
        return (lambda t: T.reshape(t[0], (c, a * b))), [rng.normal(size=(a, b, c))]

    def add(rng):
        s = _dims(rng, 3)
        return (lambda t: T.add(t[0], t[1])), [rng.normal(size=s), rng.normal(size=s)]

    def subtract(rng):
        s = _dims(rng, 3)
        return (lambda t: T.sub(t[0], t[1])), [rng.normal(size=s), rng.normal(size=s)]

    def scalar_multiply(rng):
        s, c = _dims(rng, 3), float(rng.normal())
        return (lambda t: T.scale(t[0], c)), [rng.normal(size=s)]

    def elementwise_multiply(rng):
        s = _dims(rng, 3)
        return (lambda t: T.mul(t[0], t[1])), [rng.normal(size=s), rng.normal(size=s)]

    def add_bias(rng):
        s = _dims(rng, 3)
        return (lambda t: T.add_bias(t[0], t[1])), [rng.normal(size=s), rng.normal(size=s[-1:])]

    def masked_add(rng):
        b, l = _dims(rng, 2, hi=5)
        return (lambda t: T.masked_add(t[0], t[1])), [rng.normal(size=(b, l, l)), rng.normal(size=(l, l))]

    def masked_add_stack(rng):
        b, l = _mask_dims(rng)
        masks = _order_masks(rng, l, int(rng.integers(1, 4))).additive(np.float64)
        return (lambda t: T.masked_add_stack(t[0], masks)), [rng.normal(size=(b, l, l))]

    def row_softmax(rng):
        s = _dims(rng, 3)
        return (lambda t: T.softmax(t[0])), [rng.normal(size=s)]

    def masked_softmax(rng):
        b, l = _mask_dims(rng)
        masks = _order_masks(rng, l, int(rng.integers(1, 5)))
        add = masks.additive(np.float64)
        return (lambda t: T.softmax(T.masked_add_stack(t[0], add))), [rng.normal(size=(b, l, l))]

    def masked_softmax_stack(rng):
        b, l = _mask_dims(rng)
        allowed = _order_masks(rng, l, int(rng.integers(1, 5))).allowed
        return (lambda t: T.masked_softmax_stack(t[0], allowed)), [rng.normal(size=(b, l, l))]

    def gather_rows(rng):
        r, d, n = _dims(rng, 3, hi=5)
        idx = rng.integers(0, r, size=(n, 2))
        return (lambda t: T.gather_rows(t[0], idx)), [rng.normal(size=(r, d))]

    def scatter_add(rng):
        r, d, n = _dims(rng, 3, hi=5)
        idx = rng.integers(0, r, size=n)
        return (lambda t: T.scatter_add(t[0], idx, r)), [rng.normal(size=(n, d))]

    def layer_normalize(rng):
        s = _dims(rng, 2) + (int(rng.integers(2, 6)),)
        return (lambda t: T.layer_norm(t[0], t[1], t[2])), [rng.normal(size=s), rng.normal(size=s[-1:]),
                                                            rng.normal(size=s[-1:])]

    def gelu(rng):
        return (lambda t: T.gelu(t[0])), [rng.normal(size=_dims(rng, 3))]

    def dropout(rng):
        s = _dims(rng, 3)
        rate = float(rng.uniform(0.1, 0.5))
        seed = int(rng.integers(1 << 30))
        # same mask on every evaluation
        return (lambda t: T.dropout(t[0], rate, True, T.seeded_rng(seed))), [rng.normal(size=s)]

    def concat(rng):
        a, b, c1, c2 = _dims(rng, 4)
        return (lambda t: T.concat([t[0], t[1]], axis=-1)), [rng.normal(size=(a, b, c1)),
                                                            rng.normal(size=(a, b, c2))]

    def split(rng):
        a, c1, c2 = _dims(rng, 3)
        return (lambda t: T.concat(T.split(t[0], [c1, c2])[::-1])), [rng.normal(size=(a, c1 + c2))]

    def mean(rng):
        return (lambda t: T.mean(t[0])), [rng.normal(size=_dims(rng, 3))]

    def sum_(rng):
        return (lambda t: T.sum(t[0])), [rng.normal(size=_dims(rng, 3))]

    def squared_error(rng):
        s = _dims(rng, 3)
        return (lambda t: T.squared_error(t[0], t[1])), [rng.normal(size=s), rng.normal(size=s)]

    return {
        "matmul": matmul, "batched_matmul": bmm, "node_matmul": node_matmul, "einsum": einsum,
        "linear": linear, "transpose": transpose, "reshape": reshape, "add": add,
        "subtract": subtract, "scalar_multiply": scalar_multiply,
        "elementwise_multiply": elementwise_multiply, "add_bias": add_bias,
        "masked_add": masked_add, "masked_add_stack": masked_add_stack,
        "row_softmax": row_softmax, "masked_row_softmax": masked_softmax,
        "masked_softmax_stack": masked_softmax_stack, "gather_rows": gather_rows,
        "scatter_add": scatter_add, "layer_normalize": layer_normalize, "gelu": gelu,
        "dropout": dropout, "concat": concat, "split": split, "mean": mean, "sum": sum_,
        "squared_error_reduce": squared_error,
    }


def _attention_dims(rng):
    heads = int(rng.choice([1, 2]))
    d = heads * int(rng.integers(1, 9 // heads + 1))
    d = min(d, 16)
    return int(rng.integers(1, 9)), d, heads


def check_gr_msa(rng: np.random.Generator) -> float:
    l, d, heads = _attention_dims(rng)
    delta = int(rng.integers(1, 4))
    directed = bool(rng.integers(0, 2))
    idx = build_relative_index_map(build_signed_distance(random_tree(rng, l)), delta, directed)
    layer = GrMsa(d, heads, delta, directed, rng, dtype=np.float64)
    x = rng.normal(size=(int(rng.integers(1, 3)), l, d))
    return check_module(layer, lambda t: layer(t, idx), x, rng)


def check_kog_msa(rng: np.random.Generator) -> float:
    l, d, heads = _attention_dims(rng)
    K = int(rng.integers(0, 4))
    masks = build_order_masks(random_tree(rng, l), K)
    layer = KogMsa(d, heads, K, rng, dtype=np.float64)
    x = rng.normal(size=(int(rng.integers(1, 3)), l, d))
    return check_module(layer, lambda t: layer(t, masks), x, rng)


def check_tiny_kog_transformer(rng: np.random.Generator) -> float:
    from .models import KogTransformer, KogTransformerConfig

    chain = SkeletonGraph(5, tuple((i, i + 1) for i in range(4)))
    cfg = KogTransformerConfig(num_layers=1, dim=8, heads=2, order=2, delta=2, num_joints=5,
                               dropout=0.0, precision="f64", seed=int(rng.integers(1 << 30)))
    model = KogTransformer(cfg, chain)
    x = rng.normal(size=(2, 5, 2))
    return check_module(model, lambda t: model(t), x, rng)


def check_tiny_gase_net(rng: np.random.Generator) -> float:
    from .models import GaseNet, GaseNetConfig

    tree = random_tree(rng, 4)
    cfg = GaseNetConfig(dim=4, dropout=0.0, num_joints=4, schedule=(4, 5, 6, 7, 8, 9),
                        precision="f64", seed=int(rng.integers(1 << 30)))
    model = GaseNet(cfg, tree)
    x = rng.normal(size=(2, 4, 3))
    return check_module(model, lambda t: model(t), x, rng)


def run_suite(instances: int = 20, seed: int = 0, builders: dict[str, Builder] | None = None,
              include_layers: bool = True, include_models: bool = True,
              rtol: float = RTOL) -> GradcheckReport:
    t0 = time.perf_counter()
    report = GradcheckReport()
    builders = primitive_builders() if builders is None else builders
    cases: list[tuple[str, Callable[[np.random.Generator], float]]] = []
    for name, build in builders.items():
        def run(rng, build=build):
            fwd, inputs = build(rng)
            return check_function(fwd, inputs, rng)
        cases.append((name, run))
    if include_layers:
        cases += [("gr_msa", check_gr_msa), ("kog_msa", check_kog_msa)]
    for name, run in cases:
        for i in range(instances):
            rng = T.seeded_rng([seed, i, sum(map(ord, name))])
            err = run(rng)
            report.results.append(CaseResult(name, i, err, bool(err <= rtol)))
    if include_models:
        for name, run in (("kog_transformer_tiny", check_tiny_kog_transformer),
                          ("gase_net_tiny", check_tiny_gase_net)):
            err = run(T.seeded_rng([seed, sum(map(ord, name))]))
            report.results.append(CaseResult(name, 0, err, bool(err <= rtol)))
    report.seconds = time.perf_counter() - t0
    return report
