"""Structural objects derived from a skeleton tree.

Everything here is computed once per skeleton and then shared read-only by
the attention layers: signed path-length matrices, clamped relative-position
indices, per-order neighbour masks and the rescaled Laplacian used by the
Chebyshev convolution.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, GraphStructureError


def masked_value(dtype) -> float:
    """Additive sentinel standing in for -inf in attention masks."""
    return float(np.finfo(dtype).min)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SkeletonGraph:
    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    root: int = 0
    # optional rest-pose bone vectors (parent -> node, mm), used by the
    # synthetic pose generator only
    rest_offsets: np.ndarray | None = field(default=None, compare=False, repr=False)
    name: str = ""

    def __post_init__(self):
        edges = tuple(tuple(sorted((int(a), int(b)))) for a, b in self.edges)
        object.__setattr__(self, "edges", edges)
        if self.rest_offsets is not None:
            off = np.asarray(self.rest_offsets, dtype=np.float64)
            if off.shape != (self.num_nodes, 3):
                raise GraphStructureError(
                    f"rest_offsets must have shape ({self.num_nodes}, 3), got {off.shape}")
            object.__setattr__(self, "rest_offsets", _frozen(off))
        self._validate()

    def _validate(self):
        l = self.num_nodes
        if l < 1:
            raise GraphStructureError(f"num_nodes must be positive, got {l}")
        if not 0 <= self.root < l:
            raise GraphStructureError(f"root {self.root} out of range [0, {l})")
        seen = set()
        for a, b in self.edges:
            if not (0 <= a < l and 0 <= b < l):
                raise GraphStructureError(f"edge ({a}, {b}) has a node index outside [0, {l})")
            if a == b:
                raise GraphStructureError(f"self-loop on node {a}")
            if (a, b) in seen:
                raise GraphStructureError(f"duplicate edge ({a}, {b})")
            seen.add((a, b))

        # union-find: the first edge closing a loop is reported with its path
        parent = list(range(l))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for a, b in self.edges:
            ra, rb = find(a), find(b)
            if ra == rb:
                raise GraphStructureError(
                    f"cycle detected: edge ({a}, {b}) closes the loop {self._path(a, b)}")
            parent[ra] = rb
        comps: dict[int, list[int]] = {}
        for n in range(l):
            comps.setdefault(find(n), []).append(n)
        if len(comps) > 1:
            stray = sorted(comps.values(), key=lambda c: c[0])[1:]
            raise GraphStructureError(
                f"graph is disconnected; nodes {stray[0]} are unreachable from node 0")

    def _path(self, src: int, dst: int) -> list[int]:
        # path through edges accepted before the closing edge; only used for messages
        adj: dict[int, list[int]] = {n: [] for n in range(self.num_nodes)}
        for a, b in self.edges:
            if (a, b) == tuple(sorted((src, dst))):
                break
            adj[a].append(b)
            adj[b].append(a)
        prev = {src: None}
        q = deque([src])
        while q:
            n = q.popleft()
            for m in adj[n]:
                if m not in prev:
                    prev[m] = n
                    q.append(m)
        path, n = [], dst
        while n is not None:
            path.append(n)
            n = prev.get(n)
        return path[::-1] + [src]

    def adjacency(self) -> list[list[int]]:
        adj = [[] for _ in range(self.num_nodes)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return [sorted(n) for n in adj]

    def parents(self) -> list[int]:
        """Parent of every node when the tree is hung from ``root`` (-1 for the root)."""
        par = [-1] * self.num_nodes
        adj = self.adjacency()
        seen = {self.root}
        q = deque([self.root])
        while q:
            n = q.popleft()
            for m in adj[n]:
                if m not in seen:
                    seen.add(m)
                    par[m] = n
                    q.append(m)
        return par

    def bfs_order(self) -> list[int]:
        adj = self.adjacency()
        order, seen = [self.root], {self.root}
        q = deque([self.root])
        while q:
            n = q.popleft()
            for m in adj[n]:
                if m not in seen:
                    seen.add(m)
                    order.append(m)
                    q.append(m)
        return order

    def permuted(self, perm) -> "SkeletonGraph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = [int(p) for p in perm]
        offsets = None
        if self.rest_offsets is not None:
            offsets = np.zeros_like(self.rest_offsets)
            offsets[perm] = self.rest_offsets
        return SkeletonGraph(self.num_nodes, tuple((perm[a], perm[b]) for a, b in self.edges),
                             root=perm[self.root], rest_offsets=offsets, name=self.name)

    def to_dict(self) -> dict:
        d = {"num_nodes": self.num_nodes, "edges": [list(e) for e in self.edges]}
        if self.root:
            d["root"] = self.root
        if self.rest_offsets is not None:
            d["rest_offsets"] = self.rest_offsets.tolist()
        if self.name:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonGraph":
        try:
            num_nodes = int(d["num_nodes"])
            edges = [(int(a), int(b)) for a, b in d["edges"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphStructureError(f"malformed skeleton object: {exc}") from exc
        return cls(num_nodes, tuple(edges), root=int(d.get("root", 0)),
                   rest_offsets=d.get("rest_offsets"), name=str(d.get("name", "")))


def load_skeleton(path) -> SkeletonGraph:
    """Read a skeleton JSON file, or one of the bundled names (``h36m16``, ``hand21``)."""
    p = Path(path)
    if not p.exists() and str(path) in bundled_skeletons():
        text = resources.files("kogt.skeletons").joinpath(f"{path}.json").read_text("utf-8")
    else:
        text = p.read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphStructureError(f"{path}: invalid JSON ({exc})") from exc
    return SkeletonGraph.from_dict(d)


def save_skeleton(graph: SkeletonGraph, path) -> None:
    Path(path).write_text(json.dumps(graph.to_dict()) + "\n", encoding="utf-8")


def bundled_skeletons() -> list[str]:
    return sorted(r.name[:-5] for r in resources.files("kogt.skeletons").iterdir()
                  if r.name.endswith(".json"))


@dataclass(frozen=True)
class SignedDistanceMatrix:
    """Tree path lengths, negative when travelling from a smaller to a larger index."""

    entries: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.entries)

    @property
    def num_nodes(self) -> int:
        return self.entries.shape[0]

    @property
    def diameter(self) -> int:
        return int(self.magnitude.max())


def build_signed_distance(graph: SkeletonGraph) -> SignedDistanceMatrix:
    l = graph.num_nodes
    adj = graph.adjacency()
    dist = np.full((l, l), -1, dtype=np.int64)
    for src in range(l):
        row = dist[src]
        row[src] = 0
        q = deque([src])
        while q:
            n = q.popleft()
            for m in adj[n]:
                if row[m] < 0:
                    row[m] = row[n] + 1
                    q.append(m)
    sign = np.where(np.arange(l)[:, None] < np.arange(l)[None, :], -1, 1)
    return SignedDistanceMatrix(_frozen(dist * sign))


@dataclass(frozen=True)
class RelativeIndexMap:
    delta: int
    directed: bool
    indices: np.ndarray

    @property
    def table_size(self) -> int:
        return 2 * self.delta + 1 if self.directed else self.delta + 1


def relative_table_size(delta: int, directed: bool) -> int:
    return 2 * delta + 1 if directed else delta + 1


def build_relative_index_map(H: SignedDistanceMatrix, delta: int, directed: bool = True) -> RelativeIndexMap:
    if int(delta) != delta or delta < 1:
        raise ConfigError(f"delta must be an integer >= 1, got {delta!r}")
    delta = int(delta)
    if directed:
        idx = np.clip(H.entries, -delta, delta) + delta
    else:
        idx = np.minimum(H.magnitude, delta)
    return RelativeIndexMap(delta, bool(directed), _frozen(idx.astype(np.int64)))


@dataclass(frozen=True)
class OrderMaskSet:
    """Per-order neighbour masks; ``allowed[i, m, n]`` is True iff |H[m, n]| == i."""

    order: int
    allowed: np.ndarray

    def additive(self, dtype=np.float64) -> np.ndarray:
        """Stack of (order+1) additive masks: 0 where admitted, MASKED elsewhere."""
        out = np.where(self.allowed, 0.0, masked_value(dtype)).astype(dtype)
        out.setflags(write=False)
        return out

    @property
    def masks(self) -> np.ndarray:
        return self.additive(np.float64)

    def empty_rows(self) -> np.ndarray:
        """(order+1, l) flags for nodes with no neighbour of that order."""
        return ~self.allowed.any(axis=-1)


def build_order_masks(graph: SkeletonGraph, K: int) -> OrderMaskSet:
    if int(K) != K or K < 0:
        raise ConfigError(f"order K must be a non-negative integer, got {K!r}")
    mag = build_signed_distance(graph).magnitude
    allowed = mag[None, :, :] == np.arange(int(K) + 1)[:, None, None]
    return OrderMaskSet(int(K), _frozen(allowed))


@dataclass(frozen=True)
class ScaledLaplacian:
    entries: np.ndarray
    lambda_max: float


def build_scaled_laplacian(graph: SkeletonGraph) -> ScaledLaplacian:
    """Symmetric normalised Laplacian rescaled to spectrum [-1, 1] by its exact top eigenvalue."""
    l = graph.num_nodes
    A = np.zeros((l, l))
    for a, b in graph.edges:
        A[a, b] = A[b, a] = 1.0
    deg = A.sum(axis=1)
    inv_sqrt = np.divide(1.0, np.sqrt(deg), out=np.zeros(l), where=deg > 0)
    L = np.eye(l) - inv_sqrt[:, None] * A * inv_sqrt[None, :]
    lam = float(np.linalg.eigvalsh(L).max())
    L_hat = 2.0 * L / lam - np.eye(l)
    L_hat = 0.5 * (L_hat + L_hat.T)
    return ScaledLaplacian(_frozen(L_hat), lam)
