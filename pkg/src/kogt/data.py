"""Datasets, normalisation, synthetic pose/mesh generation and checkpoints."""
from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import CheckpointError, ConfigError, SchemaError
from .graph import SkeletonGraph

# ---------------------------------------------------------------------------
# samples and dataset files


@dataclass
class PoseSample:
    input: np.ndarray   # (l, 2) pixels or (l, 3) mm
    target: np.ndarray  # (l, 3) joints or (v, 3) vertices, mm

    def __post_init__(self):
        self.input = np.asarray(self.input, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.input.ndim != 2 or self.input.shape[1] not in (2, 3):
            raise SchemaError(f"input must be (nodes, 2|3), got {self.input.shape}")
        if self.target.ndim != 2 or self.target.shape[1] != 3:
            raise SchemaError(f"target must be (nodes, 3), got {self.target.shape}")
        if not (np.isfinite(self.input).all() and np.isfinite(self.target).all()):
            raise SchemaError("sample contains non-finite values")

    def to_json(self) -> str:
        return json.dumps({"input": self.input.tolist(), "target": self.target.tolist()})


def _parse_line(lineno: int, line: str, skeleton: SkeletonGraph, target_nodes: int | None) -> PoseSample:
    try:
        obj = json.loads(line)
        sample = PoseSample(obj["input"], obj["target"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"line {lineno}: malformed sample ({exc})") from exc
    l = skeleton.num_nodes
    want_t = l if target_nodes is None else target_nodes
    if sample.input.shape[0] != l:
        raise SchemaError(f"line {lineno}: input has {sample.input.shape[0]} nodes, skeleton has {l}")
    if sample.target.shape[0] != want_t:
        raise SchemaError(f"line {lineno}: target has {sample.target.shape[0]} nodes, expected {want_t}")
    return sample


def load_dataset(path, skeleton: SkeletonGraph, target_nodes: int | None = None,
                 threads: int | None = None) -> Iterator[PoseSample]:
    """Stream samples from a JSON-lines file in file order.

    ``target_nodes`` defaults to the skeleton's node count (pose targets); pass
    the vertex count for mesh targets. ``KOG_THREADS`` caps parsing threads.
    """
    if threads is None:
        threads = max(1, int(os.environ.get("KOG_THREADS", "1")))
    with open(path, encoding="utf-8") as fh:
        lines = [(i, ln) for i, ln in enumerate(fh, 1) if ln.strip()]
    if threads <= 1 or len(lines) < 256:
        for i, ln in lines:
            yield _parse_line(i, ln, skeleton, target_nodes)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield from pool.map(lambda item: _parse_line(item[0], item[1], skeleton, target_nodes), lines)


def save_dataset(samples: Iterable[PoseSample], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")
            n += 1
    return n


def stack_samples(samples: list[PoseSample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise SchemaError("dataset is empty")
    return np.stack([s.input for s in samples]), np.stack([s.target for s in samples])


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class NormalizationStats:
    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    root_index: int = 0

    def __post_init__(self):
        for name in ("input_mean", "input_std", "target_mean", "target_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        for name in ("input_std", "target_std"):
            if not (getattr(self, name) > 0).all():
                raise ConfigError(f"{name} must be positive in every coordinate, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return {"input_mean": self.input_mean.tolist(), "input_std": self.input_std.tolist(),
                "target_mean": self.target_mean.tolist(), "target_std": self.target_std.tolist(),
                "root_index": self.root_index}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(d["input_mean"], d["input_std"], d["target_mean"], d["target_std"],
                   int(d.get("root_index", 0)))


def _root_offset(inputs: np.ndarray, targets: np.ndarray, root: int) -> np.ndarray:
    # the 3-D pose carries the root: the target when lifting from 2-D, else the input
    pose = targets if inputs.shape[-1] == 2 else inputs
    return pose[..., root:root + 1, :]


def _centered(inputs, targets, root):
    off = _root_offset(inputs, targets, root)
    if inputs.shape[-1] == 3:
        inputs = inputs - off
    return inputs, targets - off


def compute_stats(inputs: np.ndarray, targets: np.ndarray, root_index: int = 0) -> NormalizationStats:
    """Per-axis mean/std (pooled over samples and nodes) after root-centring."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    ci, ct = _centered(inputs, targets, root_index)
    ci = ci.reshape(-1, ci.shape[-1])
    ct = ct.reshape(-1, 3)
    stats = [ci.mean(0), ci.std(0), ct.mean(0), ct.std(0)]
    for name, s in (("input", stats[1]), ("target", stats[3])):
        if (s <= 0).any():
            raise ConfigError(f"{name} coordinate(s) {np.flatnonzero(s <= 0).tolist()} are constant "
                              "over the dataset (zero standard deviation)")
    return NormalizationStats(*stats, root_index=root_index)


def normalize(inputs: np.ndarray, targets: np.ndarray, stats: NormalizationStats):
    """Root-centre, then standardise inputs and targets per axis."""
    ci, ct = _centered(np.asarray(inputs, dtype=np.float64), np.asarray(targets, dtype=np.float64),
                       stats.root_index)
    return (ci - stats.input_mean) / stats.input_std, (ct - stats.target_mean) / stats.target_std


def denormalize_input(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * stats.input_std + stats.input_mean


def denormalize_target(y: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Map normalised network outputs back to root-relative millimetres."""
    return np.asarray(y, dtype=np.float64) * stats.target_std + stats.target_mean


def normalize_sample(sample: PoseSample, stats: NormalizationStats) -> PoseSample:
    x, y = normalize(sample.input, sample.target, stats)
    return PoseSample(x, y)


def denormalize_sample(sample: PoseSample, stats: NormalizationStats) -> PoseSample:
    return PoseSample(denormalize_input(sample.input, stats), denormalize_target(sample.target, stats))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class Camera:
    focal: float = 1000.0
    cx: float = 500.0
    cy: float = 500.0
    depth_range: tuple[float, float] = (3000.0, 6000.0)
    lateral_range: float = 300.0
    min_depth: float = 100.0

    def __post_init__(self):
        if self.focal <= 0:
            raise ConfigError("camera focal length must be positive")

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pinhole projection of (..., 3) camera-frame points to (..., 2) pixels."""
        z = points[..., 2:3]
        return self.focal * points[..., :2] / z + np.array([self.cx, self.cy])


def rest_offsets(skeleton: SkeletonGraph) -> np.ndarray:
    if skeleton.rest_offsets is not None:
        return np.array(skeleton.rest_offsets)
    # deterministic 100 mm bones in random directions for skeletons without a template
    rng = np.random.default_rng(0)
    dirs = rng.normal(size=(skeleton.num_nodes, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    out = 100.0 * dirs
    out[skeleton.root] = 0.0
    return out


def bone_lengths(skeleton: SkeletonGraph) -> dict[tuple[int, int], float]:
    """Configured length of every edge, keyed by (parent, child)."""
    off = rest_offsets(skeleton)
    par = skeleton.parents()
    return {(par[n], n): float(np.linalg.norm(off[n])) for n in range(skeleton.num_nodes) if par[n] >= 0}


def _random_rotations(rng: np.random.Generator, n: int, max_angle: float) -> np.ndarray:
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.uniform(0.0, max_angle, size=(n, 1))
    return Rotation.from_rotvec(axis * angle).as_matrix()


def _forward_kinematics(skeleton, offsets, root_pos, root_rot, local_rots):
    """Positions (l, 3) and global rotations (l, 3, 3) of every joint."""
    par = skeleton.parents()
    l = skeleton.num_nodes
    pos = np.zeros((l, 3))
    rot = np.zeros((l, 3, 3))
    for n in skeleton.bfs_order():
        if par[n] < 0:
            rot[n] = root_rot
            pos[n] = root_pos
        else:
            rot[n] = rot[par[n]] @ local_rots[n]
            pos[n] = pos[par[n]] + rot[n] @ offsets[n]
    return pos, rot


def sample_poses(skeleton: SkeletonGraph, count: int, seed, camera: Camera = Camera(),
                 max_angle: float = 0.6) -> tuple[np.ndarray, np.ndarray]:
    """Random camera-frame poses: (count, l, 3) positions and (count, l, 3, 3) joint frames."""
    rng = np.random.default_rng(seed)
    offsets = rest_offsets(skeleton)
    l = skeleton.num_nodes
    poses = np.zeros((count, l, 3))
    frames = np.zeros((count, l, 3, 3))
    i = 0
    while i < count:
        yaw = rng.uniform(-np.pi, np.pi)
        root_rot = Rotation.from_rotvec([0.0, yaw, 0.0]).as_matrix() @ _random_rotations(rng, 1, 0.2)[0]
        root_pos = np.array([rng.uniform(-camera.lateral_range, camera.lateral_range),
                             rng.uniform(-camera.lateral_range, camera.lateral_range),
                             rng.uniform(*camera.depth_range)])
        local = _random_rotations(rng, l, max_angle)
        pos, rot = _forward_kinematics(skeleton, offsets, root_pos, root_rot, local)
        if (pos[:, 2] <= camera.min_depth).any():
            continue  # behind or too close to the camera: draw again
        poses[i], frames[i] = pos, rot
        i += 1
    return poses, frames


def generate_synthetic(skeleton: SkeletonGraph, count: int, seed, camera: Camera = Camera()) -> list[PoseSample]:
    """2-D pixel inputs from pinhole projection, root-relative 3-D targets in mm."""
    poses, _ = sample_poses(skeleton, count, seed, camera)
    root = skeleton.root
    return [PoseSample(camera.project(p), p - p[root]) for p in poses]


@dataclass(frozen=True)
class MeshTemplate:
    """Rigidly skinned surface points: each vertex rides on one bone."""

    parent: np.ndarray   # (v,) joint the bone starts at
    child: np.ndarray    # (v,) joint whose frame carries the vertex
    local: np.ndarray    # (v, 3) position in the child's rest frame, relative to the parent joint


def mesh_template(skeleton: SkeletonGraph, num_vertices: int) -> MeshTemplate:
    rng = np.random.default_rng(12345)
    offsets = rest_offsets(skeleton)
    par = skeleton.parents()
    bones = [(par[n], n) for n in range(skeleton.num_nodes) if par[n] >= 0]
    parent = np.zeros(num_vertices, dtype=np.int64)
    child = np.zeros(num_vertices, dtype=np.int64)
    local = np.zeros((num_vertices, 3))
    for v in range(num_vertices):
        a, b = bones[v % len(bones)]
        bone = offsets[b]
        length = np.linalg.norm(bone)
        perp = rng.normal(size=3)
        perp -= perp @ bone / (length ** 2) * bone
        perp /= np.linalg.norm(perp)
        parent[v], child[v] = a, b
        local[v] = rng.uniform(0.1, 0.9) * bone + 0.2 * length * perp
    return MeshTemplate(parent, child, local)


def skin(template: MeshTemplate, pose: np.ndarray, frames: np.ndarray) -> np.ndarray:
    return pose[template.parent] + np.einsum("vij,vj->vi", frames[template.child], template.local)


def generate_synthetic_mesh(skeleton: SkeletonGraph, count: int, seed, num_vertices: int,
                            camera: Camera = Camera()) -> list[PoseSample]:
    """Root-relative 3-D joints as inputs, root-relative skinned vertices as targets."""
    poses, frames = sample_poses(skeleton, count, seed, camera)
    tpl = mesh_template(skeleton, num_vertices)
    root = skeleton.root
    out = []
    for p, f in zip(poses, frames):
        verts = skin(tpl, p, f)
        out.append(PoseSample(p - p[root], verts - p[root]))
    return out


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"KOGT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    stats: NormalizationStats | None = None
    seed: int = 0
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, config: dict, params: dict[str, np.ndarray],
                    stats: NormalizationStats | None = None, seed: int = 0,
                    extra: dict | None = None) -> None:
    header = {"model": config, "stats": stats.to_dict() if stats else None, "seed": seed,
              **(extra or {})}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob,
             struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint (wanted {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, n: int = 1):
        vals = struct.unpack(f"<{n}I", self.take(4 * n))
        return vals[0] if n == 1 else vals


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a KOGT checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt configuration block ({exc})") from exc
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32(ndim)) if ndim > 1 else ((r.u32(),) if ndim == 1 else ())
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} unexpected trailing bytes")
    stats = NormalizationStats.from_dict(header["stats"]) if header.get("stats") else None
    extra = {k: v for k, v in header.items() if k not in ("model", "stats", "seed")}
    return Checkpoint(header["model"], params, stats, int(header.get("seed", 0)), extra)
