"""Pose and mesh error metrics (all distances in millimetres)."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeError

AUC_THRESHOLDS = tuple(float(t) for t in np.arange(0, 151, 5))


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    if pred.shape[-1] != 3:
        raise ShapeError(f"expected 3-D coordinates, got trailing dim {pred.shape[-1]}")
    return pred, gt


def _root_align(x, root):
    return x - x[..., root:root + 1, :]


def mpjpe(pred, gt, root_index: int = 0) -> float:
    """Mean per-joint position error after subtracting each pose's root joint."""
    pred, gt = _check(pred, gt)
    d = np.linalg.norm(_root_align(pred, root_index) - _root_align(gt, root_index), axis=-1)
    return float(d.mean())


def mpve(pred_vertices, gt_vertices) -> float:
    """Mean per-vertex Euclidean error, no alignment."""
    pred, gt = _check(pred_vertices, gt_vertices)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def pck_and_auc(pred, gt, threshold: float = 150.0, auc_thresholds=AUC_THRESHOLDS,
                root_index: int | None = None) -> tuple[float, float]:
    """3D PCK (percent of joints with error <= threshold) and its mean over ``auc_thresholds``.

    With ``root_index`` set, poses are root-aligned first and the root joint,
    whose error is then zero by construction, is left out of the count.
    """
    pred, gt = _check(pred, gt)
    if root_index is not None:
        pred, gt = _root_align(pred, root_index), _root_align(gt, root_index)
    d = np.linalg.norm(pred - gt, axis=-1)
    if root_index is not None:
        d = np.delete(d, root_index, axis=-1)
    pck = 100.0 * float((d <= threshold).mean())
    auc = float(np.mean([100.0 * (d <= t).mean() for t in auc_thresholds]))
    return pck, auc


@dataclass
class MetricReport:
    count: int
    mpjpe_mm: float | None = None
    mpve_mm: float | None = None
    pck_percent: float | None = None
    auc: float | None = None
    pck_threshold_mm: float = 150.0
    auc_thresholds_mm: list[float] = field(default_factory=lambda: list(AUC_THRESHOLDS))

    def validate(self):
        if self.count <= 0:
            raise ValueError("report needs at least one sample")
        for name in ("mpjpe_mm", "mpve_mm"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ValueError(f"{name} must be non-negative, got {v}")
        for name in ("pck_percent", "auc"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 100:
                raise ValueError(f"{name} must be in [0, 100], got {v}")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text)).validate()

    _CSV_FIELDS = ("count", "mpjpe_mm", "mpve_mm", "pck_percent", "auc", "pck_threshold_mm")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self._CSV_FIELDS)
        w.writerow(["" if getattr(self, f) is None else repr(getattr(self, f)) for f in self._CSV_FIELDS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rows = list(csv.reader(io.StringIO(text)))
        kw = {}
        for k, v in zip(rows[0], rows[1]):
            if v == "":
                kw[k] = None
            else:
                kw[k] = int(v) if k == "count" else float(v)
        return cls(**kw).validate()


def pose_report(pred, gt, root_index: int = 0) -> MetricReport:
    pred, gt = _check(pred, gt)
    pck, auc = pck_and_auc(pred, gt, root_index=root_index)
    return MetricReport(count=int(pred.shape[0]), mpjpe_mm=mpjpe(pred, gt, root_index),
                        pck_percent=pck, auc=auc).validate()


def mesh_report(pred, gt) -> MetricReport:
    pred, gt = _check(pred, gt)
    return MetricReport(count=int(pred.shape[0]), mpve_mm=mpve(pred, gt)).validate()
