"""Oriented-box geometry: area, rotated IoU, HBB conversion, pair spatial features."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import OrientedBox

# Order of the entries in a pair spatial feature vector.
SPATIAL_FEATURE_NAMES = (
    "dx_norm",
    "dy_norm",
    "log_width_ratio",
    "log_height_ratio",
    "subject_area_norm",
    "object_area_norm",
    "rotated_iou",
    "center_distance_norm",
    "angle_difference",
)
SPATIAL_DIM = len(SPATIAL_FEATURE_NAMES)

MIN_AREA = 1e-12


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class AxisAlignedBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise GeometryError(f"inverted axis-aligned box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def to_oriented(self) -> OrientedBox:
        return OrientedBox.axis_aligned(self.x_min, self.y_min, self.x_max, self.y_max)


def _quad(b) -> np.ndarray:
    if isinstance(b, OrientedBox):
        return b.as_array()
    if isinstance(b, AxisAlignedBox):
        return b.to_oriented().as_array()
    return np.asarray(b, dtype=np.float64).reshape(4, 2)


def obb_area(b: OrientedBox) -> float:
    return b.area


def _check_area(quads: np.ndarray, what: str) -> None:
    x, y = quads[..., 0], quads[..., 1]
    area = 0.5 * np.abs(np.sum(x * np.roll(y, -1, -1) - np.roll(x, -1, -1) * y, axis=-1))
    if np.any(area <= MIN_AREA):
        raise GeometryError(f"degenerate zero-area box in {what}")


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """IoU of two convex quadrilaterals by exact polygon clipping."""
    qa, qb = _quad(a)[None], _quad(b)[None]
    _check_area(qa, "first argument")
    _check_area(qb, "second argument")
    return float(kernels.paired_iou(qa, qb)[0])


def pairwise_rotated_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """(n, m) IoU matrix for corner arrays of shape (n, 4, 2) and (m, 4, 2)."""
    a = np.ascontiguousarray(boxes_a, dtype=np.float64).reshape(-1, 4, 2)
    b = np.ascontiguousarray(boxes_b, dtype=np.float64).reshape(-1, 4, 2)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    _check_area(a, "first box set")
    _check_area(b, "second box set")
    return kernels.pairwise_iou(a, b)


def obb_to_hbb(b: OrientedBox) -> AxisAlignedBox:
    q = _quad(b)
    return AxisAlignedBox(*map(float, (q[:, 0].min(), q[:, 1].min(), q[:, 0].max(), q[:, 1].max())))


def hbb_corners(boxes: np.ndarray) -> np.ndarray:
    """Tight axis-aligned hulls of (n, 4, 2) corner arrays, as corner arrays."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4, 2)
    lo = boxes.min(axis=1)
    hi = boxes.max(axis=1)
    return np.stack([
        np.stack([lo[:, 0], lo[:, 1]], -1),
        np.stack([hi[:, 0], lo[:, 1]], -1),
        np.stack([hi[:, 0], hi[:, 1]], -1),
        np.stack([lo[:, 0], hi[:, 1]], -1),
    ], axis=1)


def hbb_iou(a: AxisAlignedBox, b: AxisAlignedBox) -> float:
    """Classical axis-aligned IoU."""
    iw = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    ih = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        raise GeometryError("degenerate zero-area box")
    return inter / union


def pairwise_hbb_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4, 2)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4, 2)
    alo, ahi = a.min(1), a.max(1)
    blo, bhi = b.min(1), b.max(1)
    iw = np.clip(np.minimum(ahi[:, None, 0], bhi[None, :, 0]) - np.maximum(alo[:, None, 0], blo[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(ahi[:, None, 1], bhi[None, :, 1]) - np.maximum(alo[:, None, 1], blo[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = np.prod(ahi - alo, axis=1)
    area_b = np.prod(bhi - blo, axis=1)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _rbox_arrays(q: np.ndarray):
    center = q.mean(axis=1)
    e1 = q[:, 1] - q[:, 0]
    e2 = q[:, 2] - q[:, 1]
    w = np.hypot(e1[:, 0], e1[:, 1])
    h = np.hypot(e2[:, 0], e2[:, 1])
    theta = np.arctan2(e1[:, 1], e1[:, 0])
    x, y = q[..., 0], q[..., 1]
    area = 0.5 * np.abs(np.sum(x * np.roll(y, -1, -1) - np.roll(x, -1, -1) * y, axis=-1))
    return center, w, h, theta, area


def _wrap_half_pi_array(a: np.ndarray) -> np.ndarray:
    a = np.fmod(a, np.pi)
    a = np.where(a <= -np.pi / 2, a + np.pi, a)
    return np.where(a > np.pi / 2, a - np.pi, a)


def pair_spatial_features(boxes: np.ndarray, subjects: np.ndarray, objects: np.ndarray,
                          width: float, height: float) -> np.ndarray:
    """Spatial features for many (subject, object) index pairs at once.

    Columns follow ``SPATIAL_FEATURE_NAMES``.
    """
    if width <= 0 or height <= 0:
        raise GeometryError("image width and height must be positive")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4, 2)
    subjects = np.asarray(subjects, dtype=np.int64)
    objects = np.asarray(objects, dtype=np.int64)
    if len(subjects) == 0:
        return np.zeros((0, SPATIAL_DIM))
    center, w, h, theta, area = _rbox_arrays(boxes)
    if np.any(area <= MIN_AREA) or np.any(w <= 0) or np.any(h <= 0):
        raise GeometryError("degenerate zero-area box in pair features")
    s, o = subjects, objects
    diag = math.hypot(width, height)
    d = center[o] - center[s]
    iou = kernels.paired_iou(np.ascontiguousarray(boxes[s]), np.ascontiguousarray(boxes[o]))
    feats = np.column_stack([
        d[:, 0] / width,
        d[:, 1] / height,
        np.log(w[o] / w[s]),
        np.log(h[o] / h[s]),
        area[s] / (width * height),
        area[o] / (width * height),
        iou,
        np.clip(np.hypot(d[:, 0], d[:, 1]) / diag, 0.0, 1.0),
        _wrap_half_pi_array(theta[o] - theta[s]),
    ])
    return feats


def pair_spatial_feature(subject: OrientedBox, object_: OrientedBox, width: float, height: float) -> np.ndarray:
    boxes = np.stack([_quad(subject), _quad(object_)])
    return pair_spatial_features(boxes, np.array([0]), np.array([1]), width, height)[0]


__all__ = [
    "AxisAlignedBox",
    "GeometryError",
    "SPATIAL_DIM",
    "SPATIAL_FEATURE_NAMES",
    "hbb_corners",
    "hbb_iou",
    "obb_area",
    "obb_to_hbb",
    "pair_spatial_feature",
    "pair_spatial_features",
    "pairwise_hbb_iou",
    "pairwise_rotated_iou",
    "rotated_iou",
]
