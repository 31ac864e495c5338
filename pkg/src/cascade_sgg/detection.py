"""Detection-side training machinery at desk scale.

* dynamic image pyramid planning (factor-2 layers, sliding windows, size bands)
* class-weighted softmax classification loss with per-layer learnable weights
* the multi-layer OBB/HBB total loss (mean classification + mean smooth-L1
  regression over positives, with optional per-positive regression weights)
* per-class greedy NMS for merging detections from overlapping windows
* a tiny two-layer scorer over synthetic appearance features, standing in for
  a real detector backbone
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import kernels
from .core import OrientedBox
from .geometry import AxisAlignedBox, hbb_corners

MIN_LAYER_PX = 8
CLASS_WEIGHT_RANGE = (0.1, 10.0)
SMOOTH_L1_BETA = 1.0


class DipError(ValueError):
    pass


@dataclass(frozen=True)
class DipSpec:
    """Pyramid plan. Layer numbers are 1-based; layer 1 is full resolution."""

    image_size: tuple[int, int]
    num_layers: int
    scale_factor: int
    window: int
    stride: int
    layer_sizes: tuple[tuple[int, int], ...]
    # [lo, hi) object size bands in full-resolution max-dimension pixels
    intervals: tuple[tuple[float, float], ...]

    def layer_for_size(self, size: float) -> int:
        if size <= 0:
            raise DipError("object size must be positive")
        for m, (lo, hi) in enumerate(self.intervals, start=1):
            if lo <= size < hi:
                return m
        raise DipError(f"size {size} not covered")  # unreachable for a valid plan

    def windows(self, m: int) -> list[tuple[int, int, int, int]]:
        """Windows of layer ``m`` as (x0, y0, x1, y1) in that layer's pixels."""
        w, h = self.layer_sizes[m - 1]
        return [(x, y, min(x + self.window, w), min(y + self.window, h))
                for y in _starts(h, self.window, self.stride) for x in _starts(w, self.window, self.stride)]

    def global_windows(self, m: int) -> list[tuple[float, float, float, float]]:
        f = float(self.scale_factor ** (m - 1))
        return [(x0 * f, y0 * f, x1 * f, y1 * f) for x0, y0, x1, y1 in self.windows(m)]

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "num_layers": self.num_layers,
            "scale_factor": self.scale_factor,
            "window": self.window,
            "stride": self.stride,
            "layer_sizes": [list(s) for s in self.layer_sizes],
            "intervals": [[lo, "inf" if math.isinf(hi) else hi] for lo, hi in self.intervals],
        }


def _starts(length: int, window: int, stride: int) -> list[int]:
    if window >= length:
        return [0]
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


def build_dip(width: int, height: int, num_layers: int, window: int, stride: int | None = None,
              min_size: float = 32.0, scale_factor: int = 2) -> DipSpec:
    """Plan an M-layer pyramid: layer m is ceil(dim / 2**(m-1)) pixels.

    Size bands: layer 1 owns [0, min_size*2), layer m>1 owns
    [min_size*2**(m-1), min_size*2**m), and the last layer is open-ended.
    """
    if num_layers < 1:
        raise DipError("the pyramid needs at least one layer")
    if window <= 0:
        raise DipError("window must be positive")
    stride = window if stride is None else stride
    if not 0 < stride <= window:
        raise DipError("stride must satisfy 0 < stride <= window")
    sizes = []
    for m in range(1, num_layers + 1):
        f = scale_factor ** (m - 1)
        lw, lh = math.ceil(width / f), math.ceil(height / f)
        if lw < MIN_LAYER_PX or lh < MIN_LAYER_PX:
            raise DipError(f"layer {m} would be {lw}x{lh} px; too many layers for a {width}x{height} image")
        sizes.append((lw, lh))
    bounds = [0.0] + [min_size * scale_factor ** (m - 1) for m in range(2, num_layers + 1)] + [math.inf]
    intervals = tuple((bounds[i], bounds[i + 1]) for i in range(num_layers))
    return DipSpec((int(width), int(height)), num_layers, scale_factor, window, stride, tuple(sizes), intervals)


# -- losses -----------------------------------------------------------------

def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=torch.float64)


def hierarchical_cls_loss(phi, weights, target) -> torch.Tensor:
    """Cross-entropy of softmax(weights * phi) against a one-hot target.

    ``phi``/``target`` may be a single sample (C,) or a batch (N, C); the
    result is a scalar or an (N,) vector accordingly.
    """
    phi, weights, target = _t(phi), _t(weights), _t(target)
    if phi.shape != target.shape or phi.shape[-1] != weights.shape[-1]:
        raise ValueError(f"dimension mismatch: phi {tuple(phi.shape)}, weights {tuple(weights.shape)}, "
                         f"target {tuple(target.shape)}")
    if torch.any(weights <= 0):
        raise ValueError("class weights must be positive")
    logits = weights * phi
    return -(target * torch.log_softmax(logits, dim=-1)).sum(dim=-1)


def smooth_l1(residual, beta: float = SMOOTH_L1_BETA) -> torch.Tensor:
    a = torch.abs(_t(residual))
    return torch.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


@dataclass
class LayerBatch:
    """Samples of one pyramid layer.

    ``scores`` are the raw confidences (N, C); ``targets`` class indices (N,);
    regression arrays are (N, R) and only read where ``positive`` is set.
    """

    scores: torch.Tensor
    class_weights: torch.Tensor
    targets: torch.Tensor
    positive: torch.Tensor
    reg_pred: torch.Tensor | None = None
    reg_target: torch.Tensor | None = None
    reg_weights: torch.Tensor | None = None

    def __post_init__(self):
        self.scores = _t(self.scores)
        self.class_weights = _t(self.class_weights)
        self.targets = torch.as_tensor(np.asarray(self.targets) if not isinstance(self.targets, torch.Tensor)
                                       else self.targets, dtype=torch.long)
        self.positive = torch.as_tensor(np.asarray(self.positive) if not isinstance(self.positive, torch.Tensor)
                                        else self.positive, dtype=torch.bool)
        n = self.scores.shape[0]
        if self.targets.shape != (n,) or self.positive.shape != (n,):
            raise ValueError("targets and positive mask must have one entry per sample")
        if int(self.positive.sum()) and (self.reg_pred is None or self.reg_target is None):
            raise ValueError("positives need regression predictions and targets")
        if self.reg_pred is not None:
            self.reg_pred = _t(self.reg_pred)
            self.reg_target = _t(self.reg_target)
        if self.reg_weights is None:
            self.reg_weights = torch.ones(n, dtype=self.scores.dtype)
        else:
            self.reg_weights = _t(self.reg_weights)

    @property
    def num_samples(self) -> int:
        return int(self.scores.shape[0])

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def detection_total_loss(batches, mode: str = "OBB") -> torch.Tensor:
    """Sum over layers of mean classification loss plus mean regression loss.

    In OBB mode each positive's smooth-L1 term is scaled by its regression
    weight; HBB mode ignores the weights. Layers with no positives contribute
    only their classification term.
    """
    mode = mode.upper()
    if mode not in ("OBB", "HBB"):
        raise ValueError(f"mode must be OBB or HBB, got {mode!r}")
    total = torch.zeros((), dtype=torch.float64)
    for b in batches:
        if b.num_samples == 0:
            continue
        onehot = torch.nn.functional.one_hot(b.targets, b.scores.shape[1]).to(b.scores.dtype)
        total = total + hierarchical_cls_loss(b.scores, b.class_weights, onehot).mean()
        if b.num_positive:
            pos = b.positive
            per = smooth_l1(b.reg_pred[pos] - b.reg_target[pos]).sum(dim=1)
            if mode == "OBB":
                per = b.reg_weights[pos] * per
            total = total + per.mean()
    return total


# -- detections and NMS -----------------------------------------------------

@dataclass(frozen=True)
class Detection:
    box: OrientedBox | AxisAlignedBox
    class_index: int
    confidence: float
    window_id: int = 0
    detection_id: int = 0
    features: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def corners(self) -> np.ndarray:
        b = self.box.to_oriented() if isinstance(self.box, AxisAlignedBox) else self.box
        return b.as_array()

    def to_line(self) -> str:
        return f"{self.class_index} {self.confidence!r} " + " ".join(repr(v) for v in self.corners().ravel())


def _sort_key(d: Detection):
    return (-d.confidence, d.detection_id, d.window_id, d.class_index, tuple(d.corners().ravel()))


def merge_window_detections(dets, iou_threshold: float = 0.5, mode: str = "OBB") -> list[Detection]:
    """Per-class greedy NMS over detections already in global coordinates.

    Order is descending confidence; ties go to the lower detection id, then
    the lower window id, then the lexicographically smaller box, so the result
    does not depend on arrival order. A box is suppressed when its IoU with a
    kept box exceeds the threshold.
    """
    dets = sorted(dets, key=_sort_key)
    if not dets:
        return []
    boxes = np.stack([d.corners() for d in dets])
    if mode.upper() == "HBB":
        boxes = hbb_corners(boxes)
    classes = np.array([d.class_index for d in dets], dtype=np.int64)
    keep = kernels.nms_keep(np.ascontiguousarray(boxes), classes, np.arange(len(dets), dtype=np.int64),
                            float(iou_threshold))
    return [d for d, k in zip(dets, keep) if k]


def detections_to_text(dets) -> str:
    return "".join(d.to_line() + "\n" for d in dets)


# -- toy detector -----------------------------------------------------------

RBOX_DIM = 5


def encode_rbox_residual(proposal: OrientedBox, target: OrientedBox) -> np.ndarray:
    pcx, pcy, pw, ph, pt = proposal.to_rbox()
    tcx, tcy, tw, th, tt = target.to_rbox()
    dtheta = math.remainder(tt - pt, math.pi)
    return np.array([(tcx - pcx) / pw, (tcy - pcy) / ph, math.log(tw / pw), math.log(th / ph), dtheta])


def decode_rbox_residual(proposal: OrientedBox, residual) -> OrientedBox:
    pcx, pcy, pw, ph, pt = proposal.to_rbox()
    dx, dy, dw, dh, dt = (float(v) for v in residual)
    return OrientedBox.from_rbox(pcx + dx * pw, pcy + dy * ph, pw * math.exp(dw), ph * math.exp(dh), pt + dt)


class ObjectScorer(nn.Module):
    """Two-layer scorer: appearance (+ localisation cue) -> class confidences and box residuals.

    The last class index is background. Each pyramid layer owns a vector of
    learnable class weights, initialised to 1 and kept in ``CLASS_WEIGHT_RANGE``.
    """

    def __init__(self, in_dim: int, num_classes: int, num_layers: int, hidden: int = 64):
        super().__init__()
        self.num_classes = num_classes
        self.body = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU())
        self.cls_head = nn.Linear(hidden, num_classes + 1)
        self.reg_head = nn.Linear(hidden + RBOX_DIM, RBOX_DIM)
        self.layer_weights = nn.Parameter(torch.ones(num_layers, num_classes + 1, dtype=torch.float64))
        self.double()

    def forward(self, feats: torch.Tensor, cues: torch.Tensor):
        h = self.body(feats)
        return self.cls_head(h), self.reg_head(torch.cat([h, cues], dim=1))

    def clamp_weights(self) -> None:
        with torch.no_grad():
            self.layer_weights.clamp_(*CLASS_WEIGHT_RANGE)

    @torch.no_grad()
    def class_probabilities(self, feats: torch.Tensor, cues: torch.Tensor, layers: torch.Tensor) -> torch.Tensor:
        phi, _ = self(feats, cues)
        w = self.layer_weights[layers - 1]
        return torch.softmax(w * phi, dim=1)
