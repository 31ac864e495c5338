"""Triplet recall metrics: MR@K, mMR@K, HMR@K over PredCls / SGCls / SGDet.

A GT triplet is recalled when some top-K prediction of its image carries the
same subject class, relation and object class and overlaps both GT boxes with
IoU at or above the threshold. Matching is greedy one-to-one in rank order,
so one prediction recalls at most one GT triplet. Because the greedy sweep is
sequential, the top-K assignment is a prefix of the full one and every K is
read off a single pass.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import SceneGraph
from .geometry import hbb_corners, pairwise_hbb_iou, pairwise_rotated_iou, rotated_iou

TASKS = ("PredCls", "SGCls", "SGDet")
DEFAULT_KS = (1500, 2000)
CURVE_KS = (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 1500, 2000)
# what each task is allowed to consume
TASK_SOURCE = {"PredCls": "gt_boxes_labels", "SGCls": "gt_boxes", "SGDet": "detections"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    task: str = "PredCls"
    ks: tuple[int, ...] = DEFAULT_KS
    iou_threshold: float = 0.5
    box_mode: str = "OBB"
    averaging: str = "micro"
    hbb_source: str = "obb_hull"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not self.ks or any(int(k) < 1 for k in self.ks):
            raise ConfigError(f"K values must be positive, got {self.ks}")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError(f"IoU threshold must lie in (0, 1], got {self.iou_threshold}")
        if self.box_mode not in ("OBB", "HBB"):
            raise ConfigError(f"box mode must be OBB or HBB, got {self.box_mode!r}")
        if self.averaging not in ("micro", "macro"):
            raise ConfigError(f"averaging must be micro or macro, got {self.averaging!r}")
        object.__setattr__(self, "ks", tuple(sorted({int(k) for k in self.ks})))


@dataclass(frozen=True, eq=False)
class ImagePrediction:
    """Scored triplet candidates of one image over its predicted objects.

    ``subjects``/``objects`` index rows of ``boxes``/``classes``; several
    candidates may share a pair (multi-label output).
    """

    boxes: np.ndarray
    classes: np.ndarray
    subjects: np.ndarray
    objects: np.ndarray
    relations: np.ndarray
    scores: np.ndarray
    source: str = "gt_boxes_labels"

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4, 2)
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "classes", np.asarray(self.classes, dtype=np.int64).reshape(-1))
        for name in ("subjects", "objects", "relations"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64).reshape(-1))
        n = len(self.subjects)
        if not (len(self.objects) == len(self.relations) == len(self.scores) == n):
            raise ConfigError("prediction arrays must have equal length")
        if len(self.classes) != len(boxes):
            raise ConfigError("one class per predicted box is required")
        if n and (min(self.subjects.min(), self.objects.min()) < 0
                  or max(self.subjects.max(), self.objects.max()) >= len(boxes)):
            raise ConfigError("prediction references a box that does not exist")
        if not np.all(np.isfinite(self.scores)):
            raise ConfigError("prediction scores must be finite")

    @classmethod
    def empty(cls, boxes=None, classes=None, source: str = "gt_boxes_labels") -> "ImagePrediction":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, 4, 2)) if boxes is None else boxes, z if classes is None else classes,
                   z, z, z, np.zeros(0), source)

    def ranking(self) -> np.ndarray:
        """Rank order: descending score, then subject, object, relation."""
        return np.lexsort((self.relations, self.objects, self.subjects, -self.scores))


@dataclass(frozen=True)
class TripletBoxes:
    subject_box: np.ndarray
    object_box: np.ndarray
    subject_class: int
    object_class: int
    relation: int


def _box_iou(a, b, box_mode: str) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(4, 2)
    b = np.asarray(b, dtype=np.float64).reshape(4, 2)
    if box_mode == "HBB":
        return float(pairwise_hbb_iou(a[None], b[None])[0, 0])
    return rotated_iou(a, b)


def match_triplet(pred: TripletBoxes, gt: TripletBoxes, iou_threshold: float = 0.5, box_mode: str = "OBB") -> bool:
    if (pred.subject_class, pred.object_class, pred.relation) != (gt.subject_class, gt.object_class, gt.relation):
        return False
    return (_box_iou(pred.subject_box, gt.subject_box, box_mode) >= iou_threshold
            and _box_iou(pred.object_box, gt.object_box, box_mode) >= iou_threshold)


def hmr_at_k(mr: float, mmr: float) -> float:
    """Harmonic mean of MR and mMR (percent); 0 when both are 0."""
    for v in (mr, mmr):
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"recall {v} outside [0, 100]")
    if mr + mmr == 0:
        return 0.0
    return 2.0 * mr * mmr / (mr + mmr)


# -- per-image matching -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class ImageMatch:
    """Per-GT-triplet rank of the matching prediction (-1 when unmatched)."""

    gt_relations: np.ndarray
    match_rank: np.ndarray

    def recalled(self, k: int) -> np.ndarray:
        return (self.match_rank >= 0) & (self.match_rank < k)


def _gt_arrays(gt: SceneGraph):
    pos = {ob.id: i for i, ob in enumerate(gt.objects)}
    boxes = gt.boxes_array() if gt.objects else np.zeros((0, 4, 2))
    classes = gt.class_array() if gt.objects else np.zeros(0, np.int64)
    t = gt.triplets
    s = np.array([pos[x.subject_id] for x in t], dtype=np.int64)
    o = np.array([pos[x.object_id] for x in t], dtype=np.int64)
    r = np.array([x.relation_index for x in t], dtype=np.int64)
    return boxes, classes, s, o, r


def match_image(pred: ImagePrediction, gt: SceneGraph, max_k: int, config: EvalConfig) -> ImageMatch:
    g_boxes, g_cls, g_s, g_o, g_r = _gt_arrays(gt)
    order = pred.ranking()[:max_k]
    if len(g_r) == 0 or len(order) == 0:
        return ImageMatch(g_r, np.full(len(g_r), -1, dtype=np.int64))
    p_boxes = pred.boxes
    if config.box_mode == "HBB":
        iou = pairwise_hbb_iou(hbb_corners(p_boxes), hbb_corners(g_boxes))
    else:
        iou = pairwise_rotated_iou(p_boxes, g_boxes)
    ps, po = pred.subjects[order], pred.objects[order]
    ranks = kernels.greedy_match_ranks(
        ps, po, pred.classes[ps], pred.classes[po], pred.relations[order],
        g_s, g_o, g_cls[g_s], g_cls[g_o], g_r, np.ascontiguousarray(iou), float(config.iou_threshold))
    return ImageMatch(g_r, np.asarray(ranks, dtype=np.int64))


# -- corpus metrics ---------------------------------------------------------

def _check_inputs(predictions, gts, config: EvalConfig) -> None:
    if predictions is None:
        raise ConfigError(f"{config.task} needs predictions; none were given")
    if len(predictions) != len(gts):
        raise ConfigError(f"{len(predictions)} prediction sets for {len(gts)} ground-truth images")
    need = TASK_SOURCE[config.task]
    for i, p in enumerate(predictions):
        if p.source != need:
            raise ConfigError(f"{config.task} expects inputs built from {need}, image {i} has {p.source}")


def _matches(predictions, gts, config: EvalConfig) -> list[ImageMatch]:
    return [match_image(p, g, max(config.ks), config) for p, g in zip(predictions, gts)]


def _mr(matches, k: int, averaging: str) -> float:
    if averaging == "macro":
        per = [m.recalled(k).mean() for m in matches if len(m.gt_relations)]
        return 100.0 * float(np.mean(per)) if per else 0.0
    total = sum(len(m.gt_relations) for m in matches)
    hit = sum(int(m.recalled(k).sum()) for m in matches)
    return 100.0 * hit / total if total else 0.0


def _per_class(matches, k: int, num_classes: int):
    gt = np.zeros(num_classes, dtype=np.int64)
    hit = np.zeros(num_classes, dtype=np.int64)
    for m in matches:
        if len(m.gt_relations):
            np.add.at(gt, m.gt_relations, 1)
            np.add.at(hit, m.gt_relations, m.recalled(k).astype(np.int64))
    return gt, hit


def _mean_class_recall(gt, hit) -> float:
    # fsum: correctly rounded, so the value does not depend on class order
    per = [100.0 * h / g for h, g in zip(hit.tolist(), gt.tolist()) if g]
    return math.fsum(per) / len(per) if per else 0.0


def _num_classes(matches, num_relations: int | None) -> int:
    seen = max((int(m.gt_relations.max()) + 1 for m in matches if len(m.gt_relations)), default=0)
    return max(seen, num_relations or 0)


def mr_at_k(predictions, gts, k: int, config: EvalConfig) -> float:
    if k < 1:
        raise ConfigError("K must be >= 1")
    _check_inputs(predictions, gts, config)
    return _mr([match_image(p, g, k, config) for p, g in zip(predictions, gts)], k, config.averaging)


def mmr_at_k(predictions, gts, k: int, config: EvalConfig, num_relations: int | None = None) -> float:
    if k < 1:
        raise ConfigError("K must be >= 1")
    _check_inputs(predictions, gts, config)
    matches = [match_image(p, g, k, config) for p, g in zip(predictions, gts)]
    gt, hit = _per_class(matches, k, _num_classes(matches, num_relations))
    return _mean_class_recall(gt, hit)


@dataclass
class EvalReport:
    config: EvalConfig
    metrics: dict                    # K -> {"MR", "mMR", "HMR"}
    per_class_recall: dict           # K -> list (None where a class has no GT)
    gt_counts: list
    per_image: list                  # [{"image": i, "gt": n, "recalled": {K: m}}]
    run: str = "run"
    header: dict = field(default_factory=dict)
    curve: dict = field(default_factory=dict)   # K -> MR, for plotting

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "run": self.run,
            "config": {"task": cfg.task, "ks": list(cfg.ks), "iou_threshold": cfg.iou_threshold,
                       "box_mode": cfg.box_mode, "averaging": cfg.averaging, "hbb_source": cfg.hbb_source},
            "header": self.header,
            "metrics": {str(k): v for k, v in self.metrics.items()},
            "per_class_recall": {str(k): v for k, v in self.per_class_recall.items()},
            "gt_counts": self.gt_counts,
            "curve": {str(k): v for k, v in self.curve.items()},
            "per_image": [{**im, "recalled": {str(k): v for k, v in im["recalled"].items()}}
                          for im in self.per_image],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        c = doc["config"]
        cfg = EvalConfig(c["task"], tuple(c["ks"]), c["iou_threshold"], c["box_mode"], c["averaging"],
                         c.get("hbb_source", "obb_hull"))
        per_image = [{**im, "recalled": {int(k): v for k, v in im["recalled"].items()}} for im in doc["per_image"]]
        return cls(cfg, {int(k): v for k, v in doc["metrics"].items()},
                   {int(k): v for k, v in doc["per_class_recall"].items()}, doc["gt_counts"], per_image,
                   doc.get("run", "run"), doc.get("header", {}),
                   {int(k): v for k, v in doc.get("curve", {}).items()})

    def to_csv(self) -> str:
        return metrics_table([self])


def evaluate_task(predictions, gts, config: EvalConfig, num_relations: int | None = None,
                  run: str = "run", header: dict | None = None) -> EvalReport:
    """Full report. PredCls predictions must be built from GT boxes and labels,
    SGCls from GT boxes with predicted labels, SGDet from merged detections."""
    _check_inputs(predictions, gts, config)
    matches = _matches(predictions, gts, config)
    ncls = _num_classes(matches, num_relations)
    metrics, per_class = {}, {}
    gt_counts = None
    for k in config.ks:
        mr = _mr(matches, k, config.averaging)
        gt, hit = _per_class(matches, k, ncls)
        mmr = _mean_class_recall(gt, hit)
        metrics[k] = {"MR": mr, "mMR": mmr, "HMR": hmr_at_k(mr, mmr)}
        per_class[k] = [100.0 * h / g if g else None for h, g in zip(hit.tolist(), gt.tolist())]
        gt_counts = gt.tolist()
    per_image = [{"image": i, "gt": int(len(m.gt_relations)),
                  "recalled": {k: int(m.recalled(k).sum()) for k in config.ks}} for i, m in enumerate(matches)]
    curve = {k: _mr(matches, k, config.averaging) for k in sorted(set(CURVE_KS) | set(config.ks))
             if k <= max(config.ks)}
    return EvalReport(config, metrics, per_class, gt_counts or [], per_image, run, dict(header or {}), curve)


def metrics_table(reports) -> str:
    """CSV with one row per (run, task); cells hold the K values joined by '/'."""
    reports = sorted(reports, key=lambda r: (r.run, TASKS.index(r.config.task)))
    if not reports:
        raise ConfigError("no reports to tabulate")
    ks = reports[0].config.ks
    kcol = "/".join(str(k) for k in ks)
    buf = io.StringIO()
    first = reports[0].config
    buf.write(f"# box_mode={first.box_mode} iou_threshold={first.iou_threshold} "
              f"averaging={first.averaging} hbb_source={first.hbb_source}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "task", f"MR@{kcol}", f"mMR@{kcol}", f"HMR@{kcol}"])
    for r in reports:
        if r.config.ks != ks:
            raise ConfigError("reports use different K values")
        w.writerow([r.run, r.config.task] + ["/".join(f"{r.metrics[k][m]:.2f}" for k in ks)
                                             for m in ("MR", "mMR", "HMR")])
    return buf.getvalue()


# -- detection mAP (harness self-checks only) -------------------------------

def voc07_ap(recall, precision) -> float:
    """11-point interpolated average precision."""
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    ap = 0.0
    for t in np.linspace(0, 1, 11):
        p = precision[recall >= t]
        ap += (p.max() if len(p) else 0.0) / 11
    return float(ap)


def detection_ap(det_boxes, det_scores, gt_boxes, iou_threshold: float = 0.5) -> float:
    """AP of one class: greedy matching of score-sorted detections to GT boxes."""
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4, 2)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4, 2)
    if len(gt_boxes) == 0:
        return 0.0
    order = np.argsort(-np.asarray(det_scores, dtype=np.float64), kind="stable")
    iou = pairwise_rotated_iou(det_boxes[order], gt_boxes) if len(order) else np.zeros((0, len(gt_boxes)))
    taken = np.zeros(len(gt_boxes), dtype=bool)
    tp = np.zeros(len(order))
    for i in range(len(order)):
        cand = np.where(~taken, iou[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            taken[j] = True
            tp[i] = 1
    ctp = np.cumsum(tp)
    recall = ctp / len(gt_boxes)
    precision = ctp / np.arange(1, len(order) + 1)
    return voc07_ap(recall, precision)
