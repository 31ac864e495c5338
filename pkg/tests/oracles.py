"""Reference implementations the package code is checked against.

Nothing here uses the package's geometry or matching code: polygon overlap
comes from shapely or from point sampling, matching is plain loops. The one
package import is the ImagePrediction container that noisy_prediction fills.
"""

import math

import numpy as np
from shapely.geometry import Polygon


def shapely_iou(a, b) -> float:
    pa, pb = Polygon(np.asarray(a).reshape(4, 2)), Polygon(np.asarray(b).reshape(4, 2))
    inter = pa.intersection(pb).area
    return inter / (pa.area + pb.area - inter)


def _inside_convex(x, y, quad):
    # orient counter-clockwise (in the x-right, y-up sense), then test each half-plane
    q = np.asarray(quad, dtype=np.float64)
    area2 = np.sum(q[:, 0] * np.roll(q[:, 1], -1) - np.roll(q[:, 0], -1) * q[:, 1])
    if area2 < 0:
        q = q[::-1]
    inside = np.ones(x.shape, dtype=bool)
    for i in range(4):
        (x0, y0), (x1, y1) = q[i], q[(i + 1) % 4]
        inside &= (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0
    return inside


def monte_carlo_iou(a, b, n: int, rng) -> float:
    a, b = np.asarray(a).reshape(4, 2), np.asarray(b).reshape(4, 2)
    both = np.vstack([a, b])
    lo, hi = both.min(0), both.max(0)
    x = rng.uniform(lo[0], hi[0], n)
    y = rng.uniform(lo[1], hi[1], n)
    ia, ib = _inside_convex(x, y, a), _inside_convex(x, y, b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def rect(cx, cy, w, h, theta):
    c, s = np.cos(theta), np.sin(theta)
    local = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
    return local @ np.array([[c, s], [-s, c]]) + [cx, cy]


def fuzzed_box_pairs(seed: int, n: int):
    """Overlapping or nearby rectangle pairs with mixed sizes and angles."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        w1, h1, w2, h2 = rng.uniform(1, 10, 4)
        a = rect(0, 0, w1, h1, rng.uniform(-np.pi, np.pi))
        off = rng.uniform(-1, 1, 2) * (max(w1, h1) + max(w2, h2)) / 2
        b = rect(off[0], off[1], w2, h2, rng.uniform(-np.pi, np.pi))
        out.append((a, b))
    return out


# -- brute-force recall ------------------------------------------------------

def _hull(q):
    q = np.asarray(q)
    lo, hi = q.min(0), q.max(0)
    return [[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]]


def brute_force_recall(images, ks, num_relations, iou_threshold=0.5, mode="OBB"):
    """MR / mMR / HMR per K from plain python lists.

    Each image is a dict with
      pred_boxes, pred_classes: per predicted object
      preds: list of (score, subject index, object index, relation)
      gt_boxes, gt_classes: per ground-truth object
      gts:   list of (subject index, object index, relation)
    Predictions are ranked by score descending, then subject, object and
    relation. Walking down the top K, each prediction claims the first
    still-unclaimed ground truth (in listing order) it matches.
    """
    out = {}
    for k in ks:
        hit = [0] * num_relations
        tot = [0] * num_relations
        for img in images:
            memo = {}

            def overlap(pi, gj):
                if (pi, gj) not in memo:
                    a, b = img["pred_boxes"][pi], img["gt_boxes"][gj]
                    if mode == "HBB":
                        a, b = _hull(a), _hull(b)
                    memo[pi, gj] = shapely_iou(a, b)
                return memo[pi, gj]

            ranked = sorted(img["preds"], key=lambda p: (-p[0], p[1], p[2], p[3]))[:k]
            claimed = [False] * len(img["gts"])
            for _, ps, po, pr in ranked:
                for j, (gs, go, gr) in enumerate(img["gts"]):
                    if claimed[j] or pr != gr:
                        continue
                    if img["pred_classes"][ps] != img["gt_classes"][gs]:
                        continue
                    if img["pred_classes"][po] != img["gt_classes"][go]:
                        continue
                    if overlap(ps, gs) >= iou_threshold and overlap(po, go) >= iou_threshold:
                        claimed[j] = True
                        break
            for j, (_, _, gr) in enumerate(img["gts"]):
                tot[gr] += 1
                hit[gr] += claimed[j]
        mr = 100.0 * sum(hit) / sum(tot) if sum(tot) else 0.0
        per = [100.0 * h / t for h, t in zip(hit, tot) if t]
        mmr = math.fsum(per) / len(per) if per else 0.0
        hmr = 2 * mr * mmr / (mr + mmr) if mr + mmr > 0 else 0.0
        out[k] = {"MR": mr, "mMR": mmr, "HMR": hmr}
    return out


def oracle_image(pred, gt):
    """Lists for :func:`brute_force_recall` from an ImagePrediction and a SceneGraph."""
    pos = {ob.id: i for i, ob in enumerate(gt.objects)}
    return {
        "pred_boxes": [b.tolist() for b in pred.boxes],
        "pred_classes": pred.classes.tolist(),
        "preds": list(zip(pred.scores.tolist(), pred.subjects.tolist(), pred.objects.tolist(),
                          pred.relations.tolist())),
        "gt_boxes": [list(ob.box.corners) for ob in gt.objects],
        "gt_classes": [ob.class_index for ob in gt.objects],
        "gts": [(pos[t.subject_id], pos[t.object_id], t.relation_index) for t in gt.triplets],
    }



def noisy_prediction(graph, num_objects, num_relations, rng, extra=40, source="gt_boxes_labels"):
    """A scored candidate list that exercises every branch of the matcher.

    Boxes are jittered (some far enough to fail IoU 0.5), a few classes are
    flipped, spurious boxes are appended, ground-truth triplets are repeated
    and scores are rounded to one decimal so ties are common.
    """
    from cascade_sgg.evaluation import ImagePrediction

    n = len(graph.objects)
    boxes = graph.boxes_array() if n else np.zeros((0, 4, 2))
    classes = graph.class_array() if n else np.zeros(0, np.int64)
    if n:
        scale = rng.choice([0.5, 3.0, 12.0], size=(n, 1, 1), p=[0.6, 0.25, 0.15])
        boxes = boxes + rng.normal(0.0, 1.0, size=(n, 1, 2)) * scale
        flip = rng.random(n) < 0.1
        classes = np.where(flip, rng.integers(0, num_objects, n), classes)
    spurious = int(rng.integers(0, 3))
    if n and spurious:
        pick = rng.integers(0, n, spurious)
        boxes = np.concatenate([boxes, boxes[pick] + rng.normal(0, 4.0, size=(spurious, 1, 2))])
        classes = np.concatenate([classes, classes[pick]])
    m = len(boxes)
    rows = []
    if m >= 2:
        pos = {ob.id: i for i, ob in enumerate(graph.objects)}
        for t in graph.triplets:
            s, o = pos[t.subject_id], pos[t.object_id]
            for _ in range(int(rng.integers(0, 3))):
                rel = t.relation_index if rng.random() < 0.8 else int(rng.integers(0, num_relations))
                rows.append((s, o, rel))
        for _ in range(extra):
            s, o = rng.choice(m, 2, replace=False)
            rows.append((int(s), int(o), int(rng.integers(0, num_relations))))
    if not rows:
        return ImagePrediction.empty(boxes, classes, source)
    s, o, r = map(np.array, zip(*rows))
    scores = np.round(rng.random(len(rows)), 1)
    return ImagePrediction(boxes, classes, s, o, r, scores, source)
