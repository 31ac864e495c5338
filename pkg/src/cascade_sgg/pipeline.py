"""Glue between scenes, the three model stages and the evaluator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import OrientedBox, SceneGraph
from .detection import (
    Detection,
    DipSpec,
    LayerBatch,
    ObjectScorer,
    decode_rbox_residual,
    detection_total_loss,
    encode_rbox_residual,
    merge_window_detections,
)
from .evaluation import ImagePrediction
from .ppg import PpgModel, all_ordered_pairs, pair_feature_dim, pair_features, pair_score_array
from .rpcm import GraphInputs, RelationPredictor, build_adjacency, build_samples
from .synthetic import FEATURE_DIM, bundled_recipe, generate_scene, object_features

ENTITY_GEOM_DIM = 7


def seeded(seed, *keys) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    """Floor the train and val shares; test takes the remainder."""
    tr = math.floor(n * fractions[0] + 1e-9)
    va = math.floor(n * fractions[1] + 1e-9)
    return tr, va, n - tr - va


# -- scenes -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Scene:
    graph: SceneGraph
    features: np.ndarray
    seed: int
    recipe: str


def generate_corpus(recipes, num_scenes: int, seed: int, num_classes: int,
                    feature_noise: float = 0.5) -> list[Scene]:
    """Scene i uses recipe i mod len(recipes) with a seed derived from (seed, i)."""
    out = []
    for i in range(num_scenes):
        name = recipes[i % len(recipes)]
        s = seeded(seed, i) % (2 ** 31)
        g = generate_scene(bundled_recipe(name, seed=s))
        feats = object_features(g, num_classes, s, FEATURE_DIM, feature_seed=seed, noise=feature_noise)
        out.append(Scene(g, feats, s, name))
    return out


# -- object views -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ObjectView:
    """What a relation stage sees of one image's objects."""

    boxes: np.ndarray
    class_probs: np.ndarray
    classes: np.ndarray
    confidence: np.ndarray
    semantic: np.ndarray
    width: float
    height: float
    source: str

    @property
    def num_objects(self) -> int:
        return len(self.classes)


def gt_view(scene: Scene, num_classes: int) -> ObjectView:
    g = scene.graph
    cls = g.class_array() if g.objects else np.zeros(0, np.int64)
    boxes = g.boxes_array() if g.objects else np.zeros((0, 4, 2))
    return ObjectView(boxes, np.eye(num_classes)[cls], cls, np.ones(len(cls)), scene.features,
                      g.image_width, g.image_height, "gt_boxes_labels")


def _layers_for(boxes: np.ndarray, dip: DipSpec) -> np.ndarray:
    side = np.max(np.linalg.norm(boxes - np.roll(boxes, -1, axis=1), axis=2)[:, :2], axis=1)
    return np.array([dip.layer_for_size(float(v)) for v in side], dtype=np.int64)


def _classify(scorer: ObjectScorer, feats, cues, layers):
    probs = scorer.class_probabilities(torch.as_tensor(feats), torch.as_tensor(cues),
                                       torch.as_tensor(layers)).numpy()
    obj = probs[:, : scorer.num_classes]
    cls = np.argmax(obj, axis=1)
    return obj, cls, obj[np.arange(len(cls)), cls], probs[:, -1]


def sgcls_view(scene: Scene, scorer: ObjectScorer, dip: DipSpec) -> ObjectView:
    """GT boxes with classes predicted from appearance."""
    g = scene.graph
    if not g.objects:
        return ObjectView(np.zeros((0, 4, 2)), np.zeros((0, scorer.num_classes)), np.zeros(0, np.int64),
                          np.zeros(0), scene.features, g.image_width, g.image_height, "gt_boxes")
    boxes = g.boxes_array()
    obj, cls, conf, _ = _classify(scorer, scene.features, np.zeros((len(boxes), 5)), _layers_for(boxes, dip))
    obj = obj / obj.sum(axis=1, keepdims=True)
    return ObjectView(boxes, obj, cls, obj[np.arange(len(cls)), cls], scene.features,
                      g.image_width, g.image_height, "gt_boxes")


# -- simulated detector -----------------------------------------------------

@dataclass(frozen=True)
class JitterModel:
    center: float = 0.08       # fraction of the box size
    scale: float = 0.08        # log-normal sigma
    angle: float = 0.05        # radians
    cue_noise: float = 0.02
    feature_noise: float = 0.2
    false_positives: float = 3.0


def _jitter(box: OrientedBox, rng, jm: JitterModel) -> OrientedBox:
    cx, cy, w, h, t = box.to_rbox()
    size = max(w, h)
    return OrientedBox.from_rbox(cx + rng.normal(0, jm.center * size), cy + rng.normal(0, jm.center * size),
                                 w * math.exp(rng.normal(0, jm.scale)), h * math.exp(rng.normal(0, jm.scale)),
                                 t + rng.normal(0, jm.angle))


def _random_box(rng, width: float, height: float, sizes: np.ndarray) -> OrientedBox:
    w, h = sizes[rng.integers(len(sizes))] if len(sizes) else (64.0, 32.0)
    margin = max(w, h)
    cx = rng.uniform(margin, max(margin + 1, width - margin))
    cy = rng.uniform(margin, max(margin + 1, height - margin))
    return OrientedBox.from_rbox(cx, cy, w, h, rng.uniform(-math.pi / 2, math.pi / 2))


def _object_sizes(g: SceneGraph) -> np.ndarray:
    return np.array([ob.box.to_rbox()[2:4] for ob in g.objects]) if g.objects else np.zeros((0, 2))


def detector_samples(scene: Scene, rng: np.random.Generator, num_classes: int, jm: JitterModel = JitterModel(),
                     per_object: int = 2, negatives_per_object: float = 1.0):
    """Training proposals: jittered GT (positives) and random boxes with noise features (background)."""
    g = scene.graph
    feats, cues, targets, reg, boxes = [], [], [], [], []
    for ob, f in zip(g.objects, scene.features):
        for _ in range(per_object):
            p = _jitter(ob.box, rng, jm)
            res = encode_rbox_residual(p, ob.box)
            feats.append(f + rng.normal(0, jm.feature_noise, f.shape))
            cues.append(res + rng.normal(0, jm.cue_noise, 5))
            targets.append(ob.class_index)
            reg.append(res)
            boxes.append(p.as_array())
    sizes = _object_sizes(g)
    for _ in range(int(round(negatives_per_object * len(g.objects)))):
        p = _random_box(rng, g.image_width, g.image_height, sizes)
        feats.append(rng.normal(0, 1.0, scene.features.shape[1]))
        cues.append(rng.normal(0, 0.1, 5))
        targets.append(num_classes)
        reg.append(np.zeros(5))
        boxes.append(p.as_array())
    return (np.array(feats), np.array(cues), np.array(targets, dtype=np.int64), np.array(reg),
            np.array(boxes).reshape(-1, 4, 2))


def detector_loss(scorer: ObjectScorer, feats, cues, targets, reg_target, layers, mode: str = "OBB"):
    phi, reg_pred = scorer(torch.as_tensor(feats), torch.as_tensor(cues))
    targets_t = torch.as_tensor(targets)
    positive = targets_t < scorer.num_classes
    batches = []
    for m in range(1, scorer.layer_weights.shape[0] + 1):
        sel = torch.as_tensor(layers == m)
        if bool(sel.any()):
            batches.append(LayerBatch(phi[sel], scorer.layer_weights[m - 1], targets_t[sel], positive[sel],
                                      reg_pred[sel], torch.as_tensor(reg_target)[sel]))
    return detection_total_loss(batches, mode)


def sgdet_view(scene: Scene, scorer: ObjectScorer, dip: DipSpec, seed: int, index: int,
               jm: JitterModel = JitterModel(), nms_iou: float = 0.5, min_confidence: float = 0.05) -> ObjectView:
    """Simulated window-wise detection, per-class NMS merge, then the merged boxes as objects."""
    rng = np.random.default_rng(seeded(seed, 0xDE7, index))
    g = scene.graph
    feats, cues, props = [], [], []
    windows = [(m, w) for m in range(1, dip.num_layers + 1) for w in dip.global_windows(m)]

    def window_ids(box: OrientedBox, layer: int):
        cx, cy = box.center
        return [i for i, (m, (x0, y0, x1, y1)) in enumerate(windows)
                if m == layer and x0 <= cx < x1 and y0 <= cy < y1]

    for ob, f in zip(g.objects, scene.features):
        layer = dip.layer_for_size(max(ob.box.to_rbox()[2:4]))
        for wid in window_ids(ob.box, layer) or [0]:
            p = _jitter(ob.box, rng, jm)
            feats.append(f + rng.normal(0, jm.feature_noise, f.shape))
            cues.append(encode_rbox_residual(p, ob.box) + rng.normal(0, jm.cue_noise, 5))
            props.append((p, layer, wid))
    sizes = _object_sizes(g)
    for _ in range(int(rng.poisson(jm.false_positives))):
        p = _random_box(rng, g.image_width, g.image_height, sizes)
        layer = dip.layer_for_size(max(p.to_rbox()[2:4]))
        feats.append(rng.normal(0, 1.0, scene.features.shape[1]))
        cues.append(rng.normal(0, 0.1, 5))
        props.append((p, layer, (window_ids(p, layer) or [0])[0]))

    dets = []
    if props:
        feats_a, cues_a = np.array(feats), np.array(cues)
        layers = np.array([l for _, l, _ in props], dtype=np.int64)
        obj, cls, conf, _ = _classify(scorer, feats_a, cues_a, layers)
        with torch.no_grad():
            _, reg = scorer(torch.as_tensor(feats_a), torch.as_tensor(cues_a))
        for i, (p, _, wid) in enumerate(props):
            if conf[i] < min_confidence:
                continue
            box = decode_rbox_residual(p, reg[i].numpy())
            dets.append(Detection(box, int(cls[i]), float(min(1.0, conf[i])), wid, i,
                                  features=tuple(feats_a[i]) + tuple(obj[i] / obj[i].sum())))
    kept = merge_window_detections(dets, nms_iou)
    C = scorer.num_classes
    if not kept:
        return ObjectView(np.zeros((0, 4, 2)), np.zeros((0, C)), np.zeros(0, np.int64), np.zeros(0),
                          np.zeros((0, scene.features.shape[1])), g.image_width, g.image_height, "detections")
    d = scene.features.shape[1]
    rows = np.array([k.features for k in kept])
    return ObjectView(np.stack([k.corners() for k in kept]), rows[:, d:], np.array([k.class_index for k in kept]),
                      np.array([k.confidence for k in kept]), rows[:, :d], g.image_width, g.image_height,
                      "detections")


# -- pair stage -------------------------------------------------------------

def ppg_feature_dim() -> int:
    return pair_feature_dim(FEATURE_DIM)


def view_pair_features(view: ObjectView, s, o) -> np.ndarray:
    return pair_features(view.boxes, view.semantic, s, o, view.width, view.height)


def annotated_pair_features(scene: Scene) -> np.ndarray:
    g = scene.graph
    pos = {ob.id: i for i, ob in enumerate(g.objects)}
    pairs = sorted({(pos[t.subject_id], pos[t.object_id]) for t in g.triplets})
    if not pairs:
        return np.zeros((0, ppg_feature_dim()))
    s, o = (np.array(v, dtype=np.int64) for v in zip(*pairs))
    return pair_features(g.boxes_array(), scene.features, s, o, g.image_width, g.image_height)


def select_pairs(view: ObjectView, ppg: PpgModel | None, k1: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k1 ordered pairs by pair score (all pairs when no model is given), in pair order."""
    s, o = all_ordered_pairs(view.num_objects)
    if ppg is None or len(s) <= k1:
        return s, o
    scores = pair_score_array(ppg, ppg.prepare(view_pair_features(view, s, o)))
    order = np.lexsort((o, s, -scores))[:k1]
    order = np.sort(order)
    return s[order], o[order]


# -- relation stage ---------------------------------------------------------

def entity_geometry(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, ENTITY_GEOM_DIM))
    c = boxes.mean(axis=1)
    e1 = boxes[:, 1] - boxes[:, 0]
    e2 = boxes[:, 2] - boxes[:, 1]
    w, h = np.linalg.norm(e1, axis=1), np.linalg.norm(e2, axis=1)
    t = np.arctan2(e1[:, 1], e1[:, 0])
    diag = math.hypot(width, height)
    return np.column_stack([c[:, 0] / width, c[:, 1] / height, w / diag * 10, h / diag * 10,
                            np.sin(2 * t), np.cos(2 * t), np.sqrt(w * h) / diag * 10])


def entity_input_dim(num_classes: int) -> int:
    return FEATURE_DIM + num_classes + ENTITY_GEOM_DIM


def relation_input_dim(num_classes: int) -> int:
    from .geometry import SPATIAL_DIM
    return SPATIAL_DIM + 2 * num_classes


def graph_inputs(view: ObjectView, s, o) -> GraphInputs:
    from .geometry import pair_spatial_features
    ent = np.hstack([view.semantic, view.class_probs, entity_geometry(view.boxes, view.width, view.height)])
    if len(s):
        sp = pair_spatial_features(view.boxes, s, o, view.width, view.height)
        rel = np.hstack([sp, view.class_probs[s], view.class_probs[o]])
    else:
        rel = np.zeros((0, relation_input_dim(view.class_probs.shape[1])))
    return GraphInputs(torch.as_tensor(ent, dtype=torch.float64), torch.as_tensor(rel, dtype=torch.float64),
                       build_adjacency(view.num_objects, s, o))


def pair_labels(graph: SceneGraph, s, o, num_relations: int) -> np.ndarray:
    """(R, C) multi-label matrix of GT relations on the given object-position pairs."""
    pos = {ob.id: i for i, ob in enumerate(graph.objects)}
    row = {(int(a), int(b)): i for i, (a, b) in enumerate(zip(s, o))}
    lab = np.zeros((len(s), num_relations), dtype=bool)
    for t in graph.triplets:
        i = row.get((pos[t.subject_id], pos[t.object_id]))
        if i is not None:
            lab[i, t.relation_index] = True
    return lab


@dataclass(eq=False)
class TrainItem:
    inputs: GraphInputs
    labels: np.ndarray


def collate(items: list[TrainItem]) -> TrainItem:
    ent, rel, subj, obj, labs = [], [], [], [], []
    off = 0
    for it in items:
        a = it.inputs.adjacency
        ent.append(it.inputs.entity_x)
        rel.append(it.inputs.relation_x)
        subj.append(a.subjects + off)
        obj.append(a.objects + off)
        labs.append(it.labels)
        off += a.num_entities
    adj = build_adjacency(off, np.concatenate(subj), np.concatenate(obj))
    return TrainItem(GraphInputs(torch.cat(ent), torch.cat(rel), adj), np.concatenate(labs))


def rpcm_epoch(model: RelationPredictor, optimizer, items: list[TrainItem], seed: int, epoch: int,
               batch_scenes: int, bg_ratio: float | None) -> dict:
    rng = np.random.default_rng(seeded(seed, 0x4C, epoch))
    order = rng.permutation(len(items))
    sums: dict = {}
    nb = 0
    for b in range(0, len(order), batch_scenes):
        batch = collate([items[i] for i in order[b:b + batch_scenes]])
        if batch.inputs.adjacency.num_relations == 0:
            continue
        sp, st = build_samples(batch.labels, model.bank.background, rng, bg_ratio)
        optimizer.zero_grad()
        losses = model.losses(batch.inputs, batch.labels, sp, st)
        if not torch.isfinite(losses["total"]):
            from .ppg import TrainingError
            raise TrainingError(f"relation loss diverged at epoch {epoch}")
        losses["total"].backward()
        optimizer.step()
        for k, v in losses.items():
            sums[k] = sums.get(k, 0.0) + float(v.detach())
        nb += 1
    return {k: v / max(nb, 1) for k, v in sums.items()}


# -- frequency baseline -----------------------------------------------------

class FrequencyBaseline:
    """P(relation | subject class, object class) over all ordered object pairs."""

    def __init__(self, num_objects: int, num_relations: int):
        self.counts = np.zeros((num_objects, num_objects, num_relations))
        self.pairs = np.zeros((num_objects, num_objects))

    def fit(self, scenes) -> "FrequencyBaseline":
        for sc in scenes:
            g = sc.graph
            if not g.objects:
                continue
            cls = g.class_array()
            s, o = all_ordered_pairs(len(cls))
            np.add.at(self.pairs, (cls[s], cls[o]), 1)
            pos = {ob.id: i for i, ob in enumerate(g.objects)}
            for t in g.triplets:
                self.counts[cls[pos[t.subject_id]], cls[pos[t.object_id]], t.relation_index] += 1
        return self

    def probabilities(self, view: ObjectView, s, o) -> np.ndarray:
        cs, co = view.classes[s], view.classes[o]
        with np.errstate(invalid="ignore", divide="ignore"):
            p = self.counts[cs, co] / self.pairs[cs, co][:, None]
        return np.nan_to_num(p)


# -- triplet ranking --------------------------------------------------------

def triplet_predictions(view: ObjectView, s, o, probs: np.ndarray) -> ImagePrediction:
    """One candidate per (pair, relation class); score = p(rel) * conf(subject) * conf(object)."""
    s = np.asarray(s, dtype=np.int64)
    o = np.asarray(o, dtype=np.int64)
    R, C = probs.shape if len(s) else (0, 0)
    if R == 0:
        return ImagePrediction.empty(view.boxes, view.classes, view.source)
    score = probs * (view.confidence[s] * view.confidence[o])[:, None]
    return ImagePrediction(view.boxes, view.classes, np.repeat(s, C), np.repeat(o, C),
                           np.tile(np.arange(C), R), score.ravel(), view.source)


def oracle_predictions(scene: Scene, source: str = "gt_boxes_labels") -> ImagePrediction:
    g = scene.graph
    pos = {ob.id: i for i, ob in enumerate(g.objects)}
    t = g.triplets
    return ImagePrediction(g.boxes_array() if g.objects else np.zeros((0, 4, 2)),
                           g.class_array() if g.objects else np.zeros(0, np.int64),
                           [pos[x.subject_id] for x in t], [pos[x.object_id] for x in t],
                           [x.relation_index for x in t], np.ones(len(t)), source)
