"""Procedural toy scenes with a deterministic rule-based relationship oracle.

A recipe lists object classes (count range, size range, placement layout) and
relationship rules. Each rule is a geometric predicate over an ordered
(subject, object) pair that emits one relation class when it holds. Several
rules may fire on one pair, which gives multi-label ground truth.

Predicates (distances are between box centres, in pixels):

``within``          d < max_distance
``between``         min_distance <= d < max_distance
``aligned_within``  d < max_distance and orientation gap <= max_angle_deg
``inside``          subject centre inside the object box (optionally aligned)
``nearest``         object is among the subject's ``k`` nearest instances of
                    the object class (and d < max_distance)
``same_anchor``     subject and object share the same nearest ``anchor``
                    instance, both within ``max_distance`` of it
``different_anchor`` both are within ``max_distance`` of an ``anchor``
                    instance, but their nearest anchors differ
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .annotations import bundled_vocabulary, load_vocabulary
from .core import CategoryVocabulary, ObjectInstance, OrientedBox, SceneGraph, Triplet

FEATURE_DIM = 64
MAX_PLACEMENT_TRIES = 200

PREDICATES = ("within", "between", "aligned_within", "inside", "nearest", "same_anchor", "different_anchor")
LAYOUTS = ("uniform", "spread", "edge", "near", "inside", "chain")


class GenerationError(RuntimeError):
    pass


class RecipeError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    name: str
    count: tuple[int, int]
    width: tuple[float, float]
    height: tuple[float, float]
    layout: dict = field(default_factory=lambda: {"kind": "uniform"})


@dataclass(frozen=True)
class RelationRule:
    relation: str
    subject: str
    object: str
    predicate: str
    params: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return f"{self.subject} {self.relation} {self.object} [{self.predicate}]"


@dataclass(frozen=True)
class SceneRecipe:
    name: str
    seed: int
    image_size: tuple[int, int]
    classes: tuple[ClassSpec, ...]
    rules: tuple[RelationRule, ...]
    vocab: CategoryVocabulary = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.vocab is None:
            object.__setattr__(self, "vocab", bundled_vocabulary("synthetic"))
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "rules", tuple(self.rules))
        validate_recipe(self)

    def with_seed(self, seed: int) -> "SceneRecipe":
        return dataclasses.replace(self, seed=int(seed))


def validate_recipe(recipe: SceneRecipe) -> None:
    vocab = recipe.vocab
    w, h = recipe.image_size
    if w <= 0 or h <= 0:
        raise RecipeError("image size must be positive")
    placed = set()
    for spec in recipe.classes:
        vocab.object_index(spec.name)
        lo, hi = spec.count
        if not 0 <= lo <= hi:
            raise RecipeError(f"{spec.name}: bad count range {spec.count}")
        for rng_name in ("width", "height"):
            a, b = getattr(spec, rng_name)
            if not 0 < a <= b:
                raise RecipeError(f"{spec.name}: {rng_name} range must be positive")
        kind = spec.layout.get("kind", "uniform")
        if kind not in LAYOUTS:
            raise RecipeError(f"{spec.name}: unknown layout {kind!r}")
        anchor = spec.layout.get("anchor")
        if kind in ("near", "inside"):
            if anchor not in placed:
                raise RecipeError(f"{spec.name}: anchor {anchor!r} must be a class listed earlier")
        placed.add(spec.name)
    for rule in recipe.rules:
        if rule.predicate not in PREDICATES:
            raise RecipeError(f"rule {rule.name}: unknown predicate")
        s = vocab.object_index(rule.subject)
        o = vocab.object_index(rule.object)
        r = vocab.relation_index(rule.relation)
        if not vocab.is_admissible(s, r, o):
            raise RecipeError(f"rule {rule.name}: combination absent from the interaction map")
        for key, value in rule.params.items():
            if key in ("anchor",):
                vocab.object_index(value)
            elif not isinstance(value, (int, float)) or value <= 0:
                raise RecipeError(f"rule {rule.name}: parameter {key} must be positive")
        if rule.predicate in ("same_anchor", "different_anchor") and "anchor" not in rule.params:
            raise RecipeError(f"rule {rule.name}: needs an anchor class")


# -- recipe files -----------------------------------------------------------

def recipe_from_dict(doc: dict, vocab: CategoryVocabulary | None = None) -> SceneRecipe:
    if vocab is None:
        ref = doc.get("vocabulary", "synthetic")
        vocab = load_vocabulary(ref) if Path(str(ref)).suffix == ".vocab" else bundled_vocabulary(ref)
    classes = tuple(
        ClassSpec(c["name"], tuple(c["count"]), tuple(c["width"]), tuple(c["height"]),
                  dict(c.get("layout", {"kind": "uniform"})))
        for c in doc["classes"]
    )
    rules = tuple(
        RelationRule(r["relation"], r["subject"], r["object"], r["predicate"], dict(r.get("params", {})))
        for r in doc.get("rules", [])
    )
    return SceneRecipe(doc["name"], int(doc.get("seed", 0)), tuple(doc["image_size"]), classes, rules, vocab)


def recipe_to_dict(recipe: SceneRecipe) -> dict:
    return {
        "name": recipe.name,
        "seed": recipe.seed,
        "image_size": list(recipe.image_size),
        "classes": [
            {"name": c.name, "count": list(c.count), "width": list(c.width), "height": list(c.height),
             "layout": c.layout}
            for c in recipe.classes
        ],
        "rules": [
            {"relation": r.relation, "subject": r.subject, "object": r.object, "predicate": r.predicate,
             "params": r.params}
            for r in recipe.rules
        ],
    }


def load_recipe(path, vocab: CategoryVocabulary | None = None) -> SceneRecipe:
    return recipe_from_dict(json.loads(Path(path).read_text()), vocab)


BUNDLED_RECIPES = ("harbor", "airport", "power_line")


def bundled_recipe(name: str, seed: int = 0) -> SceneRecipe:
    ref = resources.files("cascade_sgg") / "data" / "recipes" / f"{name}.json"
    return recipe_from_dict(json.loads(ref.read_text())).with_seed(seed)


# -- placement --------------------------------------------------------------

def _fits(box: OrientedBox, width: float, height: float) -> bool:
    return all(0.0 <= x <= width and 0.0 <= y <= height for x, y in box.corners)


def _overlaps_same_class(box: OrientedBox, others: list[OrientedBox]) -> bool:
    if not others:
        return False
    from .geometry import pairwise_rotated_iou
    return bool(np.any(pairwise_rotated_iou(box.as_array()[None], np.stack([o.as_array() for o in others])) > 0.0))


def _propose(spec: ClassSpec, rng: np.random.Generator, placed: dict, own: list, W: float, H: float,
             chain_state: dict):
    lay = spec.layout
    kind = lay.get("kind", "uniform")
    w = rng.uniform(*spec.width)
    h = rng.uniform(*spec.height)
    jitter = math.radians(lay.get("jitter_deg", 0.0))
    free_angle = rng.uniform(-math.pi / 2, math.pi / 2)
    if kind in ("uniform", "spread"):
        m = max(w, h) / 2
        if 2 * m > min(W, H):
            return None
        cx, cy = rng.uniform(m, W - m), rng.uniform(m, H - m)
        theta = free_angle if lay.get("free_angle", True) else rng.normal(0, jitter)
        if kind == "spread" and own:
            min_sep = lay.get("min_separation", 0.0)
            if any(math.dist((cx, cy), o.center) < min_sep for o in own):
                return None
    elif kind == "edge":
        band = lay.get("band", 60.0)
        side = lay.get("side", "left")
        if w > (H if side in ("left", "right") else W):
            return None
        along = rng.uniform(w / 2, (H if side in ("left", "right") else W) - w / 2)
        off = rng.uniform(h / 2, h / 2 + band)
        if side == "left":
            cx, cy, theta = off, along, math.pi / 2
        elif side == "right":
            cx, cy, theta = W - off, along, math.pi / 2
        elif side == "top":
            cx, cy, theta = along, off, 0.0
        else:
            cx, cy, theta = along, H - off, 0.0
        theta += rng.normal(0, jitter)
    elif kind in ("near", "inside"):
        anchors = placed.get(lay["anchor"], [])
        if not anchors:
            return "no-anchor"
        a = anchors[rng.integers(len(anchors))]
        acx, acy, aw, ah, at = a.to_rbox()
        if kind == "near":
            dist = rng.uniform(*lay.get("distance", (0.0, 100.0)))
            phi = rng.uniform(0, 2 * math.pi)
            cx, cy = acx + dist * math.cos(phi), acy + dist * math.sin(phi)
        else:
            margin = lay.get("margin", 0.0)
            u = rng.uniform(-max(aw / 2 - margin, 0), max(aw / 2 - margin, 0))
            v = rng.uniform(-max(ah / 2 - margin, 0), max(ah / 2 - margin, 0))
            cx = acx + math.cos(at) * u - math.sin(at) * v
            cy = acy + math.sin(at) * u + math.cos(at) * v
        align_prob = lay.get("align_prob", 0.0)
        if rng.uniform() < align_prob:
            theta = at + rng.normal(0, jitter)
        else:
            theta = free_angle
    elif kind == "chain":
        # position/heading advance only once a proposal is accepted
        if "pos" not in chain_state:
            margin = lay.get("margin", 80.0)
            cx, cy = margin, rng.uniform(H / 4, 3 * H / 4)
            heading = rng.normal(0.0, 0.15)
        else:
            step = rng.uniform(*lay.get("spacing", (200.0, 300.0)))
            heading = chain_state["base"] + rng.normal(0.0, math.radians(lay.get("turn_deg", 15.0)))
            px, py = chain_state["pos"]
            cx, cy = px + step * math.cos(heading), py + step * math.sin(heading)
        chain_state["candidate"] = ((cx, cy), heading)
        theta = rng.normal(0, jitter)
    else:  # pragma: no cover - validated earlier
        raise RecipeError(kind)
    return OrientedBox.from_rbox(cx, cy, w, h, theta)


def generate_scene(recipe: SceneRecipe) -> SceneGraph:
    """Place objects per the recipe and label them with :func:`relationship_oracle`."""
    rng = np.random.default_rng(np.random.SeedSequence([int(recipe.seed), 0x5CE7E]))
    W, H = map(float, recipe.image_size)
    vocab = recipe.vocab
    placed: dict[str, list[OrientedBox]] = {}
    objects: list[ObjectInstance] = []
    for spec in recipe.classes:
        n = int(rng.integers(spec.count[0], spec.count[1] + 1))
        own: list[OrientedBox] = []
        chain_state: dict = {}
        for _ in range(n):
            for _attempt in range(MAX_PLACEMENT_TRIES):
                box = _propose(spec, rng, placed, own, W, H, chain_state)
                if box == "no-anchor":
                    box = None
                    break
                if box is None or not _fits(box, W, H) or _overlaps_same_class(box, own):
                    continue
                break
            else:
                box = None
            if box is None:
                if spec.layout.get("kind") in ("near", "inside") and not placed.get(spec.layout["anchor"]):
                    break
                raise GenerationError(
                    f"recipe {recipe.name!r}: could not place {spec.name} with layout "
                    f"{spec.layout.get('kind', 'uniform')} after {MAX_PLACEMENT_TRIES} tries"
                )
            if "candidate" in chain_state:
                chain_state["pos"], heading = chain_state.pop("candidate")
                chain_state.setdefault("base", heading)
            own.append(box)
            objects.append(ObjectInstance(len(objects), vocab.object_index(spec.name), box))
        placed[spec.name] = placed.get(spec.name, []) + own
    triplets = relationship_oracle(objects, recipe.rules, vocab)
    return SceneGraph(W, H, tuple(objects), tuple(triplets))


# -- relationship oracle ----------------------------------------------------

def _inside(point, box: OrientedBox) -> bool:
    px, py = point
    p = box.corners
    signs = []
    for i in range(4):
        ax, ay = p[i]
        bx, by = p[(i + 1) % 4]
        signs.append((bx - ax) * (py - ay) - (by - ay) * (px - ax))
    return all(s >= 0 for s in signs) or all(s <= 0 for s in signs)


def _angle_gap(a: float, b: float) -> float:
    d = math.fmod(abs(a - b), math.pi)
    return min(d, math.pi - d)


class _Geometry:
    def __init__(self, objects):
        self.objects = list(objects)
        self.centers = np.array([o.box.center for o in self.objects]).reshape(-1, 2)
        self.angles = np.array([o.box.angle for o in self.objects])
        self.classes = np.array([o.class_index for o in self.objects], dtype=np.int64)
        diff = self.centers[:, None, :] - self.centers[None, :, :]
        self.dist = np.hypot(diff[..., 0], diff[..., 1])
        self._nearest_anchor: dict[int, np.ndarray] = {}

    def nearest_anchor(self, anchor_cls: int):
        if anchor_cls not in self._nearest_anchor:
            idx = np.flatnonzero(self.classes == anchor_cls)
            best = np.full(len(self.objects), -1, dtype=np.int64)
            best_d = np.full(len(self.objects), np.inf)
            for i in range(len(self.objects)):
                cand = idx[idx != i]
                if len(cand):
                    d = self.dist[i, cand]
                    k = int(np.argmin(d))
                    best[i], best_d[i] = cand[k], d[k]
            self._nearest_anchor[anchor_cls] = (best, best_d)
        return self._nearest_anchor[anchor_cls]


def _rule_holds(rule: RelationRule, i: int, j: int, geo: _Geometry, vocab: CategoryVocabulary) -> bool:
    p = rule.params
    d = geo.dist[i, j]
    pred = rule.predicate
    if pred == "within":
        return d < p["max_distance"]
    if pred == "between":
        return p.get("min_distance", 0.0) <= d < p.get("max_distance", math.inf)
    if pred == "aligned_within":
        return d < p["max_distance"] and \
            math.degrees(_angle_gap(geo.angles[i], geo.angles[j])) <= p.get("max_angle_deg", 10.0)
    if pred == "inside":
        if not _inside(geo.centers[i], geo.objects[j].box):
            return False
        if "max_angle_deg" in p:
            return math.degrees(_angle_gap(geo.angles[i], geo.angles[j])) <= p["max_angle_deg"]
        return True
    if pred == "nearest":
        if d >= p.get("max_distance", math.inf):
            return False
        same = np.flatnonzero((geo.classes == geo.classes[j]) & (np.arange(len(geo.classes)) != i))
        closer = np.sum(geo.dist[i, same] < d)
        return closer < int(p.get("k", 1))
    if pred in ("same_anchor", "different_anchor"):
        best, best_d = geo.nearest_anchor(vocab.object_index(p["anchor"]))
        r = p.get("max_distance", math.inf)
        if best[i] < 0 or best[j] < 0 or best_d[i] >= r or best_d[j] >= r:
            return False
        return (best[i] == best[j]) == (pred == "same_anchor")
    raise RecipeError(f"unknown predicate {pred!r}")


def relationship_oracle(objects, rules, vocab: CategoryVocabulary) -> list[Triplet]:
    """Ground-truth triplets for every ordered pair, sorted by (subject, object, relation)."""
    objects = list(objects)
    if len(objects) < 2 or not rules:
        return []
    geo = _Geometry(objects)
    compiled = [(vocab.object_index(r.subject), vocab.relation_index(r.relation), vocab.object_index(r.object), r)
                for r in rules]
    found = set()
    for i, si in enumerate(objects):
        for j, oj in enumerate(objects):
            if i == j:
                continue
            for s_cls, rel, o_cls, rule in compiled:
                if si.class_index == s_cls and oj.class_index == o_cls and _rule_holds(rule, i, j, geo, vocab):
                    found.add((si.id, oj.id, rel))
    return [Triplet(s, o, r, 1.0) for s, o, r in sorted(found)]


# -- synthetic appearance features -----------------------------------------

def class_feature_means(num_classes: int, dim: int = FEATURE_DIM, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    rows = [np.random.default_rng(np.random.SeedSequence([seed, 0xFEA7, c])).normal(0.0, scale, dim)
            for c in range(num_classes)]
    return np.array(rows).reshape(num_classes, dim)


def object_features(scene: SceneGraph, num_classes: int, scene_seed: int, dim: int = FEATURE_DIM,
                    feature_seed: int = 0, noise: float = 0.5) -> np.ndarray:
    """Class-conditioned Gaussian appearance vectors, one row per object."""
    means = class_feature_means(num_classes, dim, feature_seed)
    rng = np.random.default_rng(np.random.SeedSequence([feature_seed, 0x0B1E, int(scene_seed)]))
    if not scene.objects:
        return np.zeros((0, dim))
    cls = scene.class_array()
    return means[cls] + rng.normal(0.0, noise, (len(cls), dim))


def long_range_fraction(scene: SceneGraph, diag_fraction: float = 0.25) -> tuple[int, int]:
    """(long-range pairs, annotated pairs): IoU 0 and centre distance > fraction of the diagonal."""
    from .geometry import rotated_iou
    pairs = scene.pairs()
    if not pairs:
        return 0, 0
    diag = math.hypot(scene.image_width, scene.image_height)
    far = 0
    for s, o in pairs:
        a, b = scene.object_by_id(s).box, scene.object_by_id(o).box
        if rotated_iou(a, b) == 0.0 and math.dist(a.center, b.center) > diag_fraction * diag:
            far += 1
    return far, len(pairs)
