"""Domain types: oriented boxes, vocabularies, objects, triplets, scene graphs.

Coordinates are pixels, origin top-left, y pointing down. Corners are listed
clockwise *as seen on screen*. ``OrientedBox.signed_area`` reports area in
the mathematical (y-up) orientation, so a valid clockwise box has a negative
signed area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class SceneGraphError(ValueError):
    """Base error for malformed annotations and scene graphs."""


class VocabularyError(SceneGraphError):
    pass


class AnnotationParseError(SceneGraphError):
    pass


class ValidationError(SceneGraphError):
    pass


def _wrap_half_pi(angle: float) -> float:
    """Wrap an angle into (-pi/2, pi/2]."""
    a = math.fmod(angle, math.pi)
    if a <= -math.pi / 2:
        a += math.pi
    elif a > math.pi / 2:
        a -= math.pi
    return a


@dataclass(frozen=True)
class OrientedBox:
    corners: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.corners)
        if len(pts) != 4:
            raise ValueError(f"an oriented box needs 4 corners, got {len(pts)}")
        if not all(math.isfinite(v) for p in pts for v in p):
            raise ValueError("box corners must be finite")
        object.__setattr__(self, "corners", pts)

    @classmethod
    def from_array(cls, arr) -> "OrientedBox":
        arr = np.asarray(arr, dtype=np.float64).reshape(4, 2)
        return cls(tuple(map(tuple, arr.tolist())))

    @classmethod
    def from_rbox(cls, cx: float, cy: float, w: float, h: float, theta: float) -> "OrientedBox":
        """Rectangle with centre (cx, cy), side lengths w, h, rotated by theta.

        At theta=0 the corners come out top-left, top-right, bottom-right,
        bottom-left, which is clockwise on screen.
        """
        c, s = math.cos(theta), math.sin(theta)
        pts = []
        for lx, ly in ((-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)):
            pts.append((cx + c * lx - s * ly, cy + s * lx + c * ly))
        return cls(tuple(pts))

    @classmethod
    def axis_aligned(cls, x_min: float, y_min: float, x_max: float, y_max: float) -> "OrientedBox":
        return cls(((x_min, y_min), (x_max, y_min), (x_max, y_max), (x_min, y_max)))

    def as_array(self) -> np.ndarray:
        return np.array(self.corners, dtype=np.float64)

    @property
    def signed_area(self) -> float:
        # y-up convention: negate the raw pixel-space shoelace sum
        p = self.corners
        s = 0.0
        for i in range(4):
            x0, y0 = p[i]
            x1, y1 = p[(i + 1) % 4]
            s += x0 * y1 - x1 * y0
        return -0.5 * s

    @property
    def area(self) -> float:
        return abs(self.signed_area)

    @property
    def center(self) -> tuple[float, float]:
        xs, ys = zip(*self.corners)
        return (sum(xs) / 4.0, sum(ys) / 4.0)

    @property
    def width(self) -> float:
        (x0, y0), (x1, y1) = self.corners[0], self.corners[1]
        return math.hypot(x1 - x0, y1 - y0)

    @property
    def height(self) -> float:
        (x1, y1), (x2, y2) = self.corners[1], self.corners[2]
        return math.hypot(x2 - x1, y2 - y1)

    @property
    def angle(self) -> float:
        """Direction of the first edge, wrapped to (-pi/2, pi/2]."""
        (x0, y0), (x1, y1) = self.corners[0], self.corners[1]
        return _wrap_half_pi(math.atan2(y1 - y0, x1 - x0))

    def to_rbox(self) -> tuple[float, float, float, float, float]:
        cx, cy = self.center
        return cx, cy, self.width, self.height, self.angle

    def translated(self, dx: float, dy: float) -> "OrientedBox":
        return OrientedBox(tuple((x + dx, y + dy) for x, y in self.corners))

    def rotated(self, theta: float, about: tuple[float, float] = (0.0, 0.0)) -> "OrientedBox":
        c, s = math.cos(theta), math.sin(theta)
        ox, oy = about
        return OrientedBox(tuple(
            (ox + c * (x - ox) - s * (y - oy), oy + s * (x - ox) + c * (y - oy))
            for x, y in self.corners
        ))


def box_violations(box: OrientedBox) -> list[str]:
    """Geometric invariants an annotated box must satisfy."""
    problems = []
    p = box.corners
    crosses = []
    for i in range(4):
        ax, ay = p[i]
        bx, by = p[(i + 1) % 4]
        cx, cy = p[(i + 2) % 4]
        crosses.append((bx - ax) * (cy - by) - (by - ay) * (cx - bx))
    if box.area <= 0.0:
        problems.append("zero-area box")
    elif not (all(c > 0 for c in crosses) or all(c < 0 for c in crosses)):
        problems.append("box is not a simple convex quadrilateral")
    elif box.signed_area > 0:
        problems.append("box corners are counter-clockwise")
    return problems


@dataclass(frozen=True)
class CategoryVocabulary:
    object_classes: tuple[str, ...]
    relation_classes: tuple[str, ...]
    # (subject class index, relation index, object class index); empty = unrestricted
    interaction_map: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "object_classes", tuple(self.object_classes))
        object.__setattr__(self, "relation_classes", tuple(self.relation_classes))
        object.__setattr__(self, "interaction_map", frozenset(tuple(t) for t in self.interaction_map))
        for label, names in (("object", self.object_classes), ("relation", self.relation_classes)):
            dup = {n for n in names if names.count(n) > 1}
            if dup:
                raise VocabularyError(f"duplicate {label} class names: {sorted(dup)}")
            for n in names:
                if not n or n != n.strip():
                    raise VocabularyError(f"invalid {label} class name {n!r}")
        n_obj, n_rel = len(self.object_classes), len(self.relation_classes)
        for s, r, o in self.interaction_map:
            if not (0 <= s < n_obj and 0 <= o < n_obj and 0 <= r < n_rel):
                raise VocabularyError(f"interaction {(s, r, o)} references an undeclared class")

    @classmethod
    def from_names(cls, objects: Sequence[str], relations: Sequence[str],
                   interactions: Iterable[tuple[str, str, str]] = ()) -> "CategoryVocabulary":
        obj_idx = {n: i for i, n in enumerate(objects)}
        rel_idx = {n: i for i, n in enumerate(relations)}
        triples = set()
        for s, r, o in interactions:
            try:
                triples.add((obj_idx[s], rel_idx[r], obj_idx[o]))
            except KeyError as exc:
                raise VocabularyError(f"interaction ({s}, {r}, {o}) names an undeclared class {exc}") from None
        return cls(tuple(objects), tuple(relations), frozenset(triples))

    @property
    def num_objects(self) -> int:
        return len(self.object_classes)

    @property
    def num_relations(self) -> int:
        return len(self.relation_classes)

    def object_index(self, name: str) -> int:
        try:
            return self.object_classes.index(name)
        except ValueError:
            raise VocabularyError(f"unknown object class {name!r}") from None

    def relation_index(self, name: str) -> int:
        try:
            return self.relation_classes.index(name)
        except ValueError:
            raise VocabularyError(f"unknown relation class {name!r}") from None

    def is_admissible(self, subject_class: int, relation: int, object_class: int) -> bool:
        if not self.interaction_map:
            return True
        return (subject_class, relation, object_class) in self.interaction_map


@dataclass(frozen=True)
class ObjectInstance:
    id: int
    class_index: int
    box: OrientedBox


@dataclass(frozen=True)
class Triplet:
    subject_id: int
    object_id: int
    relation_index: int
    score: float = 1.0

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.subject_id, self.relation_index, self.object_id)


@dataclass(frozen=True)
class SceneGraph:
    image_width: float
    image_height: float
    objects: tuple[ObjectInstance, ...] = field(default_factory=tuple)
    triplets: tuple[Triplet, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "triplets", tuple(self.triplets))

    def object_by_id(self, object_id: int) -> ObjectInstance:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)

    def boxes_array(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 4, 2))
        return np.stack([o.box.as_array() for o in self.objects])

    def class_array(self) -> np.ndarray:
        return np.array([o.class_index for o in self.objects], dtype=np.int64)

    def pairs(self) -> list[tuple[int, int]]:
        """Distinct annotated (subject_id, object_id) pairs, sorted."""
        return sorted({(t.subject_id, t.object_id) for t in self.triplets})
