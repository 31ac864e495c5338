"""Plain-text annotation / vocabulary formats and scene-graph validation.

Object file, one object per line::

    x1 y1 x2 y2 x3 y3 x4 y4 class_name

Triplet file, one triplet per line (object indices are 0-based positions in
the object file; relation names may contain spaces)::

    subject_index relation name object_index

Blank lines and ``#`` comments are ignored, except an optional
``# image_size W H`` header in the object file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .core import (
    AnnotationParseError,
    CategoryVocabulary,
    ObjectInstance,
    OrientedBox,
    SceneGraph,
    Triplet,
    ValidationError,
    VocabularyError,
    box_violations,
)

BOUNDS_SLACK = 0.05

STRUCTURAL = "structural"
ADMISSIBILITY = "admissibility"


@dataclass(frozen=True)
class Violation:
    rule: str
    element: str
    message: str
    severity: str = STRUCTURAL


def _content_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield lineno, line


def _image_size_header(text: str):
    for raw in text.splitlines():
        parts = raw.strip().lstrip("#").split()
        if raw.strip().startswith("#") and len(parts) == 3 and parts[0] == "image_size":
            try:
                return float(parts[1]), float(parts[2])
            except ValueError:
                raise AnnotationParseError(f"bad image_size header: {raw.strip()!r}") from None
    return None


def parse_annotation_file(object_text: str, triplet_text: str, vocab: CategoryVocabulary,
                          image_size: tuple[float, float] | None = None) -> SceneGraph:
    """Parse the object/triplet text pair into a validated SceneGraph.

    Object ids are list positions. Image size comes from ``image_size``, then
    the ``# image_size`` header, and otherwise from the corner extent.
    """
    objects = []
    for lineno, line in _content_lines(object_text):
        parts = line.split()
        if len(parts) < 9:
            raise AnnotationParseError(f"object line {lineno}: expected 8 coordinates and a class name")
        try:
            coords = [float(v) for v in parts[:8]]
        except ValueError:
            raise AnnotationParseError(f"object line {lineno}: malformed coordinates {parts[:8]}") from None
        if not all(math.isfinite(v) for v in coords):
            raise AnnotationParseError(f"object line {lineno}: non-finite coordinate")
        name = " ".join(parts[8:])
        try:
            cls = vocab.object_index(name)
        except VocabularyError as exc:
            raise VocabularyError(f"object line {lineno}: {exc}") from None
        box = OrientedBox(tuple(zip(coords[0::2], coords[1::2])))
        objects.append(ObjectInstance(len(objects), cls, box))

    triplets = []
    for lineno, line in _content_lines(triplet_text):
        parts = line.split()
        if len(parts) < 3:
            raise AnnotationParseError(f"triplet line {lineno}: expected 'subject relation object'")
        try:
            s, o = int(parts[0]), int(parts[-1])
        except ValueError:
            raise AnnotationParseError(f"triplet line {lineno}: object indices must be integers") from None
        name = " ".join(parts[1:-1])
        try:
            rel = vocab.relation_index(name)
        except VocabularyError as exc:
            raise VocabularyError(f"triplet line {lineno}: {exc}") from None
        if s == o:
            raise ValidationError(f"triplet line {lineno}: self-loop on object {s}")
        triplets.append(Triplet(s, o, rel, 1.0))

    if image_size is None:
        image_size = _image_size_header(object_text)
    if image_size is None:
        xs = [x for ob in objects for x, _ in ob.box.corners] or [1.0]
        ys = [y for ob in objects for _, y in ob.box.corners] or [1.0]
        image_size = (max(1.0, math.ceil(max(xs))), max(1.0, math.ceil(max(ys))))
    graph = SceneGraph(float(image_size[0]), float(image_size[1]), tuple(objects), tuple(triplets))

    structural = [v for v in validate_scene_graph(graph, vocab) if v.severity == STRUCTURAL]
    if structural:
        v = structural[0]
        raise ValidationError(f"{v.rule} at {v.element}: {v.message}")
    return graph


def validate_scene_graph(g: SceneGraph, vocab: CategoryVocabulary) -> list[Violation]:
    out: list[Violation] = []
    ids = set()
    lo_x, hi_x = -BOUNDS_SLACK * g.image_width, (1 + BOUNDS_SLACK) * g.image_width
    lo_y, hi_y = -BOUNDS_SLACK * g.image_height, (1 + BOUNDS_SLACK) * g.image_height
    for pos, ob in enumerate(g.objects):
        where = f"object[{pos}] id={ob.id}"
        if ob.id < 0:
            out.append(Violation("negative-object-id", where, "object ids must be >= 0"))
        if ob.id in ids:
            out.append(Violation("duplicate-object-id", where, "object id already used"))
        ids.add(ob.id)
        if not 0 <= ob.class_index < vocab.num_objects:
            out.append(Violation("bad-class-index", where, f"class index {ob.class_index} out of range"))
        for problem in box_violations(ob.box):
            out.append(Violation("invalid-box", where, problem))
        if any(not (lo_x <= x <= hi_x and lo_y <= y <= hi_y) for x, y in ob.box.corners):
            out.append(Violation("out-of-bounds", where, "box corner outside the image (5% slack)"))

    classes = {ob.id: ob.class_index for ob in g.objects}
    seen = set()
    for pos, t in enumerate(g.triplets):
        where = f"triplet[{pos}] ({t.subject_id}, {t.relation_index}, {t.object_id})"
        if t.subject_id == t.object_id:
            out.append(Violation("self-loop", where, "subject and object are the same object"))
        missing = [i for i in (t.subject_id, t.object_id) if i not in classes]
        if missing:
            out.append(Violation("dangling-reference", where, f"unknown object ids {missing}"))
        if not 0 <= t.relation_index < vocab.num_relations:
            out.append(Violation("bad-relation-index", where, f"relation index {t.relation_index} out of range"))
        if not 0.0 <= t.score <= 1.0:
            out.append(Violation("bad-score", where, f"score {t.score} outside [0, 1]"))
        if t.key in seen:
            out.append(Violation("duplicate-triplet", where, "triplet listed twice"))
        seen.add(t.key)
        if (not missing and 0 <= t.relation_index < vocab.num_relations
                and not vocab.is_admissible(classes[t.subject_id], t.relation_index, classes[t.object_id])):
            out.append(Violation("inadmissible-combination", where,
                                 "combination absent from the interaction map", ADMISSIBILITY))
    return out


def format_annotation(g: SceneGraph, vocab: CategoryVocabulary) -> tuple[str, str]:
    """Inverse of :func:`parse_annotation_file` (object text, triplet text)."""
    position = {ob.id: i for i, ob in enumerate(g.objects)}
    obj_lines = [f"# image_size {g.image_width!r} {g.image_height!r}"]
    for ob in g.objects:
        coords = " ".join(repr(v) for xy in ob.box.corners for v in xy)
        obj_lines.append(f"{coords} {vocab.object_classes[ob.class_index]}")
    trip_lines = [
        f"{position[t.subject_id]} {vocab.relation_classes[t.relation_index]} {position[t.object_id]}"
        for t in g.triplets
    ]
    return "\n".join(obj_lines) + "\n", "\n".join(trip_lines) + ("\n" if trip_lines else "")


def write_annotation(g: SceneGraph, vocab: CategoryVocabulary, stem: Path) -> tuple[Path, Path]:
    obj_text, trip_text = format_annotation(g, vocab)
    stem = Path(stem)
    obj_path = stem.with_name(stem.name + ".objects.txt")
    trip_path = stem.with_name(stem.name + ".triplets.txt")
    obj_path.write_text(obj_text)
    trip_path.write_text(trip_text)
    return obj_path, trip_path


def read_annotation(stem: Path, vocab: CategoryVocabulary) -> SceneGraph:
    stem = Path(stem)
    obj_text = stem.with_name(stem.name + ".objects.txt").read_text()
    trip_text = stem.with_name(stem.name + ".triplets.txt").read_text()
    return parse_annotation_file(obj_text, trip_text, vocab)


def scene_graph_to_json(g: SceneGraph, vocab: CategoryVocabulary) -> str:
    doc = {
        "image_height": g.image_height,
        "image_width": g.image_width,
        "objects": [
            {"class": vocab.object_classes[o.class_index], "corners": [list(c) for c in o.box.corners], "id": o.id}
            for o in g.objects
        ],
        "triplets": [
            {"object": t.object_id, "relation": vocab.relation_classes[t.relation_index],
             "score": t.score, "subject": t.subject_id}
            for t in g.triplets
        ],
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def scene_graph_from_json(text: str, vocab: CategoryVocabulary) -> SceneGraph:
    doc = json.loads(text)
    objects = tuple(
        ObjectInstance(int(o["id"]), vocab.object_index(o["class"]),
                       OrientedBox(tuple(tuple(c) for c in o["corners"])))
        for o in doc["objects"]
    )
    triplets = tuple(
        Triplet(int(t["subject"]), int(t["object"]), vocab.relation_index(t["relation"]), float(t["score"]))
        for t in doc["triplets"]
    )
    return SceneGraph(float(doc["image_width"]), float(doc["image_height"]), objects, triplets)


# -- vocabulary files -------------------------------------------------------

def parse_vocabulary(text: str) -> CategoryVocabulary:
    """Parse a vocabulary with ``[objects]``, ``[relations]``, ``[interactions]`` sections.

    Interaction lines read ``subject_class relation name object_class``.
    """
    sections: dict[str, list[tuple[int, str]]] = {"objects": [], "relations": [], "interactions": []}
    current = None
    for lineno, line in _content_lines(text):
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if current not in sections:
                raise VocabularyError(f"vocabulary line {lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise VocabularyError(f"vocabulary line {lineno}: entry before any section header")
        sections[current].append((lineno, line))
    interactions = []
    for lineno, line in sections["interactions"]:
        parts = line.split()
        if len(parts) < 3:
            raise VocabularyError(f"vocabulary line {lineno}: interaction needs subject, relation, object")
        interactions.append((parts[0], " ".join(parts[1:-1]), parts[-1]))
    return CategoryVocabulary.from_names(
        [" ".join(l.split()) for _, l in sections["objects"]],
        [" ".join(l.split()) for _, l in sections["relations"]],
        interactions,
    )


def format_vocabulary(vocab: CategoryVocabulary) -> str:
    lines = ["[objects]", *vocab.object_classes, "", "[relations]", *vocab.relation_classes, "", "[interactions]"]
    for s, r, o in sorted(vocab.interaction_map):
        lines.append(f"{vocab.object_classes[s]} {vocab.relation_classes[r]} {vocab.object_classes[o]}")
    return "\n".join(lines) + "\n"


def load_vocabulary(path) -> CategoryVocabulary:
    return parse_vocabulary(Path(path).read_text())


def bundled_vocabulary(name: str = "synthetic") -> CategoryVocabulary:
    """``synthetic`` (toy scenes) or ``star_partial`` (the real dataset's class names that are bundled)."""
    ref = resources.files("cascade_sgg") / "data" / f"{name}.vocab"
    return parse_vocabulary(ref.read_text())
