"""Cascade scene-graph toolkit for large oriented-box scenes.

Detection harness, adversarial pair proposal, context-aware relation
prediction with prototypes, and multi-label recall evaluation, runnable end to
end on bundled synthetic scenes.
"""

from .core import (
    CategoryVocabulary,
    ObjectInstance,
    OrientedBox,
    SceneGraph,
    Triplet,
)
from .evaluation import EvalConfig, EvalReport, evaluate_task, hmr_at_k
from .geometry import pairwise_rotated_iou, rotated_iou

__version__ = "0.1.0"

__all__ = [
    "CategoryVocabulary",
    "EvalConfig",
    "EvalReport",
    "ObjectInstance",
    "OrientedBox",
    "SceneGraph",
    "Triplet",
    "evaluate_task",
    "hmr_at_k",
    "pairwise_rotated_iou",
    "rotated_iou",
]
