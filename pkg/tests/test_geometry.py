import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cascade_sgg.core import OrientedBox
from cascade_sgg.geometry import (
    SPATIAL_FEATURE_NAMES,
    AxisAlignedBox,
    GeometryError,
    hbb_iou,
    obb_area,
    obb_to_hbb,
    pair_spatial_feature,
    pairwise_rotated_iou,
    rotated_iou,
)
from oracles import fuzzed_box_pairs, monte_carlo_iou, shapely_iou

F = {name: i for i, name in enumerate(SPATIAL_FEATURE_NAMES)}

UNIT = OrientedBox.axis_aligned(0, 0, 1, 1)


def test_unit_square_area():
    assert obb_area(UNIT) == 1.0


@pytest.mark.parametrize("theta", [0.1, 0.7, math.pi / 4, 2.5, -1.2])
def test_area_rotation_invariant(theta):
    assert obb_area(UNIT.rotated(theta, (0.5, 0.5))) == pytest.approx(1.0, abs=1e-12)


def test_rectangle_area_by_hand():
    assert obb_area(OrientedBox(((0, 0), (10, 0), (10, 4), (0, 4)))) == 40.0


def test_self_iou_and_disjoint():
    assert rotated_iou(UNIT, UNIT) == 1.0
    assert rotated_iou(UNIT, UNIT.translated(5, 5)) == 0.0


def test_shifted_unit_square_is_one_third():
    # overlap 0.5, union 1.5
    assert abs(rotated_iou(UNIT, UNIT.translated(0.5, 0)) - 1 / 3) <= 1e-9
    assert abs(shapely_iou(UNIT.as_array(), UNIT.translated(0.5, 0).as_array()) - 1 / 3) <= 1e-9


def test_degenerate_box_raises():
    flat = OrientedBox(((0, 0), (1, 0), (2, 0), (3, 0)))
    with pytest.raises(GeometryError):
        rotated_iou(flat, UNIT)
    with pytest.raises(GeometryError):
        pairwise_rotated_iou(flat.as_array()[None], UNIT.as_array()[None])


def test_matches_shapely_on_fuzzed_pairs():
    for a, b in fuzzed_box_pairs(7, 100):
        got = rotated_iou(OrientedBox.from_array(a), OrientedBox.from_array(b))
        assert abs(got - shapely_iou(a, b)) <= 1e-9


def test_matches_monte_carlo_on_a_few_pairs(rng):
    for a, b in fuzzed_box_pairs(8, 5):
        got = rotated_iou(OrientedBox.from_array(a), OrientedBox.from_array(b))
        assert abs(got - monte_carlo_iou(a, b, 200_000, rng)) <= 1e-2


def test_pairwise_matrix_matches_scalar_calls():
    boxes = [OrientedBox.from_array(a) for a, _ in fuzzed_box_pairs(3, 6)]
    arr = np.stack([b.as_array() for b in boxes])
    m = pairwise_rotated_iou(arr, arr[::-1])
    for i, a in enumerate(boxes):
        for j, b in enumerate(boxes[::-1]):
            assert m[i, j] == rotated_iou(a, b)
    assert pairwise_rotated_iou(arr[:0], arr).shape == (0, 6)


def test_axis_aligned_hbb_is_itself():
    h = obb_to_hbb(OrientedBox.axis_aligned(1, 2, 7, 5))
    assert h == AxisAlignedBox(1, 2, 7, 5)


def test_rotated_square_hull():
    h = obb_to_hbb(UNIT.rotated(math.pi / 4, (0.5, 0.5)))
    assert h.x_max - h.x_min == pytest.approx(math.sqrt(2))
    assert h.y_max - h.y_min == pytest.approx(math.sqrt(2))
    assert (h.x_min + h.x_max) / 2 == pytest.approx(0.5)
    assert (h.y_min + h.y_max) / 2 == pytest.approx(0.5)


def test_hull_contains_corners_and_touches_every_side(rng):
    for _ in range(20):
        b = OrientedBox.from_rbox(*rng.uniform(0, 100, 2), *rng.uniform(1, 30, 2), rng.uniform(-3, 3))
        h = obb_to_hbb(b)
        c = b.as_array()
        assert np.all((c[:, 0] >= h.x_min) & (c[:, 0] <= h.x_max))
        assert np.all((c[:, 1] >= h.y_min) & (c[:, 1] <= h.y_max))
        for v, col in ((h.x_min, 0), (h.x_max, 0), (h.y_min, 1), (h.y_max, 1)):
            assert np.any(c[:, col] == v)


def test_identical_boxes_feature():
    b = OrientedBox.from_rbox(50, 40, 10, 6, 0.3)
    f = pair_spatial_feature(b, b, 100, 100)
    for name in ("dx_norm", "dy_norm", "log_width_ratio", "log_height_ratio", "center_distance_norm",
                 "angle_difference"):
        assert f[F[name]] == pytest.approx(0.0, abs=1e-12)
    assert f[F["rotated_iou"]] == 1.0


def test_double_width_gives_log_two():
    s = OrientedBox.from_rbox(50, 40, 10, 6, 0.3)
    o = OrientedBox.from_rbox(50, 40, 20, 6, 0.3)
    assert pair_spatial_feature(s, o, 100, 100)[F["log_width_ratio"]] == pytest.approx(math.log(2), abs=1e-12)


def test_distant_boxes_feature():
    s = OrientedBox.axis_aligned(0, 0, 5, 5)
    o = OrientedBox.axis_aligned(80, 80, 90, 90)
    f = pair_spatial_feature(s, o, 100, 100)
    assert f[F["rotated_iou"]] == 0.0
    assert f[F["center_distance_norm"]] > 0


def test_feature_rejects_bad_image_size():
    with pytest.raises(GeometryError):
        pair_spatial_feature(UNIT, UNIT, 0, 10)


boxes = st.builds(
    OrientedBox.from_rbox,
    st.floats(-20, 20), st.floats(-20, 20), st.floats(0.5, 15), st.floats(0.5, 15), st.floats(-math.pi, math.pi),
)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = rotated_iou(a, b)
    assert v == rotated_iou(b, a)
    assert 0.0 <= v <= 1.0


@given(boxes, boxes, st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_iou_translation_invariant(a, b, dx, dy):
    assert rotated_iou(a.translated(dx, dy), b.translated(dx, dy)) == pytest.approx(rotated_iou(a, b), abs=1e-9)


@given(boxes, boxes, st.floats(-math.pi, math.pi), st.floats(-30, 30), st.floats(-30, 30))
def test_iou_rotation_invariant(a, b, theta, ox, oy):
    got = rotated_iou(a.rotated(theta, (ox, oy)), b.rotated(theta, (ox, oy)))
    assert got == pytest.approx(rotated_iou(a, b), abs=1e-6)


@given(boxes)
def test_self_iou_exact(a):
    assert obb_area(a) == rotated_iou(a, a) * obb_area(a)


aabb = st.tuples(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.5, 15), st.floats(0.5, 15))


@given(aabb, aabb)
def test_axis_aligned_matches_classical_iou(p, q):
    a = AxisAlignedBox(p[0], p[1], p[0] + p[2], p[1] + p[3])
    b = AxisAlignedBox(q[0], q[1], q[0] + q[2], q[1] + q[3])
    assert rotated_iou(a.to_oriented(), b.to_oriented()) == pytest.approx(hbb_iou(a, b), abs=1e-9)
