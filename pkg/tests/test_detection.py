import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from cascade_sgg.core import OrientedBox
from cascade_sgg.detection import (
    DipError,
    Detection,
    LayerBatch,
    ObjectScorer,
    build_dip,
    decode_rbox_residual,
    detection_total_loss,
    encode_rbox_residual,
    hierarchical_cls_loss,
    merge_window_detections,
    smooth_l1,
)
from cascade_sgg.gradcheck import check_gradients


def test_dip_layer_widths_halve():
    dip = build_dip(8192, 8192, 4, 1024)
    assert [w for w, _ in dip.layer_sizes] == [8192, 4096, 2048, 1024]


def test_dip_ceil_rule():
    dip = build_dip(1001, 603, 3, 256)
    assert dip.layer_sizes == ((1001, 603), (501, 302), (251, 151))


def test_single_layer_covers_all_sizes():
    dip = build_dip(512, 512, 1, 256)
    assert dip.intervals == ((0.0, math.inf),)
    assert dip.layer_for_size(1e-3) == 1 and dip.layer_for_size(1e6) == 1


def test_window_larger_than_image_gives_one_window_per_layer():
    dip = build_dip(600, 400, 3, 1024)
    assert all(len(dip.windows(m)) == 1 for m in range(1, 4))


def test_windows_cover_the_layer():
    dip = build_dip(2500, 1300, 2, 1024, stride=768)
    for m in (1, 2):
        w, h = dip.layer_sizes[m - 1]
        cover = np.zeros((h, w), dtype=bool)
        for x0, y0, x1, y1 in dip.windows(m):
            assert x1 - x0 <= 1024 and y1 - y0 <= 1024
            cover[y0:y1, x0:x1] = True
        assert cover.all()


def test_small_objects_live_on_full_resolution_layer():
    dip = build_dip(4096, 4096, 4, 1024, min_size=32)
    assert dip.layer_for_size(10) == 1
    assert dip.layer_for_size(5000) == 4
    sizes = [dip.layer_for_size(s) for s in (10, 70, 130, 300)]
    assert sizes == sorted(sizes)


def test_too_many_layers_rejected():
    with pytest.raises(DipError):
        build_dip(64, 64, 5, 32)
    with pytest.raises(DipError):
        build_dip(64, 64, 0, 32)


@given(st.integers(1, 6), st.floats(1e-3, 1e5))
def test_dip_intervals_partition_sizes(m, size):
    dip = build_dip(4096, 4096, m, 512)
    owners = [k for k, (lo, hi) in enumerate(dip.intervals, 1) if lo <= size < hi]
    assert owners == [dip.layer_for_size(size)]


def test_uniform_two_class_loss():
    assert float(hierarchical_cls_loss([1.0, 1.0], [1.0, 1.0], [1.0, 0.0])) == pytest.approx(math.log(2))


@pytest.mark.parametrize("true", range(3))
def test_uniform_three_class_loss(true):
    t = np.eye(3)[true]
    assert float(hierarchical_cls_loss([0.5, 0.5, 0.5], [2.0, 2.0, 2.0], t)) == pytest.approx(math.log(3))


def test_weighted_two_class_loss_by_hand():
    # softmax of [2, 1] at index 0
    want = -math.log(math.e ** 2 / (math.e ** 2 + math.e))
    got = float(hierarchical_cls_loss([1.0, 1.0], [2.0, 1.0], [1.0, 0.0]))
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)


def test_cls_loss_errors():
    with pytest.raises(ValueError):
        hierarchical_cls_loss([1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        hierarchical_cls_loss([1.0, 1.0], [1.0, 0.0], [1.0, 0.0])


@pytest.mark.parametrize("seed", range(5))
def test_cls_loss_gradients(seed):
    g = torch.Generator().manual_seed(seed)
    phi = torch.randn(4, dtype=torch.float64, generator=g).requires_grad_()
    w = (torch.rand(4, dtype=torch.float64, generator=g) + 0.5).requires_grad_()
    t = torch.eye(4, dtype=torch.float64)[seed % 4]
    assert check_gradients(lambda: hierarchical_cls_loss(phi, w, t), [phi, w]).passed()


def test_total_loss_cls_only():
    b = LayerBatch(torch.ones(3, 2, dtype=torch.float64), torch.ones(2, dtype=torch.float64),
                   [0, 1, 0], [False, False, False])
    assert float(detection_total_loss([b])) == pytest.approx(math.log(2))


def test_total_loss_adds_smooth_l1_below_knee():
    reg_pred = torch.full((1, 5), 0.5, dtype=torch.float64)
    b = LayerBatch(torch.ones(1, 2, dtype=torch.float64), torch.ones(2, dtype=torch.float64), [0], [True],
                   reg_pred, torch.zeros(1, 5, dtype=torch.float64))
    assert float(detection_total_loss([b])) == pytest.approx(math.log(2) + 5 * 0.125)


def test_total_loss_hbb_ignores_regression_weights():
    reg_pred = torch.full((1, 4), 0.5, dtype=torch.float64)
    b = LayerBatch(torch.ones(1, 2, dtype=torch.float64), torch.ones(2, dtype=torch.float64), [0], [True],
                   reg_pred, torch.zeros(1, 4, dtype=torch.float64), torch.tensor([3.0], dtype=torch.float64))
    assert float(detection_total_loss([b], "OBB")) == pytest.approx(math.log(2) + 3 * 0.5)
    assert float(detection_total_loss([b], "HBB")) == pytest.approx(math.log(2) + 0.5)


def test_total_loss_vanishes_only_for_perfect_outputs():
    scores = torch.tensor([[60.0, -60.0], [-60.0, 60.0]], dtype=torch.float64)
    zeros = torch.zeros(2, 5, dtype=torch.float64)
    perfect = LayerBatch(scores, torch.ones(2, dtype=torch.float64), [0, 1], [True, True], zeros, zeros)
    assert float(detection_total_loss([perfect])) < 1e-40
    off = zeros.clone()
    off[1, 2] = 1e-3
    worse = LayerBatch(scores, torch.ones(2, dtype=torch.float64), [0, 1], [True, True], off, zeros)
    assert float(detection_total_loss([worse])) > 0


@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.integers(0, 2), st.floats(-3, 3))
def test_total_loss_non_negative(vals, target, resid):
    scores = torch.tensor(vals, dtype=torch.float64).reshape(2, 3)
    res = torch.full((2, 5), resid, dtype=torch.float64)
    b = LayerBatch(scores, torch.ones(3, dtype=torch.float64), [target, 0], [True, False], res,
                   torch.zeros(2, 5, dtype=torch.float64))
    assert float(detection_total_loss([b, b])) >= 0


def test_smooth_l1_knee():
    np.testing.assert_allclose(smooth_l1([0.5, 1.0, 2.0, -3.0]).numpy(), [0.125, 0.5, 1.5, 2.5])


BOX = OrientedBox.from_rbox(50, 50, 20, 10, 0.1)


def test_single_detection_survives():
    d = Detection(BOX, 0, 0.7)
    assert merge_window_detections([d]) == [d]


def _overlap_09():
    # same centre line, shifted so that IoU is 0.9 exactly: overlap 19/21 of union
    a = OrientedBox.axis_aligned(0, 0, 20, 10)
    b = OrientedBox.axis_aligned(1, 0, 21, 10)
    return a, b


def test_same_class_nms_by_hand():
    a, b = _overlap_09()
    from cascade_sgg.geometry import rotated_iou
    assert rotated_iou(a, b) == pytest.approx(19 / 21)
    hi, lo = Detection(a, 2, 0.9, 0, 0), Detection(b, 2, 0.8, 1, 1)
    assert merge_window_detections([lo, hi], 0.5) == [hi]


def test_different_classes_both_survive():
    a, b = _overlap_09()
    out = merge_window_detections([Detection(a, 0, 0.9), Detection(b, 1, 0.8)], 0.5)
    assert len(out) == 2


def test_nms_tie_break_is_content_based(rng):
    dets = []
    for i in range(30):
        box = OrientedBox.from_rbox(*rng.uniform(0, 60, 2), *rng.uniform(5, 20, 2), rng.uniform(-1, 1))
        dets.append(Detection(box, int(rng.integers(2)), float(rng.choice([0.5, 0.7, 0.9])), i % 3, i))
    ref = merge_window_detections(dets, 0.3)
    for _ in range(5):
        perm = [dets[i] for i in rng.permutation(len(dets))]
        assert merge_window_detections(perm, 0.3) == ref
    assert merge_window_detections(ref, 0.3) == ref


@given(st.lists(st.tuples(st.floats(0, 40), st.floats(0, 40), st.floats(2, 15), st.floats(2, 15),
                          st.floats(-1.5, 1.5), st.integers(0, 1), st.floats(0, 1)), max_size=15),
       st.floats(0.05, 0.95))
def test_nms_idempotent(raw, thr):
    dets = [Detection(OrientedBox.from_rbox(x, y, w, h, t), c, p, 0, i) for i, (x, y, w, h, t, c, p) in enumerate(raw)]
    once = merge_window_detections(dets, thr)
    assert merge_window_detections(once, thr) == once
    assert merge_window_detections(once, thr, "HBB") == merge_window_detections(
        merge_window_detections(once, thr, "HBB"), thr, "HBB")


def test_residual_round_trip():
    target = OrientedBox.from_rbox(57, 44, 26, 8, 0.4)
    r = encode_rbox_residual(BOX, target)
    back = decode_rbox_residual(BOX, r)
    np.testing.assert_allclose(back.to_rbox(), target.to_rbox(), atol=1e-9)
    np.testing.assert_allclose(encode_rbox_residual(BOX, BOX), np.zeros(5), atol=1e-12)


def test_scorer_weights_clamped():
    s = ObjectScorer(8, 3, 2)
    assert s.layer_weights.shape == (2, 4)
    with torch.no_grad():
        s.layer_weights[0, 0] = 50.0
        s.layer_weights[1, 1] = -4.0
    s.clamp_weights()
    w = s.layer_weights.detach()
    assert float(w.max()) == 10.0 and float(w.min()) == 0.1
    p = s.class_probabilities(torch.zeros(5, 8, dtype=torch.float64), torch.zeros(5, 5, dtype=torch.float64),
                              torch.tensor([1, 2, 1, 2, 1]))
    np.testing.assert_allclose(p.sum(1).numpy(), np.ones(5))
