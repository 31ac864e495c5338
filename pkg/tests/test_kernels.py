"""The numba and numpy kernel paths must agree bit for bit where possible."""

import os
import subprocess
import sys

import numpy as np
import pytest

from cascade_sgg import kernels
from oracles import fuzzed_box_pairs

needs_numba = pytest.mark.skipif(not kernels.NUMBA_AVAILABLE, reason="numba path disabled")


def _quads(seed, n):
    pairs = fuzzed_box_pairs(seed, n)
    return (np.ascontiguousarray([a for a, _ in pairs]) + 3.0,
            np.ascontiguousarray([b for _, b in pairs]) + 3.0)


@needs_numba
def test_paired_and_pairwise_iou_agree():
    a, b = _quads(11, 80)
    np.testing.assert_allclose(kernels.numba_backend.paired_iou(a, b), kernels.numpy_backend.paired_iou(a, b),
                               rtol=0, atol=1e-12)
    np.testing.assert_allclose(kernels.numba_backend.pairwise_iou(a, b), kernels.numpy_backend.pairwise_iou(a, b),
                               rtol=0, atol=1e-12)


@needs_numba
def test_paired_iou_symmetric_on_both_paths():
    a, b = _quads(12, 50)
    for be in (kernels.numba_backend, kernels.numpy_backend):
        assert np.array_equal(be.paired_iou(a, b), be.paired_iou(b, a))


@needs_numba
def test_nms_agrees(rng):
    a, b = _quads(13, 40)
    boxes = np.ascontiguousarray(np.concatenate([a, b]))
    classes = rng.integers(0, 3, len(boxes)).astype(np.int64)
    order = np.argsort(-rng.random(len(boxes))).astype(np.int64)
    for thr in (0.1, 0.5, 0.9):
        k1 = kernels.numba_backend.nms_keep(boxes, classes, order, thr)
        k2 = kernels.numpy_backend.nms_keep(boxes, classes, order, thr)
        assert np.array_equal(np.asarray(k1), np.asarray(k2))


@needs_numba
def test_greedy_match_agrees(rng):
    n_box, n_pred, n_gt = 12, 200, 25
    iou = rng.random((n_box, n_box))
    iou[iou < 0.6] = 0.0
    cls = rng.integers(0, 2, n_box)
    ps, po = rng.integers(0, n_box, n_pred), rng.integers(0, n_box, n_pred)
    gs, go = rng.integers(0, n_box, n_gt), rng.integers(0, n_box, n_gt)
    pr, gr = rng.integers(0, 3, n_pred), rng.integers(0, 3, n_gt)
    args = (ps, po, cls[ps], cls[po], pr, gs, go, cls[gs], cls[go], gr, iou, 0.5)
    args = tuple(np.ascontiguousarray(x, dtype=np.int64) if isinstance(x, np.ndarray) and x.dtype.kind == "i"
                 else x for x in args)
    r1 = kernels.numba_backend.greedy_match_ranks(*args)
    r2 = kernels.numpy_backend.greedy_match_ranks(*args)
    assert np.array_equal(r1, r2)
    assert (r1 >= 0).any()


def test_env_flag_selects_numpy():
    env = dict(os.environ, CASCADE_SGG_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from cascade_sgg import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
