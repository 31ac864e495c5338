"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--boxes 400]

Each kernel runs once untimed (numba compiles on first call), then
``--repeat`` times; the best wall time is reported. Results are checked for
agreement before timing.
"""

import argparse
import time

import numpy as np

from cascade_sgg.kernels import NUMBA_AVAILABLE, numba_backend, numpy_backend


def random_boxes(rng, n, extent=200.0):
    c = rng.uniform(0, extent, (n, 2))
    wh = rng.uniform(4, 30, (n, 2))
    th = rng.uniform(-np.pi / 2, np.pi / 2, n)
    local = np.array([[-0.5, -0.5], [-0.5, 0.5], [0.5, 0.5], [0.5, -0.5]])
    rot = np.stack([np.stack([np.cos(th), np.sin(th)], -1), np.stack([-np.sin(th), np.cos(th)], -1)], 1)
    return np.einsum("kj,nj,nji->nki", local, wh, rot) + c[:, None, :]


def matching_case(rng, n_obj, n_pred, n_rel=7):
    boxes = random_boxes(rng, n_obj)
    iou = numpy_backend.pairwise_iou(boxes, boxes)
    cls = rng.integers(0, 5, n_obj)
    ps, po = rng.integers(0, n_obj, n_pred), rng.integers(0, n_obj, n_pred)
    gs, go = rng.integers(0, n_obj, n_pred // 10), rng.integers(0, n_obj, n_pred // 10)
    return (ps, po, cls[ps], cls[po], rng.integers(0, n_rel, n_pred),
            gs, go, cls[gs], cls[go], rng.integers(0, n_rel, len(gs)), iou, 0.5)


def best_of(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--boxes", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not NUMBA_AVAILABLE:
        raise SystemExit("numba backend unavailable (not installed, or CASCADE_SGG_NO_NUMBA is set)")
    rng = np.random.default_rng(args.seed)
    a, b = random_boxes(rng, args.boxes), random_boxes(rng, args.boxes)
    order = np.argsort(-rng.random(args.boxes), kind="stable")
    cases = {
        "paired_iou": (a, b),
        "pairwise_iou": (a, b),
        "nms_keep": (a, rng.integers(0, 3, args.boxes), order, 0.3),
        "greedy_match_ranks": matching_case(rng, 60, 20_000),
    }
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, kargs in cases.items():
        f_np, f_nb = getattr(numpy_backend, name), getattr(numba_backend, name)
        np.testing.assert_allclose(f_nb(*kargs), f_np(*kargs), atol=1e-9)
        t_np, t_nb = best_of(f_np, kargs, args.repeat), best_of(f_nb, kargs, args.repeat)
        print(f"{name:<20}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
