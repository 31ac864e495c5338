import numpy as np

_MAXV = 16


def _signed_area(quads):
    x = quads[..., 0]
    y = quads[..., 1]
    return 0.5 * np.sum(x * np.roll(y, -1, axis=-1) - np.roll(x, -1, axis=-1) * y, axis=-1)


def _positive(quads):
    flip = _signed_area(quads) < 0.0
    out = quads.copy()
    out[flip] = quads[flip][:, ::-1]
    return out


def _canonical_pairs(p, q):
    # Lexicographically smaller quad becomes the subject polygon (exact symmetry).
    fp = p.reshape(len(p), 8)
    fq = q.reshape(len(q), 8)
    diff = fp != fq
    first = np.argmax(diff, axis=1)
    rows = np.arange(len(p))
    swap = diff.any(axis=1) & (fp[rows, first] > fq[rows, first])
    subj = np.where(swap[:, None, None], q, p)
    clip = np.where(swap[:, None, None], p, q)
    return subj, clip


def _poly_area(poly, count):
    idx = np.arange(_MAXV)[None, :]
    nxt = np.where(count[:, None] > 0, (idx + 1) % np.maximum(count[:, None], 1), 0)
    rows = np.arange(len(poly))[:, None]
    px = poly[..., 0]
    py = poly[..., 1]
    term = px * py[rows, nxt] - px[rows, nxt] * py
    term = np.where(idx < count[:, None], term, 0.0)
    return 0.5 * term.sum(axis=1)


def _pad(quads):
    poly = np.zeros((len(quads), _MAXV, 2))
    poly[:, :4] = quads
    return poly


def _intersection_area(p, q):
    n_pairs = len(p)
    poly = _pad(p)
    count = np.full(n_pairs, 4, dtype=np.int64)
    rows = np.arange(n_pairs)[:, None]
    idx = np.arange(_MAXV)[None, :]
    for e in range(4):
        a = q[:, e]
        b = q[:, (e + 1) % 4]
        ex = (b[:, 0] - a[:, 0])[:, None]
        ey = (b[:, 1] - a[:, 1])[:, None]
        nxt_idx = (idx + 1) % np.maximum(count[:, None], 1)
        c = poly
        d = poly[rows, nxt_idx]
        sc = ex * (c[..., 1] - a[:, None, 1]) - ey * (c[..., 0] - a[:, None, 0])
        sd = ex * (d[..., 1] - a[:, None, 1]) - ey * (d[..., 0] - a[:, None, 0])
        live = idx < count[:, None]
        keep_c = live & (sc >= 0.0)
        cross = live & (((sc > 0.0) & (sd < 0.0)) | ((sc < 0.0) & (sd > 0.0)))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(cross, sc / (sc - sd), 0.0)
        inter = c + t[..., None] * (d - c)
        cand = np.stack([c, inter], axis=2).reshape(n_pairs, 2 * _MAXV, 2)
        valid = np.stack([keep_c, cross], axis=2).reshape(n_pairs, 2 * _MAXV)
        order = np.argsort(~valid, axis=1, kind="stable")[:, :_MAXV]
        poly = np.take_along_axis(cand, order[..., None], axis=1)
        count = valid.sum(axis=1)
        poly[idx.repeat(n_pairs, 0) >= count[:, None]] = 0.0
    area = _poly_area(poly, count)
    area[count < 3] = 0.0
    return np.maximum(area, 0.0)


def paired_iou(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0:
        return np.zeros(0)
    p, q = _canonical_pairs(_positive(a), _positive(b))
    four = np.full(len(p), 4, dtype=np.int64)
    area_p = _poly_area(_pad(p), four)
    area_q = _poly_area(_pad(q), four)
    inter = _intersection_area(p, q)
    union = area_p + area_q - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0.0, inter / union, 0.0)
    return np.minimum(iou, 1.0)


def pairwise_iou(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return np.zeros((n, m))
    ia = np.repeat(np.arange(n), m)
    ib = np.tile(np.arange(m), n)
    return paired_iou(a[ia], b[ib]).reshape(n, m)


def nms_keep(boxes, classes, order, threshold):
    boxes = np.asarray(boxes, dtype=np.float64)
    n = len(boxes)
    keep = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)
    order = np.asarray(order)
    for r, i in enumerate(order):
        if not alive[i]:
            continue
        keep[i] = True
        rest = order[r + 1:]
        rest = rest[alive[rest] & (classes[rest] == classes[i])]
        if len(rest) == 0:
            continue
        ious = paired_iou(np.repeat(boxes[i][None], len(rest), 0), boxes[rest])
        alive[rest[ious > threshold]] = False
    return keep


def greedy_match_ranks(p_sub, p_obj, p_scls, p_ocls, p_rel,
                       g_sub, g_obj, g_scls, g_ocls, g_rel,
                       iou, threshold):
    n_gt = len(g_sub)
    ranks = np.full(n_gt, -1, dtype=np.int64)
    if n_gt == 0 or len(p_sub) == 0:
        return ranks
    # (n_pred, n_gt) compatibility, then a sequential greedy sweep.
    ok = ((p_rel[:, None] == g_rel[None, :])
          & (p_scls[:, None] == g_scls[None, :])
          & (p_ocls[:, None] == g_ocls[None, :])
          & (iou[p_sub][:, g_sub] >= threshold)
          & (iou[p_obj][:, g_obj] >= threshold))
    free = np.ones(n_gt, dtype=bool)
    for r in np.flatnonzero(ok.any(axis=1)):
        hit = np.flatnonzero(ok[r] & free)
        if len(hit):
            ranks[hit[0]] = r
            free[hit[0]] = False
            if not free.any():
                break
    return ranks
