import numpy as np
from numba import njit


@njit(cache=True)
def _signed_area(poly, n):
    s = 0.0
    for i in range(n):
        j = (i + 1) % n
        s += poly[i, 0] * poly[j, 1] - poly[j, 0] * poly[i, 1]
    return 0.5 * s


@njit(cache=True)
def _positive(quad):
    # Orientation with positive raw shoelace sum (screen-clockwise in y-down).
    out = np.empty((4, 2))
    if _signed_area(quad, 4) >= 0.0:
        for i in range(4):
            out[i, 0] = quad[i, 0]
            out[i, 1] = quad[i, 1]
    else:
        for i in range(4):
            out[i, 0] = quad[3 - i, 0]
            out[i, 1] = quad[3 - i, 1]
    return out


@njit(cache=True)
def _lex_greater(p, q):
    for i in range(4):
        for k in range(2):
            if p[i, k] > q[i, k]:
                return True
            if p[i, k] < q[i, k]:
                return False
    return False


@njit(cache=True)
def _intersection_area(p, q):
    """Area of p ∩ q for positively oriented convex quads (Sutherland-Hodgman)."""
    cur = np.empty((16, 2))
    nxt = np.empty((16, 2))
    n = 4
    for i in range(4):
        cur[i, 0] = p[i, 0]
        cur[i, 1] = p[i, 1]
    for e in range(4):
        ax = q[e, 0]
        ay = q[e, 1]
        bx = q[(e + 1) % 4, 0]
        by = q[(e + 1) % 4, 1]
        ex = bx - ax
        ey = by - ay
        m = 0
        for i in range(n):
            cx = cur[i, 0]
            cy = cur[i, 1]
            dx = cur[(i + 1) % n, 0]
            dy = cur[(i + 1) % n, 1]
            sc = ex * (cy - ay) - ey * (cx - ax)
            sd = ex * (dy - ay) - ey * (dx - ax)
            if sc >= 0.0:
                nxt[m, 0] = cx
                nxt[m, 1] = cy
                m += 1
            if (sc > 0.0 and sd < 0.0) or (sc < 0.0 and sd > 0.0):
                t = sc / (sc - sd)
                nxt[m, 0] = cx + t * (dx - cx)
                nxt[m, 1] = cy + t * (dy - cy)
                m += 1
        n = m
        if n < 3:
            return 0.0
        for i in range(n):
            cur[i, 0] = nxt[i, 0]
            cur[i, 1] = nxt[i, 1]
    a = _signed_area(cur, n)
    return a if a > 0.0 else 0.0


@njit(cache=True)
def _iou_one(a, b):
    p = _positive(a)
    q = _positive(b)
    if _lex_greater(p, q):
        p, q = q, p
    area_p = _signed_area(p, 4)
    area_q = _signed_area(q, 4)
    inter = _intersection_area(p, q)
    union = area_p + area_q - inter
    if union <= 0.0:
        return 0.0
    iou = inter / union
    if iou > 1.0:
        return 1.0
    return iou


@njit(cache=True)
def paired_iou(a, b):
    n = a.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = _iou_one(a[i], b[i])
    return out


@njit(cache=True)
def pairwise_iou(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = _iou_one(a[i], b[j])
    return out


@njit(cache=True)
def nms_keep(boxes, classes, order, threshold):
    n = boxes.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    dead = np.zeros(n, dtype=np.bool_)
    for r in range(n):
        i = order[r]
        if dead[i]:
            continue
        keep[i] = True
        for s in range(r + 1, n):
            j = order[s]
            if dead[j] or classes[j] != classes[i]:
                continue
            if _iou_one(boxes[i], boxes[j]) > threshold:
                dead[j] = True
    return keep


@njit(cache=True)
def greedy_match_ranks(p_sub, p_obj, p_scls, p_ocls, p_rel,
                       g_sub, g_obj, g_scls, g_ocls, g_rel,
                       iou, threshold):
    n_gt = g_sub.shape[0]
    ranks = np.full(n_gt, -1, dtype=np.int64)
    remaining = n_gt
    for r in range(p_sub.shape[0]):
        if remaining == 0:
            break
        ps = p_sub[r]
        po = p_obj[r]
        for j in range(n_gt):
            if ranks[j] >= 0:
                continue
            if p_rel[r] != g_rel[j] or p_scls[r] != g_scls[j] or p_ocls[r] != g_ocls[j]:
                continue
            if iou[ps, g_sub[j]] >= threshold and iou[po, g_obj[j]] >= threshold:
                ranks[j] = r
                remaining -= 1
                break
    return ranks
