"""Compiled 2-D convex geometry kernels.

Everything here works on plain float64 arrays of shape (n, 2) so it can run
under numba. The public, typed API lives in :mod:`rotdet.geom`.

Polygons are counter-clockwise (positive signed area, y axis pointing up in
the math sense). Line labels used by the clipper: edge ``i`` of the subject
polygon is encoded as ``i`` and edge ``j`` of the clipping polygon as
``-(j + 1)``.
"""

import numpy as np
from numba import njit

EPS = 1e-9

# Vertex provenance produced by _clip.
SUBJECT_VERTEX = 0
LINE_CROSSING = 1


@njit(cache=True)
def _cross(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


@njit(cache=True)
def _strict_hull(pts):
    """Jarvis march. Returns CCW vertex indices with collinear points dropped."""
    n = pts.shape[0]
    out = np.empty(n + 1, dtype=np.int64)
    if n == 0:
        return out[:0]
    start = 0
    for i in range(1, n):
        if pts[i, 0] < pts[start, 0] or (
            pts[i, 0] == pts[start, 0] and pts[i, 1] < pts[start, 1]
        ):
            start = i
    m = 0
    p = start
    for _ in range(n + 1):
        out[m] = p
        m += 1
        px = pts[p, 0]
        py = pts[p, 1]
        q = -1
        for r in range(n):
            rx = pts[r, 0]
            ry = pts[r, 1]
            if rx == px and ry == py:
                continue
            if q < 0:
                q = r
                continue
            c = _cross(px, py, pts[q, 0], pts[q, 1], rx, ry)
            if c < -EPS:
                q = r
            elif c <= EPS:
                # ties close the hull at the start point; otherwise take the farther one
                if q == start:
                    continue
                if r == start:
                    q = r
                    continue
                dq = (pts[q, 0] - px) ** 2 + (pts[q, 1] - py) ** 2
                dr = (rx - px) ** 2 + (ry - py) ** 2
                if dr > dq:
                    q = r
        if q < 0:
            break
        if pts[q, 0] == pts[start, 0] and pts[q, 1] == pts[start, 1]:
            break
        p = q
    return out[:m]


@njit(cache=True)
def _hull_with_collinear(pts, strict):
    """Strict hull plus every input point lying on a hull edge (within EPS).

    Points on an edge are inserted in order of distance from the edge start.
    Coincident duplicates of a vertex are not re-inserted.
    """
    m = strict.shape[0]
    n = pts.shape[0]
    if m < 3:
        return strict.copy()
    out = np.empty(n, dtype=np.int64)
    used = np.zeros(n, dtype=np.bool_)
    for k in range(m):
        used[strict[k]] = True
    cand = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    cnt = 0
    for k in range(m):
        a = strict[k]
        b = strict[(k + 1) % m]
        ax, ay = pts[a, 0], pts[a, 1]
        bx, by = pts[b, 0], pts[b, 1]
        ex, ey = bx - ax, by - ay
        len2 = ex * ex + ey * ey
        out[cnt] = a
        cnt += 1
        nc = 0
        for r in range(n):
            if used[r]:
                continue
            rx, ry = pts[r, 0], pts[r, 1]
            if (rx == ax and ry == ay) or (rx == bx and ry == by):
                continue
            c = _cross(ax, ay, bx, by, rx, ry)
            if abs(c) > EPS:
                continue
            t = (rx - ax) * ex + (ry - ay) * ey
            if t <= 0.0 or t >= len2:
                continue
            cand[nc] = r
            dist[nc] = t
            nc += 1
        order = np.argsort(dist[:nc], kind="mergesort")
        for o in range(nc):
            r = cand[order[o]]
            # drop coincident duplicates along the edge
            dup = False
            for s in range(nc):
                if s < o:
                    r2 = cand[order[s]]
                    if used[r2] and pts[r2, 0] == pts[r, 0] and pts[r2, 1] == pts[r, 1]:
                        dup = True
            if dup:
                continue
            used[r] = True
            out[cnt] = r
            cnt += 1
    return out[:cnt]


@njit(cache=True)
def hull_indices(pts, keep_collinear):
    strict = _strict_hull(pts)
    if keep_collinear:
        return _hull_with_collinear(pts, strict)
    return strict


@njit(cache=True)
def shoelace(v):
    n = v.shape[0]
    if n < 3:
        return 0.0
    x0 = v[0, 0]
    y0 = v[0, 1]
    s = 0.0
    for k in range(1, n - 1):
        s += (v[k, 0] - x0) * (v[k + 1, 1] - y0) - (v[k + 1, 0] - x0) * (v[k, 1] - y0)
    return 0.5 * s


@njit(cache=True)
def shoelace_grad(v, scale, g):
    """Accumulate scale * d(area)/d(v) into g (same shape as v)."""
    n = v.shape[0]
    if n < 3:
        return
    for k in range(n):
        nxt = (k + 1) % n
        prv = (k - 1 + n) % n
        g[k, 0] += scale * 0.5 * (v[nxt, 1] - v[prv, 1])
        g[k, 1] += scale * 0.5 * (v[prv, 0] - v[nxt, 0])


@njit(cache=True)
def _clip(S, C):
    """Sutherland-Hodgman clip of convex S by convex C.

    Returns (verts, kind, la, lb). For kind SUBJECT_VERTEX, ``la`` is the
    subject vertex index. For LINE_CROSSING the vertex is the intersection of
    the lines labelled ``la`` and ``lb``.
    """
    ns = S.shape[0]
    nc = C.shape[0]
    cap = ns + nc + 2
    vx = np.empty(cap)
    vy = np.empty(cap)
    kind = np.empty(cap, dtype=np.int64)
    la = np.empty(cap, dtype=np.int64)
    lb = np.empty(cap, dtype=np.int64)
    out_lab = np.empty(cap, dtype=np.int64)
    wx = np.empty(cap)
    wy = np.empty(cap)
    wkind = np.empty(cap, dtype=np.int64)
    wla = np.empty(cap, dtype=np.int64)
    wlb = np.empty(cap, dtype=np.int64)
    wout = np.empty(cap, dtype=np.int64)
    n = ns
    for i in range(ns):
        vx[i] = S[i, 0]
        vy[i] = S[i, 1]
        kind[i] = SUBJECT_VERTEX
        la[i] = i
        lb[i] = i
        out_lab[i] = i
    for j in range(nc):
        if n == 0:
            break
        ax, ay = C[j, 0], C[j, 1]
        bx, by = C[(j + 1) % nc, 0], C[(j + 1) % nc, 1]
        clip_lab = -(j + 1)
        m = 0
        sidx = n - 1
        cs = _cross(ax, ay, bx, by, vx[sidx], vy[sidx])
        for e in range(n):
            ce = _cross(ax, ay, bx, by, vx[e], vy[e])
            e_in = ce >= 0.0
            s_in = cs >= 0.0
            if e_in != s_in:
                t = cs / (cs - ce)
                wx[m] = vx[sidx] + t * (vx[e] - vx[sidx])
                wy[m] = vy[sidx] + t * (vy[e] - vy[sidx])
                wkind[m] = LINE_CROSSING
                wla[m] = out_lab[sidx]
                wlb[m] = clip_lab
                wout[m] = out_lab[sidx] if e_in else clip_lab
                m += 1
            if e_in:
                wx[m] = vx[e]
                wy[m] = vy[e]
                wkind[m] = kind[e]
                wla[m] = la[e]
                wlb[m] = lb[e]
                wout[m] = out_lab[e]
                m += 1
            sidx = e
            cs = ce
        n = m
        for k in range(n):
            vx[k] = wx[k]
            vy[k] = wy[k]
            kind[k] = wkind[k]
            la[k] = wla[k]
            lb[k] = wlb[k]
            out_lab[k] = wout[k]
    verts = np.empty((n, 2))
    for k in range(n):
        verts[k, 0] = vx[k]
        verts[k, 1] = vy[k]
    return verts, kind[:n].copy(), la[:n].copy(), lb[:n].copy()


@njit(cache=True)
def _lex_less(a, b):
    """Deterministic total order on vertex arrays (used for exact symmetry)."""
    na = a.shape[0]
    nb = b.shape[0]
    for k in range(min(na, nb)):
        for c in range(2):
            if a[k, c] < b[k, c]:
                return True
            if a[k, c] > b[k, c]:
                return False
    return na < nb


@njit(cache=True)
def intersection_area(P, Q):
    if P.shape[0] < 3 or Q.shape[0] < 3:
        return 0.0
    if _lex_less(Q, P):
        verts = _clip(Q, P)[0]
    else:
        verts = _clip(P, Q)[0]
    a = shoelace(verts)
    return a if a > 0.0 else 0.0


@njit(cache=True)
def enclosing_area(P, Q):
    both = np.concatenate((P, Q))
    idx = _strict_hull(both)
    return shoelace(both[idx])


@njit(cache=True)
def giou_terms(P, Q):
    """Returns (loss, area_p, area_q, inter, enclosing) for CCW hulls P, Q."""
    A = shoelace(P) if P.shape[0] >= 3 else 0.0
    B = shoelace(Q) if Q.shape[0] >= 3 else 0.0
    I = intersection_area(P, Q)
    U = A + B - I
    R = enclosing_area(P, Q)
    if U <= 0.0 or R <= 0.0:
        return 2.0, A, B, I, R
    return 2.0 - I / U - U / R, A, B, I, R


@njit(cache=True)
def iou_hulls(P, Q):
    A = shoelace(P) if P.shape[0] >= 3 else 0.0
    B = shoelace(Q) if Q.shape[0] >= 3 else 0.0
    I = intersection_area(P, Q)
    U = A + B - I
    if U <= 0.0:
        return 0.0
    r = I / U
    if r > 1.0:
        return 1.0
    return r


@njit(cache=True)
def _line_points(lab, S, C):
    """Endpoints of labelled line; also (owner, i0, i1) with owner 0=S, 1=C."""
    if lab >= 0:
        n = S.shape[0]
        i0 = lab
        i1 = (lab + 1) % n
        return S[i0, 0], S[i0, 1], S[i1, 0], S[i1, 1], 0, i0, i1
    j = -lab - 1
    n = C.shape[0]
    i0 = j
    i1 = (j + 1) % n
    return C[i0, 0], C[i0, 1], C[i1, 0], C[i1, 1], 1, i0, i1


@njit(cache=True)
def _add(owner, idx, gx, gy, gS, gC):
    if owner == 0:
        gS[idx, 0] += gx
        gS[idx, 1] += gy
    else:
        gC[idx, 0] += gx
        gC[idx, 1] += gy


@njit(cache=True)
def _shared_vertex(la, lb, S, C):
    """If two lines are consecutive edges of one polygon return (owner, vertex)."""
    if la >= 0 and lb >= 0:
        n = S.shape[0]
        if (lb - la) % n == 1:
            return 0, lb
        if (la - lb) % n == 1:
            return 0, la
        return -1, -1
    if la < 0 and lb < 0:
        a = -la - 1
        b = -lb - 1
        n = C.shape[0]
        if (b - a) % n == 1:
            return 1, b
        if (a - b) % n == 1:
            return 1, a
        return -1, -1
    return -1, -1


@njit(cache=True)
def _intersection_area_grad(S, C, scale, gS, gC):
    """Accumulate scale * d(intersection area)/d(vertices) for both polygons."""
    verts, kind, la, lb = _clip(S, C)
    if verts.shape[0] < 3 or shoelace(verts) <= 0.0:
        return
    gv = np.zeros_like(verts)
    shoelace_grad(verts, scale, gv)
    for k in range(verts.shape[0]):
        gx = gv[k, 0]
        gy = gv[k, 1]
        if kind[k] == SUBJECT_VERTEX:
            gS[la[k], 0] += gx
            gS[la[k], 1] += gy
            continue
        owner, vid = _shared_vertex(la[k], lb[k], S, C)
        if owner >= 0:
            _add(owner, vid, gx, gy, gS, gC)
            continue
        p1x, p1y, p2x, p2y, op, ip1, ip2 = _line_points(la[k], S, C)
        q1x, q1y, q2x, q2y, oq, iq1, iq2 = _line_points(lb[k], S, C)
        dx, dy = p2x - p1x, p2y - p1y
        ex, ey = q2x - q1x, q2y - q1y
        axx, ayy = q1x - p1x, q1y - p1y
        D = dx * ey - dy * ex
        if abs(D) < 1e-300:
            continue
        N = axx * ey - ayy * ex
        t = N / D
        # partials of N and D
        dN_p1 = (-ey, ex)
        dN_q1 = (ey + ayy, -ex - axx)
        dN_q2 = (-ayy, axx)
        dD_p1 = (-ey, ex)
        dD_p2 = (ey, -ex)
        dD_q1 = (dy, -dx)
        dD_q2 = (-dy, dx)
        gd = gx * dx + gy * dy
        # p1
        tx = (dN_p1[0] - t * dD_p1[0]) / D
        ty = (dN_p1[1] - t * dD_p1[1]) / D
        _add(op, ip1, (1.0 - t) * gx + gd * tx, (1.0 - t) * gy + gd * ty, gS, gC)
        # p2
        tx = (-t * dD_p2[0]) / D
        ty = (-t * dD_p2[1]) / D
        _add(op, ip2, t * gx + gd * tx, t * gy + gd * ty, gS, gC)
        # q1
        tx = (dN_q1[0] - t * dD_q1[0]) / D
        ty = (dN_q1[1] - t * dD_q1[1]) / D
        _add(oq, iq1, gd * tx, gd * ty, gS, gC)
        # q2
        tx = (dN_q2[0] - t * dD_q2[0]) / D
        ty = (dN_q2[1] - t * dD_q2[1]) / D
        _add(oq, iq2, gd * tx, gd * ty, gS, gC)


@njit(cache=True)
def giou_grad_hulls(P, Q):
    """Loss value and d(loss)/d(P) for CCW hulls; Q is held fixed.

    Returns (loss, grad_P, status) where status 0 = ok, 1 = both degenerate.
    """
    gP = np.zeros_like(P)
    A = shoelace(P) if P.shape[0] >= 3 else 0.0
    B = shoelace(Q) if Q.shape[0] >= 3 else 0.0
    I = intersection_area(P, Q)
    U = A + B - I
    both = np.concatenate((P, Q))
    eidx = _strict_hull(both)
    R = shoelace(both[eidx])
    if U <= 0.0 or R <= 0.0:
        return 2.0, gP, 1
    loss = 2.0 - I / U - U / R
    cI = -1.0 / U - I / (U * U) + 1.0 / R
    cA = I / (U * U) - 1.0 / R
    cR = U / (R * R)
    if P.shape[0] >= 3:
        shoelace_grad(P, cA, gP)
    if I > 0.0:
        gQ = np.zeros_like(Q)
        if _lex_less(Q, P):
            _intersection_area_grad(Q, P, cI, gQ, gP)
        else:
            _intersection_area_grad(P, Q, cI, gP, gQ)
    ev = both[eidx]
    gE = np.zeros_like(ev)
    shoelace_grad(ev, cR, gE)
    n_p = P.shape[0]
    for k in range(eidx.shape[0]):
        if eidx[k] < n_p:
            gP[eidx[k], 0] += gE[k, 0]
            gP[eidx[k], 1] += gE[k, 1]
    return loss, gP, 0


@njit(cache=True)
def giou_points_grad(pred, target):
    """GIoU loss and gradient with respect to every predicted point.

    Points off the hull get zero gradient. Points lying on a hull edge are
    treated as hull vertices. Returns (loss, grad, status) where status bit 0
    marks both-degenerate and bit 1 marks an on-boundary predicted point.
    """
    strict = _strict_hull(pred)
    hidx = _hull_with_collinear(pred, strict)
    P = pred[hidx]
    Q = target[_strict_hull(target)]
    loss, gP, st = giou_grad_hulls(P, Q)
    grad = np.zeros_like(pred)
    for k in range(hidx.shape[0]):
        grad[hidx[k], 0] += gP[k, 0]
        grad[hidx[k], 1] += gP[k, 1]
    if hidx.shape[0] > strict.shape[0]:
        st |= 2
    return loss, grad, st


@njit(cache=True)
def giou_matrix(preds, targets):
    """Pairwise GIoU loss, preds (N, K, 2) against targets (M, T, 2)."""
    N = preds.shape[0]
    M = targets.shape[0]
    out = np.empty((N, M))
    thulls = []
    for j in range(M):
        thulls.append(targets[j][_strict_hull(targets[j])])
    for i in range(N):
        P = preds[i][_strict_hull(preds[i])]
        for j in range(M):
            out[i, j] = giou_terms(P, thulls[j])[0]
    return out


@njit(cache=True)
def iou_pairs(preds, targets):
    """Convex-hull IoU for aligned pairs preds[i] vs targets[i]."""
    n = preds.shape[0]
    out = np.empty(n)
    for i in range(n):
        P = preds[i][_strict_hull(preds[i])]
        Q = targets[i][_strict_hull(targets[i])]
        out[i] = iou_hulls(P, Q)
    return out


@njit(cache=True)
def iou_matrix(preds, targets):
    N = preds.shape[0]
    M = targets.shape[0]
    out = np.empty((N, M))
    for i in range(N):
        P = preds[i][_strict_hull(preds[i])]
        for j in range(M):
            Q = targets[j][_strict_hull(targets[j])]
            out[i, j] = iou_hulls(P, Q)
    return out


@njit(cache=True)
def giou_grad_pairs(preds, targets):
    """Loss and gradient for aligned pairs; preds (n, K, 2), targets (n, T, 2)."""
    n = preds.shape[0]
    loss = np.empty(n)
    grad = np.zeros_like(preds)
    status = np.zeros(n, dtype=np.int64)
    for i in range(n):
        l, g, st = giou_points_grad(preds[i], targets[i])
        loss[i] = l
        grad[i] = g
        status[i] = st
    return loss, grad, status
