"""Compiled inner loops for footprint evaluation (planner and controller)."""
import math

import numpy as np
from numba import njit

EPS = 1e-9


@njit(cache=True)
def footprint_one(x, y, psi, hl, hw, r, res, ox, oy, cvar, count, prior_cvar):
    h, w = cvar.shape
    c = math.cos(psi)
    s = math.sin(psi)
    cx = math.floor((x - ox) / res)
    cy = math.floor((y - oy) / res)
    scv = 0.0
    scnt = 0.0
    m = 0
    for dy in range(-r, r + 1):
        iy = cy + dy
        py = oy + (iy + 0.5) * res - y
        for dx in range(-r, r + 1):
            ix = cx + dx
            px = ox + (ix + 0.5) * res - x
            bx = c * px + s * py
            by = -s * px + c * py
            if abs(bx) <= hl + EPS and abs(by) <= hw + EPS:
                if 0 <= ix < w and 0 <= iy < h:
                    scv += cvar[iy, ix]
                    scnt += count[iy, ix]
                else:
                    scv += prior_cvar
                m += 1
    if m == 0:
        if 0 <= cx < w and 0 <= cy < h:
            return cvar[cy, cx], count[cy, cx]
        return prior_cvar, 0.0
    return scv / m, scnt / m


@njit(cache=True)
def footprint_many(xs, ys, psis, hl, hw, r, res, ox, oy, cvar, count, prior_cvar):
    n = xs.shape[0]
    out_cv = np.empty(n)
    out_cnt = np.empty(n)
    for i in range(n):
        a, b = footprint_one(xs[i], ys[i], psis[i], hl, hw, r, res, ox, oy, cvar, count, prior_cvar)
        out_cv[i] = a
        out_cnt[i] = b
    return out_cv, out_cnt


@njit(cache=True)
def edges(src, dst, hl, hw, r, res, ox, oy, cvar, count, prior_cvar,
          w1, w2, kappa_b, threshold, xmin, xmax, ymin, ymax):
    """Cost and validity of straight edges src[i] -> dst[i].

    Each edge is sampled at ceil(len / (res/2)) + 1 evenly spaced sub-poses
    (both ends included) with heading along the edge.
    """
    n = src.shape[0]
    cost = np.empty(n)
    valid = np.empty(n, dtype=np.bool_)
    half = res / 2.0
    for i in range(n):
        dx = dst[i, 0] - src[i, 0]
        dy = dst[i, 1] - src[i, 1]
        length = math.hypot(dx, dy)
        if length <= EPS:
            cost[i] = 0.0
            cv, _ = footprint_one(src[i, 0], src[i, 1], 0.0, hl, hw, r, res, ox, oy, cvar, count, prior_cvar)
            valid[i] = cv >= threshold
            continue
        psi = math.atan2(dy, dx)
        m = max(1, int(math.ceil(length / half - 1e-12)))
        acc = 0.0
        ok = True
        for k in range(m + 1):
            t = k / m
            x = src[i, 0] + t * dx
            y = src[i, 1] + t * dy
            if not (xmin <= x < xmax and ymin <= y < ymax):
                ok = False
            cv, cnt = footprint_one(x, y, psi, hl, hw, r, res, ox, oy, cvar, count, prior_cvar)
            if cv < threshold:
                ok = False
            acc += math.exp(-w1 * cv) + w2 * math.exp(kappa_b - cnt)
        cost[i] = acc / (m + 1) * length
        valid[i] = ok
    return cost, valid


@njit(cache=True)
def _wrap(a):
    two_pi = 2.0 * math.pi
    return a - two_pi * math.floor((a + math.pi) / two_pi)


@njit(cache=True)
def nearest(xy, psi, n, sx, sy, spsi, heading_weight):
    """Index of the node minimising euclid + w |dpsi| (ties: lowest index)."""
    best = 0
    best_d = np.inf
    for i in range(n):
        d = math.hypot(xy[i, 0] - sx, xy[i, 1] - sy) + heading_weight * abs(_wrap(psi[i] - spsi))
        if d < best_d:
            best_d = d
            best = i
    return best


@njit(cache=True)
def connect(xy, cost, n, px, py, radius, fallback, lb_rate,
            hl, hw, r, res, ox, oy, cvar, count, prior_cvar,
            w1, w2, kappa_b, threshold, xmin, xmax, ymin, ymax):
    """Choose the parent of a new node at (px, py) and list rewire candidates.

    Near nodes are visited in order of ``cost + lb_rate * distance``, a lower
    bound on their total through that edge, and evaluation stops once the
    bound exceeds the best total found. Returns (parent, total, candidate
    nodes, their edge costs); parent is -1 if no valid edge exists.
    """
    d = np.empty(n)
    cnt = 0
    for i in range(n):
        d[i] = math.hypot(xy[i, 0] - px, xy[i, 1] - py)
        if d[i] <= radius:
            cnt += 1
    if cnt == 0:
        near = np.array([fallback])
    else:
        near = np.empty(cnt, dtype=np.int64)
        k = 0
        for i in range(n):
            if d[i] <= radius:
                near[k] = i
                k += 1
    bound = np.empty(near.size)
    for k in range(near.size):
        bound[k] = cost[near[k]] + lb_rate * d[near[k]]
    order = np.argsort(bound, kind="mergesort")

    done = np.zeros(near.size, dtype=np.bool_)
    ecost = np.empty(near.size)
    evalid = np.zeros(near.size, dtype=np.bool_)
    dst = np.empty((1, 2))
    dst[0, 0] = px
    dst[0, 1] = py
    src = np.empty((1, 2))

    parent = -1
    best = np.inf
    for oi in range(order.size):
        k = order[oi]
        if bound[k] >= best:
            break
        j = near[k]
        src[0, 0] = xy[j, 0]
        src[0, 1] = xy[j, 1]
        c, v = edges(src, dst, hl, hw, r, res, ox, oy, cvar, count, prior_cvar,
                     w1, w2, kappa_b, threshold, xmin, xmax, ymin, ymax)
        done[k] = True
        ecost[k] = c[0]
        evalid[k] = v[0]
        if v[0]:
            tot = cost[j] + c[0]
            if tot < best or (tot == best and j < parent):
                best = tot
                parent = j

    cand = np.empty(near.size, dtype=np.int64)
    cand_cost = np.empty(near.size)
    m = 0
    if parent >= 0:
        for k in range(near.size):
            j = near[k]
            if j == parent or not (best + lb_rate * d[j] < cost[j] - 1e-12):
                continue
            if not done[k]:
                # edge costs are symmetric: the footprint is centred
                src[0, 0] = xy[j, 0]
                src[0, 1] = xy[j, 1]
                c, v = edges(src, dst, hl, hw, r, res, ox, oy, cvar, count, prior_cvar,
                             w1, w2, kappa_b, threshold, xmin, xmax, ymin, ymax)
                ecost[k] = c[0]
                evalid[k] = v[0]
            if evalid[k] and best + ecost[k] < cost[j] - 1e-12:
                cand[m] = j
                cand_cost[m] = ecost[k]
                m += 1
    return parent, best, cand[:m], cand_cost[:m]


@njit(cache=True)
def _components(labels):
    """4-connected components of equal labels, ids in raster order of first pixel."""
    h, w = labels.shape
    comp = -np.ones((h, w), dtype=np.int64)
    stack = np.empty(h * w, dtype=np.int64)
    sizes = np.zeros(h * w, dtype=np.int64)
    n = 0
    for r0 in range(h):
        for c0 in range(w):
            if comp[r0, c0] >= 0:
                continue
            lab = labels[r0, c0]
            comp[r0, c0] = n
            stack[0] = r0 * w + c0
            top = 1
            size = 0
            while top > 0:
                top -= 1
                p = stack[top]
                r = p // w
                c = p % w
                size += 1
                for k in range(4):
                    rr = r + (k == 0) - (k == 1)
                    cc = c + (k == 2) - (k == 3)
                    if 0 <= rr < h and 0 <= cc < w and comp[rr, cc] < 0 and labels[rr, cc] == lab:
                        comp[rr, cc] = n
                        stack[top] = rr * w + cc
                        top += 1
            sizes[n] = size
            n += 1
    return comp, sizes[:n]


@njit(cache=True)
def merge_orphans(labels):
    """One pass: every non-largest piece of a label joins its dominant neighbour.

    Orphans go smallest first (ties: label, then raster order); the winner
    is the neighbouring label with the most boundary pixel contacts, ties to
    the smaller label value. Returns the number of orphans merged.
    """
    h, w = labels.shape
    comp, sizes = _components(labels)
    n = sizes.size
    comp_lab = np.empty(n, dtype=np.int64)
    for r in range(h):
        for c in range(w):
            comp_lab[comp[r, c]] = labels[r, c]
    lmin = comp_lab.min()
    nl = comp_lab.max() - lmin + 1
    best = -np.ones(nl, dtype=np.int64)
    for i in range(n):
        j = comp_lab[i] - lmin
        if best[j] < 0 or sizes[i] > sizes[best[j]]:
            best[j] = i
    # pixels grouped by component
    start = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        start[i + 1] = start[i] + sizes[i]
    fill = start[:-1].copy()
    pix = np.empty(h * w, dtype=np.int64)
    for r in range(h):
        for c in range(w):
            i = comp[r, c]
            pix[fill[i]] = r * w + c
            fill[i] += 1
    orph = []
    for i in range(n):
        if best[comp_lab[i] - lmin] != i:
            orph.append(i)
    if len(orph) == 0:
        return 0
    oa = np.array(orph, dtype=np.int64)
    # lexicographic (size, label, id) via stable sorts
    order = np.argsort(oa, kind="mergesort")
    order = order[np.argsort(comp_lab[oa[order]], kind="mergesort")]
    order = order[np.argsort(sizes[oa[order]], kind="mergesort")]
    votes = np.zeros(nl, dtype=np.int64)
    merged = 0
    for oi in range(order.size):
        i = oa[order[oi]]
        own = comp_lab[i]
        touched = []
        for q in range(start[i], start[i + 1]):
            p = pix[q]
            r = p // w
            c = p % w
            for k in range(4):
                rr = r + (k == 0) - (k == 1)
                cc = c + (k == 2) - (k == 3)
                if 0 <= rr < h and 0 <= cc < w and comp[rr, cc] != i:
                    v = labels[rr, cc]
                    if v != own:
                        if votes[v - lmin] == 0:
                            touched.append(v - lmin)
                        votes[v - lmin] += 1
        if len(touched) == 0:
            continue
        win = -1
        for t in touched:
            if win < 0 or votes[t] > votes[win] or (votes[t] == votes[win] and t < win):
                win = t
        for t in touched:
            votes[t] = 0
        for q in range(start[i], start[i + 1]):
            p = pix[q]
            labels[p // w, p % w] = win + lmin
        merged += 1
    return merged
