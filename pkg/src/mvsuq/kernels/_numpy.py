"""Vectorised numpy implementations of the inner loops.

Results are bit-identical to :mod:`mvsuq.kernels._numba`; all arithmetic that
feeds a comparison is integer or uses the same floating expression order.
"""

import numpy as np

_BIG = np.int32(1 << 28)


def _window_ok(valid, win_h, win_w):
    H, W = valid.shape
    hh, hw = win_h // 2, win_w // 2
    ok = np.zeros((H, W), bool)
    if H <= 2 * hh or W <= 2 * hw:
        return ok
    inner = np.ones((H - 2 * hh, W - 2 * hw), bool)
    for dy in range(-hh, hh + 1):
        for dx in range(-hw, hw + 1):
            inner &= valid[hh + dy:H - hh + dy, hw + dx:W - hw + dx]
    ok[hh:H - hh, hw:W - hw] = inner
    return ok


def census(img, valid, win_h, win_w):
    H, W = img.shape
    hh, hw = win_h // 2, win_w // 2
    ok = _window_ok(valid, win_h, win_w)
    bits = np.zeros((H, W), np.uint64)
    if not ok.any():
        return bits, ok
    center = img[hh:H - hh, hw:W - hw]
    inner = np.zeros(center.shape, np.uint64)
    k = 0
    for dy in range(-hh, hh + 1):
        for dx in range(-hw, hw + 1):
            if dy == 0 and dx == 0:
                continue
            nb = img[hh + dy:H - hh + dy, hw + dx:W - hw + dx]
            inner |= (nb < center).astype(np.uint64) << np.uint64(k)
            k += 1
    bits[hh:H - hh, hw:W - hw] = inner
    bits[~ok] = 0
    return bits, ok


def hamming_cost(bits_l, ok_l, bits_r, ok_r, offset, ndisp, sentinel):
    H, W = bits_l.shape
    cost = np.full((H, W, ndisp), sentinel, np.uint16)
    valid = np.zeros((H, W, ndisp), bool)
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    for k in range(ndisp):
        xr = cols - (offset + k)
        inb = (xr >= 0) & (xr < W)
        xc = np.clip(xr, 0, W - 1)
        v = inb & ok_l & ok_r[rows, xc]
        ham = np.bitwise_count(bits_l ^ bits_r[rows, xc]).astype(np.uint16)
        cost[..., k] = np.where(v, ham, np.uint16(sentinel))
        valid[..., k] = v
    return cost, valid


def _recur(C, Lq, mq, shift, p2e, p1):
    """One SGM step for a line of pixels: C, Lq are (N, D); mq, shift, p2e are (N,)."""
    N, D = C.shape
    pad = np.full((N, D + 4), _BIG, np.int32)
    pad[:, 2:D + 2] = Lq
    if not shift.any():
        same = pad[:, 2:D + 2]
        lo = pad[:, 1:D + 1]
        hi = pad[:, 3:D + 3]
    else:
        j = np.arange(D)[None, :] + shift[:, None] + 2

        def take(i):
            out = np.take_along_axis(pad, np.clip(i, 0, D + 3), axis=1)
            out[(i < 0) | (i > D + 3)] = _BIG
            return out

        same, lo, hi = take(j), take(j - 1), take(j + 1)
    best = np.minimum(same, (mq + p2e)[:, None])
    best = np.minimum(best, lo + np.int32(p1))
    best = np.minimum(best, hi + np.int32(p1))
    return C + best - mq[:, None]


def _p2_eff(guide_p, guide_q, p1, p2, adaptive, n):
    if not adaptive:
        return np.full(n, p2, np.int32)
    g = np.abs(guide_p - guide_q).astype(np.int64)
    p2e = (p2 * 8) // (8 + g)
    return np.minimum(np.maximum(p2e, p1 + 1), p2).astype(np.int32)


def sgm(cost, offset, guide, p1, p2, adaptive, dirs):
    H, W, D = cost.shape
    C_all = cost.astype(np.int32)
    S = np.zeros((H, W, D), np.int32)
    p1 = int(p1)
    p2 = int(p2)
    for dx, dy in np.asarray(dirs).tolist():
        if dx != 0:
            # march over columns; the predecessor of (y, x) sits in column x - dx
            order = range(W) if dx > 0 else range(W - 1, -1, -1)
            ys = np.arange(H)
            qy = ys - dy
            has = (qy >= 0) & (qy < H)
            prev = None
            for x in order:
                C = C_all[:, x, :]
                if prev is None:
                    L = C.copy()
                else:
                    qx = x - dx
                    L = C.copy()
                    sel = ys[has]
                    qsel = qy[has]
                    Lq = prev[qsel]
                    mq = Lq.min(axis=1)
                    shift = offset[sel, x] - offset[qsel, qx]
                    p2e = _p2_eff(guide[sel, x], guide[qsel, qx], p1, p2, adaptive, sel.size)
                    L[sel] = _recur(C[sel], Lq, mq, shift, p2e, p1)
                S[:, x, :] += L
                prev = L
        else:
            order = range(H) if dy > 0 else range(H - 1, -1, -1)
            prev = None
            for y in order:
                C = C_all[y]
                if prev is None:
                    L = C.copy()
                else:
                    qy = y - dy
                    mq = prev.min(axis=1)
                    shift = offset[y] - offset[qy]
                    p2e = _p2_eff(guide[y], guide[qy], p1, p2, adaptive, W)
                    L = _recur(C, prev, mq, shift, p2e, p1)
                S[y] += L
                prev = L
    return S


def _rev(mask, M):
    out = np.zeros_like(mask)
    for i in range(M):
        out |= ((mask >> i) & 1) << (M - 1 - i)
    return out


def _run_length(values, med, tol, start, step, limit):
    """Number of consecutive positions start, start+step, ... (bounded by limit) within tol of med."""
    P, M = values.shape
    run = np.zeros(P, np.int64)
    alive = np.ones(P, bool)
    for t in range(1, M):
        idx = start + step * t
        inside = (idx >= 0) & (idx < limit)
        vals = values[np.arange(P), np.clip(idx, 0, M - 1)]
        with np.errstate(invalid="ignore"):
            alive &= inside & (np.abs(vals - med) <= tol)
        run += alive
    return run


def consistent_subsets(values, counts, eps):
    P, M = values.shape
    counts = counts.astype(np.int64)
    best_size = np.zeros(P, np.int64)
    best_rev = np.full(P, -1, np.int64)
    best_mask = np.zeros(P, np.int64)
    one = np.int64(1)

    def consider(active, size, mask):
        rv = _rev(mask, M)
        better = active & ((size > best_size) | ((size == best_size) & (rv > best_rev)))
        best_size[better] = size[better]
        best_rev[better] = rv[better]
        best_mask[better] = mask[better]

    for m in range(M):
        active = m < counts
        if not active.any():
            continue
        med = values[:, m]
        tol = eps * med
        L = _run_length(values, med, tol, m, -1, counts)
        R = _run_length(values, med, tol, m, +1, counts)
        a = np.minimum(L, R)
        mask = (((one << a) - 1) << (m - L)) | (one << m) | (((one << a) - 1) << (m + 1))
        consider(active, 2 * a + 1, mask)
    for lo in range(M):
        for hi in range(lo + 1, M):
            active = hi < counts
            if not active.any():
                continue
            med = 0.5 * (values[:, lo] + values[:, hi])
            tol = eps * med
            with np.errstate(invalid="ignore"):
                active &= (np.abs(values[:, lo] - med) <= tol) & (np.abs(values[:, hi] - med) <= tol)
            L = _run_length(values, med, tol, lo, -1, counts)
            R = _run_length(values, med, tol, hi, +1, counts)
            a = np.minimum(L, R)
            mask = (
                (((one << a) - 1) << np.maximum(lo - L, 0))
                | (one << lo)
                | (one << hi)
                | (((one << a) - 1) << (hi + 1))
            )
            consider(active, 2 * a + 2, mask)
    return best_size, best_mask
