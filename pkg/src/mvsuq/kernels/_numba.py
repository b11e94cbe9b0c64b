"""JIT-compiled inner loops. Signatures mirror :mod:`mvsuq.kernels._numpy`."""

import numpy as np
from numba import njit

_BIG = np.int32(1 << 28)

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


@njit(cache=True, nogil=True)
def _popcount(x):
    x = x - ((x >> np.uint64(1)) & _M1)
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    return (x * _H01) >> np.uint64(56)


@njit(cache=True, nogil=True)
def census(img, valid, win_h, win_w):
    H, W = img.shape
    hh = win_h // 2
    hw = win_w // 2
    bits = np.zeros((H, W), np.uint64)
    ok = np.zeros((H, W), np.bool_)
    for y in range(hh, H - hh):
        for x in range(hw, W - hw):
            good = True
            for dy in range(-hh, hh + 1):
                for dx in range(-hw, hw + 1):
                    if not valid[y + dy, x + dx]:
                        good = False
            if not good:
                continue
            c = img[y, x]
            b = np.uint64(0)
            k = 0
            for dy in range(-hh, hh + 1):
                for dx in range(-hw, hw + 1):
                    if dy == 0 and dx == 0:
                        continue
                    if img[y + dy, x + dx] < c:
                        b |= np.uint64(1) << np.uint64(k)
                    k += 1
            bits[y, x] = b
            ok[y, x] = True
    return bits, ok


@njit(cache=True, nogil=True)
def hamming_cost(bits_l, ok_l, bits_r, ok_r, offset, ndisp, sentinel):
    H, W = bits_l.shape
    cost = np.full((H, W, ndisp), sentinel, np.uint16)
    valid = np.zeros((H, W, ndisp), np.bool_)
    for y in range(H):
        for x in range(W):
            if not ok_l[y, x]:
                continue
            bl = bits_l[y, x]
            for k in range(ndisp):
                xr = x - (offset[y, x] + k)
                if xr < 0 or xr >= W or not ok_r[y, xr]:
                    continue
                cost[y, x, k] = np.uint16(_popcount(bl ^ bits_r[y, xr]))
                valid[y, x, k] = True
    return cost, valid


@njit(cache=True, nogil=True)
def sgm(cost, offset, guide, p1, p2, adaptive, dirs):
    H, W, D = cost.shape
    S = np.zeros((H, W, D), np.int32)
    prev = np.empty((W, D), np.int32)
    cur = np.empty((W, D), np.int32)
    prevmin = np.empty(W, np.int32)
    curmin = np.empty(W, np.int32)
    for r in range(dirs.shape[0]):
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        for yi in range(H):
            y = yi if dy >= 0 else H - 1 - yi
            for xi in range(W):
                x = xi if dx >= 0 else W - 1 - xi
                qx = x - dx
                qy = y - dy
                if qx < 0 or qx >= W or qy < 0 or qy >= H:
                    m = _BIG
                    for k in range(D):
                        v = np.int32(cost[y, x, k])
                        cur[x, k] = v
                        S[y, x, k] += v
                        if v < m:
                            m = v
                    curmin[x] = m
                    continue
                if dy == 0:
                    Lq = cur[qx]
                    mq = curmin[qx]
                else:
                    Lq = prev[qx]
                    mq = prevmin[qx]
                shift = offset[y, x] - offset[qy, qx]
                p2e = p2
                if adaptive:
                    g = abs(guide[y, x] - guide[qy, qx])
                    p2e = (p2 * 8) // (8 + g)
                    if p2e < p1 + 1:
                        p2e = p1 + 1
                    if p2e > p2:
                        p2e = p2
                jump = mq + p2e
                m = _BIG
                for k in range(D):
                    j = k + shift
                    best = jump
                    if 0 <= j < D and Lq[j] < best:
                        best = Lq[j]
                    if 0 <= j - 1 < D and Lq[j - 1] + p1 < best:
                        best = Lq[j - 1] + p1
                    if 0 <= j + 1 < D and Lq[j + 1] + p1 < best:
                        best = Lq[j + 1] + p1
                    v = np.int32(cost[y, x, k]) + best - mq
                    cur[x, k] = v
                    S[y, x, k] += v
                    if v < m:
                        m = v
                curmin[x] = m
            if dy != 0:
                prev, cur = cur, prev
                prevmin, curmin = curmin, prevmin
    return S


@njit(cache=True, nogil=True)
def _rev(mask, M):
    out = 0
    for i in range(M):
        if (mask >> i) & 1:
            out |= 1 << (M - 1 - i)
    return out


@njit(cache=True, nogil=True)
def consistent_subsets(values, counts, eps):
    P, M = values.shape
    sizes = np.zeros(P, np.int64)
    masks = np.zeros(P, np.int64)
    for p in range(P):
        n = counts[p]
        best_size = 0
        best_rev = -1
        best_mask = 0
        v = values[p]
        for m in range(n):
            med = v[m]
            tol = eps * med
            L = 0
            while m - L - 1 >= 0 and abs(v[m - L - 1] - med) <= tol:
                L += 1
            R = 0
            while m + R + 1 < n and abs(v[m + R + 1] - med) <= tol:
                R += 1
            a = min(L, R)
            size = 2 * a + 1
            mask = (((1 << a) - 1) << (m - L)) | (1 << m) | (((1 << a) - 1) << (m + 1))
            rv = _rev(mask, M)
            if size > best_size or (size == best_size and rv > best_rev):
                best_size, best_rev, best_mask = size, rv, mask
        for lo in range(n):
            for hi in range(lo + 1, n):
                med = 0.5 * (v[lo] + v[hi])
                tol = eps * med
                if abs(v[lo] - med) > tol or abs(v[hi] - med) > tol:
                    continue
                L = 0
                while lo - L - 1 >= 0 and abs(v[lo - L - 1] - med) <= tol:
                    L += 1
                R = 0
                while hi + R + 1 < n and abs(v[hi + R + 1] - med) <= tol:
                    R += 1
                a = min(L, R)
                size = 2 * a + 2
                mask = (
                    (((1 << a) - 1) << (lo - L))
                    | (1 << lo)
                    | (1 << hi)
                    | (((1 << a) - 1) << (hi + 1))
                )
                rv = _rev(mask, M)
                if size > best_size or (size == best_size and rv > best_rev):
                    best_size, best_rev, best_mask = size, rv, mask
        sizes[p] = best_size
        masks[p] = best_mask
    return sizes, masks
