"""numba-compiled kernels; bit-compatible with ``_numpy``."""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def census(img, window):
    h, w = img.shape
    r = window // 2
    out = np.zeros((h, w), dtype=np.uint64)
    for y in prange(h):
        for x in range(w):
            c = img[y, x]
            code = np.uint64(0)
            bit = 0
            for dy in range(-r, r + 1):
                yy = min(max(y + dy, 0), h - 1)
                for dx in range(-r, r + 1):
                    if dy == 0 and dx == 0:
                        continue
                    xx = min(max(x + dx, 0), w - 1)
                    if img[yy, xx] > c:
                        code |= np.uint64(1) << np.uint64(bit)
                    bit += 1
            out[y, x] = code
    return out


@njit(cache=True)
def _popcount(v):
    v = v - ((v >> np.uint64(1)) & np.uint64(0x5555555555555555))
    v = (v & np.uint64(0x3333333333333333)) + ((v >> np.uint64(2)) & np.uint64(0x3333333333333333))
    v = (v + (v >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return np.int32((v * np.uint64(0x0101010101010101)) >> np.uint64(56))


@njit(cache=True, parallel=True)
def cost_volume(census_l, census_r, d_max, max_cost):
    h, w = census_l.shape
    cost = np.empty((h, w, d_max), dtype=np.int32)
    for y in prange(h):
        for x in range(w):
            for d in range(d_max):
                if x + d < w:
                    cost[y, x, d] = _popcount(census_l[y, x] ^ census_r[y, x + d])
                else:
                    cost[y, x, d] = max_cost
    return cost


@njit(cache=True)
def _step(out, cost, y, x, py, px, p1, p2, nd):
    mn = out[py, px, 0]
    for d in range(1, nd):
        if out[py, px, d] < mn:
            mn = out[py, px, d]
    for d in range(nd):
        best = out[py, px, d]
        if d > 0 and out[py, px, d - 1] + p1 < best:
            best = out[py, px, d - 1] + p1
        if d < nd - 1 and out[py, px, d + 1] + p1 < best:
            best = out[py, px, d + 1] + p1
        if mn + p2 < best:
            best = mn + p2
        out[y, x, d] = cost[y, x, d] + best - mn


@njit(cache=True, parallel=True)
def aggregate_direction(cost, dy, dx, p1, p2):
    h, w, nd = cost.shape
    out = np.empty_like(cost)
    if dy == 0:
        # rows are independent scan lines
        for y in prange(h):
            for i in range(w):
                x = i if dx > 0 else w - 1 - i
                if i == 0:
                    for d in range(nd):
                        out[y, x, d] = cost[y, x, d]
                else:
                    _step(out, cost, y, x, y, x - dx, p1, p2, nd)
    elif dx == 0:
        for x in prange(w):
            for i in range(h):
                y = i if dy > 0 else h - 1 - i
                if i == 0:
                    for d in range(nd):
                        out[y, x, d] = cost[y, x, d]
                else:
                    _step(out, cost, y, x, y - dy, x, p1, p2, nd)
    else:
        # diagonal paths: sweep columns in order, each column depends on the previous one
        for i in range(w):
            x = i if dx > 0 else w - 1 - i
            for y in range(h):
                py = y - dy
                if i == 0 or py < 0 or py >= h:
                    for d in range(nd):
                        out[y, x, d] = cost[y, x, d]
                else:
                    _step(out, cost, y, x, py, x - dx, p1, p2, nd)
    return out


@njit(cache=True, parallel=True)
def warp_rows(img, disp):
    h, w = img.shape
    out = np.empty((h, w), dtype=np.float64)
    slope = np.zeros((h, w), dtype=np.float64)
    for v in prange(h):
        for u in range(w):
            if w == 1:
                out[v, u] = img[v, 0]
                continue
            x = u + disp[v, u]
            clamped = x < 0.0 or x > w - 1
            if x < 0.0:
                x = 0.0
            elif x > w - 1:
                x = float(w - 1)
            i0 = min(int(np.floor(x)), w - 2)
            f = x - i0
            a = img[v, i0]
            b = img[v, i0 + 1]
            out[v, u] = (1.0 - f) * a + f * b
            if not clamped:
                slope[v, u] = b - a
    return out, slope


@njit(cache=True)
def region_sizes(disp, valid, max_diff):
    h, w = disp.shape
    label = np.full((h, w), -1, dtype=np.int64)
    sizes = np.zeros(h * w, dtype=np.int64)
    stack = np.empty(h * w, dtype=np.int64)
    n = 0
    for y0 in range(h):
        for x0 in range(w):
            if not valid[y0, x0] or label[y0, x0] >= 0:
                continue
            label[y0, x0] = n
            top = 0
            stack[0] = y0 * w + x0
            top = 1
            count = 0
            while top > 0:
                top -= 1
                p = stack[top]
                y = p // w
                x = p % w
                count += 1
                for k in range(4):
                    ny, nx = y, x
                    if k == 0:
                        nx = x + 1
                    elif k == 1:
                        nx = x - 1
                    elif k == 2:
                        ny = y + 1
                    else:
                        ny = y - 1
                    if ny < 0 or ny >= h or nx < 0 or nx >= w:
                        continue
                    if label[ny, nx] >= 0 or not valid[ny, nx]:
                        continue
                    if abs(disp[ny, nx] - disp[y, x]) > max_diff:
                        continue
                    label[ny, nx] = n
                    stack[top] = ny * w + nx
                    top += 1
            sizes[n] = count
            n += 1
    out = np.zeros((h, w), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            if label[y, x] >= 0:
                out[y, x] = sizes[label[y, x]]
    return out
