"""Pure-numpy reference kernels. Semantics must match ``_numba`` exactly."""

import numpy as np


def census(img, window):
    h, w = img.shape
    r = window // 2
    pad = np.pad(img, r, mode="edge")
    out = np.zeros((h, w), dtype=np.uint64)
    bit = 0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            nb = pad[r + dy : r + dy + h, r + dx : r + dx + w]
            out |= (nb > img).astype(np.uint64) << np.uint64(bit)
            bit += 1
    return out


def cost_volume(census_l, census_r, d_max, max_cost):
    h, w = census_l.shape
    cost = np.full((h, w, d_max), max_cost, dtype=np.int32)
    for d in range(d_max):
        if d >= w:
            break
        x = np.bitwise_xor(census_l[:, : w - d], census_r[:, d:])
        cost[:, : w - d, d] = np.bitwise_count(x).astype(np.int32)
    return cost


def _step(prev, c, p1, p2):
    # prev: (n, D) path costs of predecessors, c: (n, D) matching costs
    mn = prev.min(axis=1, keepdims=True)
    best = prev.copy()
    best[:, 1:] = np.minimum(best[:, 1:], prev[:, :-1] + p1)
    best[:, :-1] = np.minimum(best[:, :-1], prev[:, 1:] + p1)
    best = np.minimum(best, mn + p2)
    return c + best - mn


def aggregate_direction(cost, dy, dx, p1, p2):
    h, w, _ = cost.shape
    out = np.empty_like(cost)
    if dx != 0:
        xs = range(w) if dx > 0 else range(w - 1, -1, -1)
        first = True
        for x in xs:
            if first:
                out[:, x] = cost[:, x]
                first = False
                continue
            prev_col = out[:, x - dx]
            col = cost[:, x].copy()
            if dy == 0:
                out[:, x] = _step(prev_col, col, p1, p2)
                continue
            if dy > 0:
                # rows 0..dy-1 have no predecessor
                out[:dy, x] = col[:dy]
                out[dy:, x] = _step(prev_col[:-dy], col[dy:], p1, p2)
            else:
                out[h + dy :, x] = col[h + dy :]
                out[: h + dy, x] = _step(prev_col[-dy:], col[: h + dy], p1, p2)
    else:
        ys = range(h) if dy > 0 else range(h - 1, -1, -1)
        first = True
        for y in ys:
            if first:
                out[y] = cost[y]
                first = False
                continue
            out[y] = _step(out[y - dy], cost[y], p1, p2)
    return out


def warp_rows(img, disp):
    """Sample ``img`` at (u + disp, v) with linear interpolation along u.

    Returns the warped image and d(warped)/d(disp); the slope is zero where
    the coordinate was clamped to the border.
    """
    h, w = img.shape
    u = np.arange(w, dtype=np.float64)[None, :]
    x = u + disp
    clamped = (x < 0.0) | (x > w - 1)
    xc = np.clip(x, 0.0, w - 1)
    if w == 1:
        return np.repeat(img[:, :1], 1, axis=1).astype(np.float64), np.zeros((h, 1))
    i0 = np.minimum(np.floor(xc).astype(np.int64), w - 2)
    f = xc - i0
    rows = np.arange(h)[:, None]
    a = img[rows, i0]
    b = img[rows, i0 + 1]
    out = (1.0 - f) * a + f * b
    slope = np.where(clamped, 0.0, b - a)
    return out, slope


def region_sizes(disp, valid, max_diff):
    """Size of the 4-connected region each valid pixel belongs to.

    Neighbours join a region when both are valid and their disparities differ
    by at most ``max_diff``. Invalid pixels get size 0.
    """
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    h, w = disp.shape
    idx = np.arange(h * w).reshape(h, w)
    src, dst = [], []
    for a, b, da, db in (
        (idx[:, :-1], idx[:, 1:], disp[:, :-1], disp[:, 1:]),
        (idx[:-1, :], idx[1:, :], disp[:-1, :], disp[1:, :]),
    ):
        va = valid.ravel()[a.ravel()] & valid.ravel()[b.ravel()]
        ok = va & (np.abs(da - db).ravel() <= max_diff)
        src.append(a.ravel()[ok])
        dst.append(b.ravel()[ok])
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    g = coo_matrix((np.ones(src.size, dtype=np.int8), (src, dst)), shape=(h * w, h * w))
    _, labels = connected_components(g, directed=False)
    counts = np.bincount(labels)
    return np.where(valid, counts[labels].reshape(h, w), 0).astype(np.int64)
