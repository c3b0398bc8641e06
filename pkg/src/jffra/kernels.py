"""Hot numeric kernels for the non-differentiable numpy paths.

Each kernel exists twice: an explicit-loop version compiled with numba and a
vectorised pure-numpy version.  ``JFFRA_NUMBA=0`` selects the numpy path
(also used automatically when numba cannot be imported).  Both paths take
float64 arrays and return float64 arrays.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

USE_NUMBA = njit is not None and os.environ.get("JFFRA_NUMBA", "1") != "0"


def _jit(fn):
    if njit is None:
        return fn
    return njit(cache=True, nogil=True)(fn)


def displacement_order(radius: int) -> np.ndarray:
    """Candidate (dy, dx) pairs sorted by squared magnitude, then (dy, dx)."""
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    cand = np.stack([dy.ravel(), dx.ravel()], axis=1)
    key = np.lexsort((cand[:, 1], cand[:, 0], cand[:, 0] ** 2 + cand[:, 1] ** 2))
    return np.ascontiguousarray(cand[key]).astype(np.int64)


# ---------------------------------------------------------------- warp


@_jit
def _warp_bilinear_nb(field, flow):
    H, W, C = field.shape
    out = np.zeros((H, W, C))
    for h in range(H):
        for w in range(W):
            x = w + flow[h, w, 0]
            y = h + flow[h, w, 1]
            x0 = np.floor(x)
            y0 = np.floor(y)
            ax = x - x0
            ay = y - y0
            ix = int(x0)
            iy = int(y0)
            for oy in range(2):
                for ox in range(2):
                    yy = iy + oy
                    xx = ix + ox
                    if yy < 0 or yy >= H or xx < 0 or xx >= W:
                        continue
                    wt = (ay if oy else 1.0 - ay) * (ax if ox else 1.0 - ax)
                    if wt == 0.0:
                        continue
                    for c in range(C):
                        out[h, w, c] += wt * field[yy, xx, c]
    return out


def _warp_bilinear_np(field, flow):
    H, W, C = field.shape
    gy, gx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    x = gx + flow[..., 0]
    y = gy + flow[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    ax = (x - x0)[..., None]
    ay = (y - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros((H, W, C))
    for oy, wy in ((0, 1.0 - ay), (1, ay)):
        for ox, wx in ((0, 1.0 - ax), (1, ax)):
            yy = y0 + oy
            xx = x0 + ox
            valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            tap = field[np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)]
            out += np.where(valid[..., None], wy * wx * tap, 0.0)
    return out


def warp_bilinear(field: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward bilinear warp of an H x W x C field, zero outside the grid."""
    field = np.ascontiguousarray(field, dtype=np.float64)
    flow = np.ascontiguousarray(flow, dtype=np.float64)
    if USE_NUMBA:
        return _warp_bilinear_nb(field, flow)
    return _warp_bilinear_np(field, flow)


# ---------------------------------------------------------- cost volume


@_jit
def _cost_volume_nb(f_ref, f_proj, r):
    H, W, C = f_ref.shape
    d = 2 * r + 1
    out = np.zeros((d, d, H, W))
    for l in range(-r, r + 1):
        for m in range(-r, r + 1):
            for h in range(H):
                hh = h + l
                for w in range(W):
                    ww = w + m
                    inside = 0 <= hh < H and 0 <= ww < W
                    s = 0.0
                    for c in range(C):
                        v = f_proj[hh, ww, c] if inside else 0.0
                        s += abs(f_ref[h, w, c] - v)
                    out[l + r, m + r, h, w] = s
    return out


def _cost_volume_np(f_ref, f_proj, r):
    H, W, _ = f_ref.shape
    d = 2 * r + 1
    padded = np.pad(f_proj, ((r, r), (r, r), (0, 0)))
    out = np.empty((d, d, H, W))
    for i in range(d):
        for j in range(d):
            out[i, j] = np.abs(f_ref - padded[i : i + H, j : j + W]).sum(axis=-1)
    return out


def cost_volume_l1(f_ref: np.ndarray, f_proj: np.ndarray, r: int) -> np.ndarray:
    f_ref = np.ascontiguousarray(f_ref, dtype=np.float64)
    f_proj = np.ascontiguousarray(f_proj, dtype=np.float64)
    if USE_NUMBA:
        return _cost_volume_nb(f_ref, f_proj, r)
    return _cost_volume_np(f_ref, f_proj, r)


# ------------------------------------------------------ block matching


@_jit
def _sad_search_nb(ref, other, block, cand):
    H, W, C = ref.shape
    nby = (H + block - 1) // block
    nbx = (W + block - 1) // block
    best = np.zeros((nby, nbx, 2), dtype=np.int64)
    for by in range(nby):
        for bx in range(nbx):
            best_cost = np.inf
            for k in range(cand.shape[0]):
                dy = cand[k, 0]
                dx = cand[k, 1]
                s = 0.0
                for h in range(by * block, min((by + 1) * block, H)):
                    hh = h + dy
                    for w in range(bx * block, min((bx + 1) * block, W)):
                        ww = w + dx
                        inside = 0 <= hh < H and 0 <= ww < W
                        for c in range(C):
                            v = other[hh, ww, c] if inside else 0.0
                            s += abs(ref[h, w, c] - v)
                if s < best_cost:
                    best_cost = s
                    best[by, bx, 0] = dx
                    best[by, bx, 1] = dy
    return best


def _sad_search_np(ref, other, block, cand):
    H, W, _ = ref.shape
    nby = -(-H // block)
    nbx = -(-W // block)
    r = int(np.abs(cand).max())
    padded = np.pad(other, ((r, r), (r, r), (0, 0)))
    ph, pw = nby * block - H, nbx * block - W
    best_cost = np.full((nby, nbx), np.inf)
    best = np.zeros((nby, nbx, 2), dtype=np.int64)
    for dy, dx in cand:
        diff = np.abs(ref - padded[r + dy : r + dy + H, r + dx : r + dx + W]).sum(axis=-1)
        diff = np.pad(diff, ((0, ph), (0, pw)))
        cost = diff.reshape(nby, block, nbx, block).sum(axis=(1, 3))
        better = cost < best_cost
        best_cost = np.where(better, cost, best_cost)
        best[better] = (dx, dy)
    return best


def sad_search(ref: np.ndarray, other: np.ndarray, block: int, radius: int) -> np.ndarray:
    """Per-block integer displacement (dx, dy) minimising the SAD between the
    ``ref`` block and ``other`` sampled at the displaced position."""
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    other = np.ascontiguousarray(other, dtype=np.float64)
    cand = displacement_order(radius)
    if USE_NUMBA:
        return _sad_search_nb(ref, other, block, cand)
    return _sad_search_np(ref, other, block, cand)


# ------------------------------------------- batched cost volume (N, C, H, W)


@_jit
def _cv_forward_nb(a, b, r):
    N, C, H, W = a.shape
    d = 2 * r + 1
    out = np.zeros((N, d, d, H, W), dtype=a.dtype)
    for n in range(N):
        for c in range(C):
            for i in range(d):
                l = i - r
                for j in range(d):
                    m = j - r
                    for h in range(H):
                        hh = h + l
                        row_in = 0 <= hh < H
                        for w in range(W):
                            ww = w + m
                            if row_in and 0 <= ww < W:
                                out[n, i, j, h, w] += abs(a[n, c, h, w] - b[n, c, hh, ww])
                            else:
                                out[n, i, j, h, w] += abs(a[n, c, h, w])
    return out


@_jit
def _cv_backward_nb(g, a, b, r):
    N, C, H, W = a.shape
    d = 2 * r + 1
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    for n in range(N):
        for c in range(C):
            for i in range(d):
                l = i - r
                for j in range(d):
                    m = j - r
                    for h in range(H):
                        hh = h + l
                        row_in = 0 <= hh < H
                        for w in range(W):
                            ww = w + m
                            gv = g[n, i, j, h, w]
                            if row_in and 0 <= ww < W:
                                diff = a[n, c, h, w] - b[n, c, hh, ww]
                            else:
                                diff = a[n, c, h, w]
                            if diff > 0:
                                s = gv
                            elif diff < 0:
                                s = -gv
                            else:
                                continue
                            ga[n, c, h, w] += s
                            if row_in and 0 <= ww < W:
                                gb[n, c, hh, ww] -= s
    return ga, gb


def _cv_forward_np(a, b, r):
    N, C, H, W = a.shape
    d = 2 * r + 1
    padded = np.pad(b, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.empty((N, d, d, H, W), dtype=a.dtype)
    for i in range(d):
        for j in range(d):
            out[:, i, j] = np.abs(a - padded[:, :, i : i + H, j : j + W]).sum(axis=1)
    return out


def _cv_backward_np(g, a, b, r):
    N, C, H, W = a.shape
    d = 2 * r + 1
    padded = np.pad(b, ((0, 0), (0, 0), (r, r), (r, r)))
    ga = np.zeros_like(a)
    gp = np.zeros_like(padded)
    for i in range(d):
        for j in range(d):
            s = np.sign(a - padded[:, :, i : i + H, j : j + W]) * g[:, i, j][:, None]
            ga += s
            gp[:, :, i : i + H, j : j + W] -= s
    return ga, np.ascontiguousarray(gp[:, :, r : r + H, r : r + W])


def cost_volume_forward(a: np.ndarray, b: np.ndarray, r: int) -> np.ndarray:
    """N x C x H x W pair -> N x d x d x H x W L1 costs (zero outside the grid)."""
    a, b = np.ascontiguousarray(a), np.ascontiguousarray(b)
    if USE_NUMBA:
        return _cv_forward_nb(a, b, r)
    return _cv_forward_np(a, b, r)


def cost_volume_backward(g: np.ndarray, a: np.ndarray, b: np.ndarray, r: int):
    """Gradients of ``sum(g * cost_volume_forward(a, b, r))`` w.r.t. a and b."""
    g, a, b = np.ascontiguousarray(g), np.ascontiguousarray(a), np.ascontiguousarray(b)
    if USE_NUMBA:
        return _cv_backward_nb(g, a, b, r)
    return _cv_backward_np(g, a, b, r)
