"""Hot inner loops: im2col / col2im, 2x2 max-pool, attention rendering.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature.  The numba path is used when numba imports cleanly and the
environment variable ``E2CAPS_NUMBA`` is not set to ``0``.  Both paths are
exported (``numpy_kernels`` / ``numba_kernels``) so tests and the benchmark
can compare them directly.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _im2col_np(xp, kh, kw, stride, ho, wo):
    # xp: (B, C, Hp, Wp) already padded -> (B, C*kh*kw, ho*wo)
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (B, C, ho, wo, kh, kw) -> (B, C, kh, kw, ho, wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im_np(cols, c, hp, wp, kh, kw, stride, ho, wo):
    b = cols.shape[0]
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        i_end = i + stride * ho
        for j in range(kw):
            j_end = j + stride * wo
            out[:, :, i:i_end:stride, j:j_end:stride] += cols6[:, :, i, j]
    return out


def _maxpool2_np(x):
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    # argmax returns the first maximal entry in (0,0),(0,1),(1,0),(1,1) order
    idx = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


def _maxpool2_backward_np(g, idx):
    b, c, h2, w2 = g.shape
    onehot = idx[..., None] == np.arange(4, dtype=np.int8)
    gw = np.where(onehot, g[..., None], g.dtype.type(0))
    gw = gw.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(gw).reshape(b, c, 2 * h2, 2 * w2)


def _render_np(centers, size, radius, slope):
    grid = np.zeros((size, size), dtype=np.float64)
    if len(centers) == 0:
        return grid
    ys = np.arange(size)[:, None]
    xs = np.arange(size)[None, :]
    for cx, cy in centers:
        dx = np.abs(xs - cx)
        dy = np.abs(ys - cy)
        inside = (dx <= radius) & (dy <= radius)
        w = np.where(inside, np.maximum(0.0, 1.0 - slope * (dx + dy)), 0.0)
        np.maximum(grid, w, out=grid)
    return grid


def _adam_np(p, g, m, v, lr, b1, b2, eps, c1, c2):
    m *= b1
    m += (1 - b1) * g
    v *= b2
    tmp = g * g
    tmp *= 1 - b2
    v += tmp
    np.divide(v, c2, out=tmp)
    np.sqrt(tmp, out=tmp)
    tmp += eps
    np.divide(m, tmp, out=tmp)
    tmp *= lr / c1
    p -= tmp


numpy_kernels = SimpleNamespace(
    name="numpy",
    im2col=_im2col_np,
    col2im=_col2im_np,
    maxpool2=_maxpool2_np,
    maxpool2_backward=_maxpool2_backward_np,
    render=_render_np,
    adam=_adam_np,
)

# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------


def _build_numba_kernels():
    from numba import njit

    opts = {"cache": True, "nogil": True}

    @njit(**opts)
    def im2col(xp, kh, kw, stride, ho, wo):
        b, c = xp.shape[0], xp.shape[1]
        cols = np.empty((b, c * kh * kw, ho * wo), dtype=xp.dtype)
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(ho):
                            src = y * stride + i
                            base = y * wo
                            for x in range(wo):
                                cols[n, row, base + x] = xp[n, ch, src, x * stride + j]
        return cols

    @njit(**opts)
    def col2im(cols, c, hp, wp, kh, kw, stride, ho, wo):
        b = cols.shape[0]
        out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
        # accumulation order matches the numpy path: (i, j) outer, pixels inner
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(ho):
                            dst = y * stride + i
                            base = y * wo
                            for x in range(wo):
                                out[n, ch, dst, x * stride + j] += cols[n, row, base + x]
        return out

    @njit(**opts)
    def maxpool2(x):
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        out = np.empty((b, c, h2, w2), dtype=x.dtype)
        idx = np.empty((b, c, h2, w2), dtype=np.int8)
        for n in range(b):
            for ch in range(c):
                for y in range(h2):
                    for xx in range(w2):
                        best = x[n, ch, 2 * y, 2 * xx]
                        k = 0
                        v = x[n, ch, 2 * y, 2 * xx + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[n, ch, 2 * y + 1, 2 * xx]
                        if v > best:
                            best = v
                            k = 2
                        v = x[n, ch, 2 * y + 1, 2 * xx + 1]
                        if v > best:
                            best = v
                            k = 3
                        out[n, ch, y, xx] = best
                        idx[n, ch, y, xx] = k
        return out, idx

    @njit(**opts)
    def maxpool2_backward(g, idx):
        b, c, h2, w2 = g.shape
        out = np.zeros((b, c, 2 * h2, 2 * w2), dtype=g.dtype)
        for n in range(b):
            for ch in range(c):
                for y in range(h2):
                    for xx in range(w2):
                        k = idx[n, ch, y, xx]
                        out[n, ch, 2 * y + k // 2, 2 * xx + k % 2] = g[n, ch, y, xx]
        return out

    @njit(**opts)
    def _render(centers, size, radius, slope):
        grid = np.zeros((size, size), dtype=np.float64)
        for k in range(centers.shape[0]):
            cx = centers[k, 0]
            cy = centers[k, 1]
            for y in range(max(0, cy - radius), min(size, cy + radius + 1)):
                dy = abs(y - cy)
                for x in range(max(0, cx - radius), min(size, cx + radius + 1)):
                    w = 1.0 - slope * (abs(x - cx) + dy)
                    if w < 0.0:
                        w = 0.0
                    if w > grid[y, x]:
                        grid[y, x] = w
        return grid

    @njit(**opts)
    def _adam(p, g, m, v, lr, b1, b2, eps, c1, c2):
        for i in range(p.size):
            gi = g[i]
            mi = b1 * m[i] + (1 - b1) * gi
            vi = b2 * v[i] + (1 - b2) * (gi * gi)
            m[i] = mi
            v[i] = vi
            # same operation order as the numpy path, so results match bit for bit
            p[i] -= (mi / (np.sqrt(vi / c2) + eps)) * (lr / c1)

    def adam(p, g, m, v, lr, b1, b2, eps, c1, c2):
        dt = p.dtype.type
        _adam(p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
              m.reshape(-1), v.reshape(-1), dt(lr), dt(b1), dt(b2), dt(eps), dt(c1), dt(c2))

    def render(centers, size, radius, slope):
        arr = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
        return _render(arr, size, radius, slope)

    return SimpleNamespace(
        name="numba",
        im2col=im2col,
        col2im=col2im,
        maxpool2=maxpool2,
        maxpool2_backward=maxpool2_backward,
        render=render,
        adam=adam,
    )


try:
    numba_kernels = _build_numba_kernels()
except ImportError:  # pragma: no cover - numba is optional
    numba_kernels = None


def _select():
    flag = os.environ.get("E2CAPS_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or numba_kernels is None:
        return numpy_kernels
    return numba_kernels


active = _select()
BACKEND = active.name
