"""Hot loops: window lowering (unfold/fold) and depthwise convolution.

Each kernel exists twice, a numba version (``*_nb``) and a pure-numpy
version (``*_np``). :func:`unfold`, :func:`fold`, :func:`depthwise_conv`
and the depthwise gradients dispatch on :func:`lvt._backend.get_backend`.

The numba kernels parallelise only over independent outputs (windows for
unfold, channels for everything else), so every output element is
accumulated by a single thread in a fixed order and results do not depend
on the thread count.
"""

from __future__ import annotations

import numpy as np

from ._backend import get_backend, njit, prange

# --------------------------------------------------------------------------
# numba kernels


@njit(cache=True, parallel=True)
def unfold_nb(x, k, s, p, r, oh, ow):
    C, H, W = x.shape
    out = np.zeros((oh * ow, k * k, C), dtype=x.dtype)
    for i in prange(oh):
        for j in range(ow):
            l = i * ow + j
            for a in range(k):
                y = i * s - p + a * r
                if y < 0 or y >= H:
                    continue
                for b in range(k):
                    xx = j * s - p + b * r
                    if xx < 0 or xx >= W:
                        continue
                    t = a * k + b
                    for c in range(C):
                        out[l, t, c] = x[c, y, xx]
    return out


@njit(cache=True, parallel=True)
def fold_nb(cols, H, W, k, s, p, r, oh, ow):
    L, T, C = cols.shape
    out = np.zeros((C, H, W), dtype=cols.dtype)
    for c in prange(C):
        for i in range(oh):
            for j in range(ow):
                l = i * ow + j
                for a in range(k):
                    y = i * s - p + a * r
                    if y < 0 or y >= H:
                        continue
                    for b in range(k):
                        xx = j * s - p + b * r
                        if xx < 0 or xx >= W:
                            continue
                        out[c, y, xx] += cols[l, a * k + b, c]
    return out


@njit(cache=True, parallel=True)
def dwconv_nb(x, w, k, s, p, r, oh, ow):
    C, H, W = x.shape
    out = np.zeros((C, oh, ow), dtype=x.dtype)
    for c in prange(C):
        for i in range(oh):
            for j in range(ow):
                for a in range(k):
                    y = i * s - p + a * r
                    if y < 0 or y >= H:
                        continue
                    for b in range(k):
                        xx = j * s - p + b * r
                        if xx < 0 or xx >= W:
                            continue
                        out[c, i, j] += w[c, 0, a, b] * x[c, y, xx]
    return out


@njit(cache=True, parallel=True)
def dwconv_grad_input_nb(dy, w, H, W, k, s, p, r):
    C, oh, ow = dy.shape
    dx = np.zeros((C, H, W), dtype=dy.dtype)
    for c in prange(C):
        for i in range(oh):
            for j in range(ow):
                g = dy[c, i, j]
                for a in range(k):
                    y = i * s - p + a * r
                    if y < 0 or y >= H:
                        continue
                    for b in range(k):
                        xx = j * s - p + b * r
                        if xx < 0 or xx >= W:
                            continue
                        dx[c, y, xx] += w[c, 0, a, b] * g
    return dx


@njit(cache=True, parallel=True)
def dwconv_grad_weight_nb(x, dy, k, s, p, r):
    C, H, W = x.shape
    _, oh, ow = dy.shape
    dw = np.zeros((C, 1, k, k), dtype=x.dtype)
    for c in prange(C):
        for a in range(k):
            for b in range(k):
                for i in range(oh):
                    y = i * s - p + a * r
                    if y < 0 or y >= H:
                        continue
                    for j in range(ow):
                        xx = j * s - p + b * r
                        if xx < 0 or xx >= W:
                            continue
                        dw[c, 0, a, b] += x[c, y, xx] * dy[c, i, j]
    return dw


# --------------------------------------------------------------------------
# numpy fallbacks


def _tap_slices(k, s, p, r, oh, ow):
    """Yield (tap, row slice, col slice) into the zero-padded image."""
    for a in range(k):
        for b in range(k):
            y0 = a * r
            x0 = b * r
            yield a * k + b, slice(y0, y0 + s * (oh - 1) + 1, s), slice(x0, x0 + s * (ow - 1) + 1, s)


def _padded_extent(H, k, s, p, r, oh):
    # room for every tap of every window, plus the symmetric padding
    return max(H + 2 * p, (oh - 1) * s + (k - 1) * r + 1)


def unfold_np(x, k, s, p, r, oh, ow):
    C, H, W = x.shape
    Hp = _padded_extent(H, k, s, p, r, oh)
    Wp = _padded_extent(W, k, s, p, r, ow)
    img = np.zeros((C, Hp, Wp), dtype=x.dtype)
    img[:, p:p + H, p:p + W] = x
    out = np.empty((k * k, C, oh, ow), dtype=x.dtype)
    for t, ys, xs in _tap_slices(k, s, p, r, oh, ow):
        out[t] = img[:, ys, xs]
    return np.ascontiguousarray(out.reshape(k * k, C, oh * ow).transpose(2, 0, 1))


def fold_np(cols, H, W, k, s, p, r, oh, ow):
    L, T, C = cols.shape
    Hp = _padded_extent(H, k, s, p, r, oh)
    Wp = _padded_extent(W, k, s, p, r, ow)
    img = np.zeros((C, Hp, Wp), dtype=cols.dtype)
    grid = cols.transpose(1, 2, 0).reshape(T, C, oh, ow)
    for t, ys, xs in _tap_slices(k, s, p, r, oh, ow):
        img[:, ys, xs] += grid[t]
    return np.ascontiguousarray(img[:, p:p + H, p:p + W])


def dwconv_np(x, w, k, s, p, r, oh, ow):
    cols = unfold_np(x, k, s, p, r, oh, ow)  # (L, k*k, C)
    taps = w.reshape(w.shape[0], k * k)  # (C, k*k)
    out = np.einsum("ltc,ct->cl", cols, taps)
    return out.reshape(x.shape[0], oh, ow)


def dwconv_grad_input_np(dy, w, H, W, k, s, p, r):
    C, oh, ow = dy.shape
    taps = w.reshape(C, k * k)
    dcols = np.einsum("cl,ct->ltc", dy.reshape(C, oh * ow), taps)
    return fold_np(np.ascontiguousarray(dcols), H, W, k, s, p, r, oh, ow)


def dwconv_grad_weight_np(x, dy, k, s, p, r):
    C, oh, ow = dy.shape
    cols = unfold_np(x, k, s, p, r, oh, ow)
    dw = np.einsum("ltc,cl->ct", cols, dy.reshape(C, oh * ow))
    return dw.reshape(C, 1, k, k)


# --------------------------------------------------------------------------
# dispatch


def _numba() -> bool:
    return get_backend() == "numba"


def unfold(x, k, s, p, r, oh, ow):
    x = np.ascontiguousarray(x)
    if _numba():
        return unfold_nb(x, k, s, p, r, oh, ow)
    return unfold_np(x, k, s, p, r, oh, ow)


def fold(cols, H, W, k, s, p, r, oh, ow):
    cols = np.ascontiguousarray(cols)
    if _numba():
        return fold_nb(cols, H, W, k, s, p, r, oh, ow)
    return fold_np(cols, H, W, k, s, p, r, oh, ow)


def depthwise_conv(x, w, k, s, p, r, oh, ow):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    if _numba():
        return dwconv_nb(x, w, k, s, p, r, oh, ow)
    return dwconv_np(x, w, k, s, p, r, oh, ow)


def depthwise_conv_grad_input(dy, w, H, W, k, s, p, r):
    dy = np.ascontiguousarray(dy)
    w = np.ascontiguousarray(w, dtype=dy.dtype)
    if _numba():
        return dwconv_grad_input_nb(dy, w, H, W, k, s, p, r)
    return dwconv_grad_input_np(dy, w, H, W, k, s, p, r)


def depthwise_conv_grad_weight(x, dy, k, s, p, r):
    x = np.ascontiguousarray(x)
    dy = np.ascontiguousarray(dy, dtype=x.dtype)
    if _numba():
        return dwconv_grad_weight_nb(x, dy, k, s, p, r)
    return dwconv_grad_weight_np(x, dy, k, s, p, r)
