"""Reference semantics by explicit scalar loops.

Nothing here shares code with the fast paths: no unfold/fold, no matmul,
no vectorised conv. The only imported primitive is ``softmax``. Parameter
dataclasses are read as plain containers of arrays.

These are slow by design and refuse inputs beyond :data:`MAX_EXTENT`
spatially or :data:`MAX_CHANNELS` channels.
"""

from __future__ import annotations

import math

import numpy as np

from lvt.tensor import softmax

MAX_EXTENT = 16
MAX_CHANNELS = 16
LN_EPS = 1e-6


class OracleSizeError(ValueError):
    """Input is too large for a loop oracle."""


def _limit(x, what="input"):
    C, H, W = x.shape
    if H > MAX_EXTENT or W > MAX_EXTENT or C > MAX_CHANNELS:
        raise OracleSizeError(f"{what} {x.shape} exceeds oracle limits ({MAX_CHANNELS} ch, {MAX_EXTENT}x{MAX_EXTENT})")


def _out_extent(n, k, s, p, r):
    return (n + 2 * p - r * (k - 1) - 1) // s + 1


def _silu(v: float) -> float:
    if v >= 0:
        return v / (1.0 + math.exp(-v))
    e = math.exp(v)
    return v * e / (1.0 + e)


def oracle_conv2d(x, w, bias=None, stride=1, padding=0, dilation=1, groups=1):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _limit(x)
    C_in, H, W = x.shape
    C_out, cg, k, _ = w.shape
    og = C_out // groups
    oh = _out_extent(H, k, stride, padding, dilation)
    ow = _out_extent(W, k, stride, padding, dilation)
    out = np.zeros((C_out, oh, ow))
    for o in range(C_out):
        g = o // og
        for i in range(oh):
            for j in range(ow):
                acc = 0.0 if bias is None else float(bias[o])
                for c in range(cg):
                    ci = g * cg + c
                    for a in range(k):
                        y = i * stride - padding + a * dilation
                        if y < 0 or y >= H:
                            continue
                        for b in range(k):
                            xx = j * stride - padding + b * dilation
                            if xx < 0 or xx >= W:
                                continue
                            acc += w[o, c, a, b] * x[ci, y, xx]
                out[o, i, j] = acc
    return out


def _pointwise(x, w, b):
    """Per-pixel ``w @ x + b`` on a (C, H, W) map, by loops."""
    C, H, W = x.shape
    O = w.shape[0]
    out = np.zeros((O, H, W))
    for o in range(O):
        for y in range(H):
            for xx in range(W):
                acc = 0.0 if b is None else float(b[o])
                for c in range(C):
                    acc += w[o, c] * x[c, y, xx]
                out[o, y, xx] = acc
    return out


def _rows_linear(t, w, b):
    N, C = t.shape
    O = w.shape[0]
    out = np.zeros((N, O))
    for n in range(N):
        for o in range(O):
            acc = 0.0 if b is None else float(b[o])
            for c in range(C):
                acc += w[o, c] * t[n, c]
            out[n, o] = acc
    return out


def oracle_attention(Q, K, V, num_heads):
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    N, d = Q.shape
    M = K.shape[0]
    dh = d // num_heads
    scale = 1.0 / math.sqrt(dh)
    out = np.zeros((N, d))
    for h in range(num_heads):
        for n in range(N):
            logits = np.zeros(M)
            for m in range(M):
                acc = 0.0
                for c in range(h * dh, (h + 1) * dh):
                    acc += Q[n, c] * K[m, c]
                logits[m] = acc * scale
            p = softmax(logits)
            for c in range(h * dh, (h + 1) * dh):
                acc = 0.0
                for m in range(M):
                    acc += p[m] * V[m, c]
                out[n, c] = acc
    return out


def _csa_core(x, proj, logits_fn, alpha_override, normalize, heads, k, stride):
    """Shared window walk for the CSA and outlook references.

    ``proj(h, j, window)`` returns the projected d_head vector of tap ``j``.
    """
    d, H, W = x.shape
    dh = d // heads
    kk = k * k
    p = k // 2
    lh = _out_extent(H, k, stride, p, 1)
    lw = _out_extent(W, k, stride, p, 1)
    F = np.zeros((d, H, W))
    for wi in range(lh):
        for wj in range(lw):
            window = []
            for a in range(k):
                for b in range(k):
                    y, xx = wi * stride - p + a, wj * stride - p + b
                    inside = 0 <= y < H and 0 <= xx < W
                    window.append((y, xx, x[:, y, xx] if inside else np.zeros(d), inside))
            center = window[kk // 2][2]
            for h in range(heads):
                if alpha_override is None:
                    scores = logits_fn(center, h)
                    alpha = np.zeros((kk, kk))
                    for i in range(kk):
                        if normalize == "softmax":
                            alpha[i] = softmax(scores[i])
                        else:
                            alpha[i] = scores[i] / sum(scores[i])
                else:
                    alpha = np.broadcast_to(np.asarray(alpha_override, dtype=np.float64), (lh * lw, heads, kk, kk))[wi * lw + wj, h]
                projected = [proj(h, j, window) for j in range(kk)]
                for i in range(kk):
                    ty, tx, _, inside = window[i]
                    if not inside:
                        continue
                    for o in range(dh):
                        acc = 0.0
                        for j in range(kk):
                            acc += alpha[i, j] * projected[j][o]
                        F[h * dh + o, ty, tx] += acc
    return F


def _qk_logits(w_qk, b_qk, kk):
    def logits(center, h):
        scores = np.zeros((kk, kk))
        for i in range(kk):
            for j in range(kk):
                row = (h * kk + i) * kk + j
                acc = float(b_qk[row])
                for c in range(center.shape[0]):
                    acc += w_qk[row, c] * center[c]
                scores[i, j] = acc
        return scores

    return logits


def oracle_csa(x, params, alpha_override=None, normalize="softmax"):
    """Window-by-window evaluation of ``y_i = sum_j alpha_ij W_j x_j``, fold, output projection."""
    x = np.asarray(x, dtype=np.float64)
    _limit(x)
    wf = np.asarray(params.w_filter, dtype=np.float64)
    heads, kk, dh, _ = wf.shape
    k = params.kernel_size

    def proj(h, j, window):
        xj = window[j][2]
        out = np.zeros(dh)
        for o in range(dh):
            acc = 0.0
            for c in range(dh):
                acc += wf[h, j, o, c] * xj[h * dh + c]
            out[o] = acc
        return out

    logits = _qk_logits(np.asarray(params.w_qk, np.float64), np.asarray(params.b_qk, np.float64), kk)
    F = _csa_core(x, proj, logits, alpha_override, normalize, heads, k, params.stride)
    return _pointwise(F, np.asarray(params.w_out, np.float64), np.asarray(params.b_out, np.float64))


def oracle_outlook_attention(x, w_v, w_qk, b_qk, w_out, b_out, heads, k=3, stride=2):
    """Outlook-style windowed attention: project values once per pixel, then
    weight them inside each window with the predicted attention.
    """
    x = np.asarray(x, dtype=np.float64)
    _limit(x)
    d = x.shape[0]
    dh = d // heads
    v = _pointwise(x, np.asarray(w_v, np.float64), None)
    H, W = x.shape[1:]

    def proj(h, j, window):
        y, xx, _, inside = window[j]
        if not inside:
            return np.zeros(dh)
        return v[h * dh:(h + 1) * dh, y, xx]

    logits = _qk_logits(np.asarray(w_qk, np.float64), np.asarray(b_qk, np.float64), k * k)
    F = _csa_core(x, proj, logits, None, "softmax", heads, k, stride)
    return _pointwise(F, np.asarray(w_out, np.float64), np.asarray(b_out, np.float64))


def _layer_norm_rows(t, gamma, beta):
    N, C = t.shape
    out = np.zeros_like(t)
    for n in range(N):
        mu = 0.0
        for c in range(C):
            mu += t[n, c]
        mu /= C
        var = 0.0
        for c in range(C):
            var += (t[n, c] - mu) ** 2
        var /= C
        inv = 1.0 / math.sqrt(var + LN_EPS)
        for c in range(C):
            out[n, c] = (t[n, c] - mu) * inv * gamma[c] + beta[c]
    return out


def _tokens(m):
    C, H, W = m.shape
    t = np.zeros((H * W, C))
    for y in range(H):
        for xx in range(W):
            for c in range(C):
                t[y * W + xx, c] = m[c, y, xx]
    return t


def oracle_asa(x, params):
    """Atrous self-attention from its definition, one scalar at a time."""
    x = np.asarray(x, dtype=np.float64)
    _limit(x)
    d, H, W = x.shape
    f = lambda a: None if a is None else np.asarray(a, dtype=np.float64)  # noqa: E731
    qhat = _pointwise(x, f(params.w_q1), f(params.b_q1))
    w_qd, b_qd = f(params.w_qd), f(params.b_qd)
    q = np.zeros((d, H, W))
    for r in params.dilations:
        for c in range(d):
            for y in range(H):
                for xx in range(W):
                    acc = float(b_qd[c])
                    for a in range(3):
                        yy = y + (a - 1) * r
                        if yy < 0 or yy >= H:
                            continue
                        for b in range(3):
                            xb = xx + (b - 1) * r
                            if 0 <= xb < W:
                                acc += w_qd[c, 0, a, b] * qhat[c, yy, xb]
                    q[c, y, xx] += _silu(acc)
    R = params.sr.ratio
    if R == 1:
        S = _tokens(x)
    else:
        hr, wr = -(-H // R), -(-W // R)
        w_sr, b_sr = f(params.sr.w), f(params.sr.b)
        red = np.zeros((d, hr, wr))
        for o in range(d):
            for i in range(hr):
                for j in range(wr):
                    acc = float(b_sr[o])
                    for c in range(d):
                        for a in range(R):
                            for b in range(R):
                                y, xx = i * R + a, j * R + b
                                if y < H and xx < W:
                                    acc += w_sr[o, c, a, b] * x[c, y, xx]
                    red[o, i, j] = acc
        S = _layer_norm_rows(_tokens(red), f(params.sr.gamma), f(params.sr.beta))
    K = _rows_linear(S, f(params.w_k), None)
    V = _rows_linear(S, f(params.w_v), f(params.b_v))
    O = oracle_attention(_tokens(q), K, V, params.heads.num_heads)
    Y = _rows_linear(O, f(params.w_out), f(params.b_out))
    out = np.zeros((d, H, W))
    for y in range(H):
        for xx in range(W):
            for c in range(d):
                out[c, y, xx] = Y[y * W + xx, c]
    return out


def oracle_forward(layer_kind: str, inputs, params):
    """Dispatch to a loop oracle.

    ``conv2d``: ``inputs`` is x, ``params`` a dict with ``w`` and optional
    ``bias``, ``stride``, ``padding``, ``dilation``, ``groups``.
    ``csa`` / ``asa``: ``inputs`` is x, ``params`` the layer's parameters.
    ``attention``: ``inputs`` is (Q, K, V), ``params`` the head count or an
    object with ``num_heads``.
    """
    if layer_kind == "conv2d":
        p = dict(params)
        return oracle_conv2d(inputs, p.pop("w"), **p)
    if layer_kind == "csa":
        return oracle_csa(inputs, params)
    if layer_kind == "asa":
        return oracle_asa(inputs, params)
    if layer_kind == "attention":
        Q, K, V = inputs
        if Q.shape[0] > MAX_EXTENT**2 or K.shape[0] > MAX_EXTENT**2 or Q.shape[1] > MAX_CHANNELS:
            raise OracleSizeError("attention operands exceed oracle limits")
        heads = getattr(params, "num_heads", params)
        return oracle_attention(Q, K, V, int(heads))
    raise ValueError(f"unknown layer kind {layer_kind!r}")
