"""Dense tensor primitives the attention layers are built from.

Tensors are plain ``numpy.ndarray`` objects in row-major order. Feature maps
are channel-first ``(C, H, W)``; token matrices are ``(N, d)``. Every op
preserves the floating dtype of its input (float32 by default, float64 for
gradient verification) and rejects non-finite results with
:class:`NonFiniteError`.

Multiply-accumulate counts are tallied by :func:`matmul`,
:func:`batched_matmul` and :func:`conv2d` into any active
:func:`count_macs` context, which is how the FLOPs estimator is
cross-checked.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def _float(x) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float32)
    return x


# --------------------------------------------------------------------------
# MAC instrumentation

_counter: contextvars.ContextVar = contextvars.ContextVar("lvt_mac_counter", default=None)


class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextmanager
def count_macs():
    """Collect multiply-accumulate counts from every op run inside the block."""
    counter = MacCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def _tally(op: str, n: int) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.add(op, n)


# --------------------------------------------------------------------------
# convolution geometry


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.dilation < 1 or self.groups < 1:
            raise ValueError(f"invalid conv spec {self}")
        if self.padding < 0:
            raise ValueError(f"negative padding in {self}")

    def out_extent(self, n: int) -> int:
        k, s, p, r = self.kernel_size, self.stride, self.padding, self.dilation
        out = (n + 2 * p - r * (k - 1) - 1) // s + 1
        if out <= 0:
            raise ShapeError(f"non-positive output extent for input {n} under {self}")
        return out

    def out_shape(self, h: int, w: int) -> tuple[int, int]:
        return self.out_extent(h), self.out_extent(w)

    @classmethod
    def same(cls, kernel_size: int, dilation: int = 1, groups: int = 1) -> "ConvSpec":
        """Stride-1 spec whose zero padding keeps the spatial extent."""
        return cls(kernel_size, 1, dilation * (kernel_size - 1) // 2, dilation, groups)


# --------------------------------------------------------------------------
# products


def matmul(a, b) -> np.ndarray:
    a = _float(a)
    b = _float(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    _tally("matmul", a.shape[0] * a.shape[1] * b.shape[1])
    return _finite(a @ b, "matmul")


def batched_matmul(a, b) -> np.ndarray:
    a = _float(a)
    b = _float(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"batched_matmul shape mismatch {a.shape} @ {b.shape}")
    _tally("batched_matmul", a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2])
    return _finite(np.matmul(a, b), "batched_matmul")


def linear(x, w, b=None) -> np.ndarray:
    """Token projection ``x @ w.T + b`` with ``w`` stored as (out, in)."""
    y = matmul(x, np.asarray(w).T)
    if b is not None:
        y = y + b
    return y


def linear_backward(x, w, dy):
    """Gradients of :func:`linear`: (dx, dw, db)."""
    return dy @ w, dy.T @ x, dy.sum(axis=0)


# --------------------------------------------------------------------------
# pointwise and normalisation


def softmax(t, axis: int = -1) -> np.ndarray:
    t = _float(t)
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {t.ndim}")
    z = t - t.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return _finite(e / e.sum(axis=axis, keepdims=True), "softmax")


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (dp - (p * dp).sum(axis=axis, keepdims=True))


def sigmoid(x) -> np.ndarray:
    x = _float(x)
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    inv = 1.0 / (1.0 + e)
    return np.where(x >= 0, inv, e * inv)


def silu(x) -> np.ndarray:
    x = _float(x)
    return _finite(x * sigmoid(x), "silu")


def silu_grad(x) -> np.ndarray:
    """Derivative of :func:`silu` evaluated at ``x``."""
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = _float(x)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    y = xc / np.sqrt(var + eps)
    return _finite(y * gamma + beta, "layer_norm")


def layer_norm_backward(x, gamma, dy, eps: float = 1e-6):
    """Gradients of :func:`layer_norm`: (dx, dgamma, dbeta)."""
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    g = dy * gamma
    dx = inv / d * (d * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def channel_norm(x, gamma, beta, eps: float = 1e-6) -> np.ndarray:
    """:func:`layer_norm` over the channel axis of a (C, H, W) map."""
    return np.ascontiguousarray(layer_norm(x.transpose(1, 2, 0), gamma, beta, eps).transpose(2, 0, 1))


def channel_norm_backward(x, gamma, dy, eps: float = 1e-6):
    dx, dg, db = layer_norm_backward(x.transpose(1, 2, 0), gamma, dy.transpose(1, 2, 0), eps)
    return np.ascontiguousarray(dx.transpose(2, 0, 1)), dg, db


# --------------------------------------------------------------------------
# window lowering


def _check_map(x, name="x") -> np.ndarray:
    x = _float(x)
    if x.ndim != 3:
        raise ShapeError(f"{name} must be (C, H, W), got shape {x.shape}")
    return x


def unfold(x, spec: ConvSpec) -> np.ndarray:
    """Lower sliding windows to ``(L, k*k, C)``.

    Windows are listed row-major over the output grid; the ``k*k`` taps of
    each window are row-major within the window. Taps that fall in the zero
    padding are zero.
    """
    x = _check_map(x)
    C, H, W = x.shape
    oh, ow = spec.out_shape(H, W)
    k = spec.kernel_size
    return kernels.unfold(x, k, spec.stride, spec.padding, spec.dilation, oh, ow)


def fold(w, out_h: int, out_w: int, spec: ConvSpec) -> np.ndarray:
    """Scatter-add ``(L, k*k, C)`` windows back to a ``(C, out_h, out_w)`` map.

    Overlapping taps are summed and padding taps are dropped, which makes
    this the exact adjoint of :func:`unfold`.
    """
    w = _float(w)
    k = spec.kernel_size
    oh, ow = spec.out_shape(out_h, out_w)
    if w.ndim != 3 or w.shape[0] != oh * ow or w.shape[1] != k * k:
        raise ShapeError(f"fold input {w.shape} does not match {oh * ow} windows of {k * k} taps")
    return kernels.fold(w, out_h, out_w, k, spec.stride, spec.padding, spec.dilation, oh, ow)


# --------------------------------------------------------------------------
# convolution


def _conv_shapes(x, w, spec):
    x = _check_map(x)
    w = _float(w)
    C_in, H, W = x.shape
    g = spec.groups
    if w.ndim != 4 or w.shape[2] != spec.kernel_size or w.shape[3] != spec.kernel_size:
        raise ShapeError(f"conv weight {w.shape} does not match kernel size {spec.kernel_size}")
    C_out = w.shape[0]
    if C_in % g or C_out % g or w.shape[1] != C_in // g:
        raise ShapeError(f"group mismatch: input {C_in}, weight {w.shape}, groups {g}")
    oh, ow = spec.out_shape(H, W)
    return x, w, C_in, C_out, H, W, oh, ow


def _is_depthwise(C_in, C_out, g):
    return g == C_in == C_out


def conv2d(x, w, bias=None, spec: ConvSpec | None = None) -> np.ndarray:
    """Grouped, dilated, zero-padded cross-correlation of a (C, H, W) map."""
    spec = spec or ConvSpec(np.shape(w)[-1])
    x, w, C_in, C_out, H, W, oh, ow = _conv_shapes(x, w, spec)
    k, g = spec.kernel_size, spec.groups
    w = w.astype(x.dtype, copy=False)
    _tally("conv2d", k * k * (C_in // g) * C_out * oh * ow)
    if _is_depthwise(C_in, C_out, g):
        out = kernels.depthwise_conv(x, w, k, spec.stride, spec.padding, spec.dilation, oh, ow)
    elif k == 1 and spec.stride == 1 and spec.padding == 0 and g == 1:
        out = (w.reshape(C_out, C_in) @ x.reshape(C_in, H * W)).reshape(C_out, oh, ow)
    else:
        cols = kernels.unfold(x, k, spec.stride, spec.padding, spec.dilation, oh, ow)
        out = _grouped_cols_matmul(cols, w, g).T.reshape(C_out, oh, ow)
    if bias is not None:
        out = out + np.asarray(bias, dtype=out.dtype)[:, None, None]
    return _finite(np.ascontiguousarray(out), "conv2d")


def _grouped_cols_matmul(cols, w, g):
    L, T, C_in = cols.shape
    C_out = w.shape[0]
    cg, og = C_in // g, C_out // g
    if g == 1:
        wmat = w.transpose(0, 2, 3, 1).reshape(C_out, T * C_in)
        return cols.reshape(L, T * C_in) @ wmat.T
    wg = w.reshape(g, og, cg, T)
    out = np.einsum("ltgc,goct->lgo", cols.reshape(L, T, g, cg), wg)
    return out.reshape(L, C_out)


def conv2d_backward(x, w, dy, spec: ConvSpec):
    """Gradients of :func:`conv2d`: (dx, dw, dbias)."""
    x, w, C_in, C_out, H, W, oh, ow = _conv_shapes(x, w, spec)
    k, g, s, p, r = spec.kernel_size, spec.groups, spec.stride, spec.padding, spec.dilation
    dy = np.asarray(dy, dtype=x.dtype)
    db = dy.sum(axis=(1, 2))
    if _is_depthwise(C_in, C_out, g):
        dx = kernels.depthwise_conv_grad_input(dy, w, H, W, k, s, p, r)
        dw = kernels.depthwise_conv_grad_weight(x, dy, k, s, p, r)
        return dx, dw, db
    T = k * k
    cols = kernels.unfold(x, k, s, p, r, oh, ow)
    dyt = dy.reshape(C_out, oh * ow).T  # (L, C_out)
    if g == 1:
        wmat = w.transpose(0, 2, 3, 1).reshape(C_out, T * C_in)
        dw = (dyt.T @ cols.reshape(-1, T * C_in)).reshape(C_out, k, k, C_in).transpose(0, 3, 1, 2)
        dcols = (dyt @ wmat).reshape(-1, T, C_in)
    else:
        cg, og = C_in // g, C_out // g
        wg = w.reshape(g, og, cg, T)
        dyg = dyt.reshape(-1, g, og)
        dw = np.einsum("lgo,ltgc->goct", dyg, cols.reshape(-1, T, g, cg)).reshape(C_out, cg, k, k)
        dcols = np.einsum("lgo,goct->ltgc", dyg, wg).reshape(-1, T, C_in)
    dx = kernels.fold(np.ascontiguousarray(dcols), H, W, k, s, p, r, oh, ow)
    return dx, np.ascontiguousarray(dw), db
