"""Convolutional self-attention over 3x3 sliding windows.

For every window the input is unfolded into its ``k*k`` taps. Each tap ``j``
is projected by its own position-specific matrix (one batched matmul with
the window positions as the batch axis), and each of the ``k*k`` output
positions ``i`` is a weighted sum of those projections::

    y_i = sum_j alpha[i, j] * W_j @ x_j

The ``k*k x k*k`` weight matrix ``alpha`` is predicted per window and per
head from the window-centre feature by a single linear map, then normalised
over ``j``. Window outputs are folded (scatter-added) back to the input
resolution and mixed by an output projection.

Setting ``alpha`` to all ones recovers a plain convolution at window
centres; tying every ``W_j`` to one matrix recovers outlook-style windowed
attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ParamGroup, trunc_normal
from .tensor import ConvSpec, ShapeError

NORMALIZERS = ("softmax", "ratio")


@dataclass
class CsaParams(ParamGroup):
    w_filter: np.ndarray  # (heads, k*k, d_head, d_head), one matrix per window tap
    w_qk: np.ndarray  # (heads * k^4, d)
    b_qk: np.ndarray  # (heads * k^4,)
    w_out: np.ndarray  # (d, d)
    b_out: np.ndarray  # (d,)
    kernel_size: int = 3
    stride: int = 2

    def __post_init__(self):
        h, taps, dh, dh2 = self.w_filter.shape
        k = self.kernel_size
        if taps != k * k or dh != dh2:
            raise ShapeError(f"w_filter {self.w_filter.shape} is not (heads, {k * k}, d_h, d_h)")
        if self.w_qk.shape != (h * k**4, h * dh):
            raise ShapeError(f"w_qk {self.w_qk.shape} != {(h * k**4, h * dh)}")

    @classmethod
    def init(cls, dim: int, heads: int, rng, dtype=np.float32, std: float = 0.02, kernel_size: int = 3, stride: int = 2):
        if dim % heads:
            raise ValueError(f"heads={heads} must divide dim={dim}")
        dh, kk = dim // heads, kernel_size * kernel_size
        return cls(
            w_filter=trunc_normal(rng, (heads, kk, dh, dh), std, dtype),
            w_qk=trunc_normal(rng, (heads * kk * kk, dim), std, dtype),
            b_qk=np.zeros(heads * kk * kk, dtype),
            w_out=trunc_normal(rng, (dim, dim), std, dtype),
            b_out=np.zeros(dim, dtype),
            kernel_size=kernel_size,
            stride=stride,
        )

    @property
    def heads(self) -> int:
        return self.w_filter.shape[0]

    @property
    def dim(self) -> int:
        return self.w_out.shape[0]

    @property
    def window_spec(self) -> ConvSpec:
        return ConvSpec(self.kernel_size, self.stride, self.kernel_size // 2)

    def as_conv_kernel(self) -> np.ndarray:
        """Filters arranged as a grouped ``(d, d/heads, k, k)`` conv weight."""
        h, kk, dh, _ = self.w_filter.shape
        k = self.kernel_size
        w = self.w_filter.reshape(h, k, k, dh, dh).transpose(0, 3, 4, 1, 2)
        return np.ascontiguousarray(w.reshape(h * dh, dh, k, k))


def csa_alpha(center_features, params: CsaParams, normalize: str = "softmax") -> np.ndarray:
    """Per-window attention, shape ``(L, heads, k*k, k*k)`` indexed [window, head, out i, tap j].

    ``normalize="ratio"`` divides raw scores by their row sum instead of
    using the exponential normalisation; it is only well defined when every
    row sum is non-zero.
    """
    if normalize not in NORMALIZERS:
        raise ValueError(f"normalize must be one of {NORMALIZERS}")
    c = T._float(center_features)
    if c.ndim != 2 or c.shape[1] != params.dim:
        raise ShapeError(f"centre features {c.shape} do not match dim {params.dim}")
    kk = params.kernel_size**2
    scores = T.linear(c, params.w_qk, params.b_qk).reshape(-1, params.heads, kk, kk)
    if normalize == "softmax":
        return T.softmax(scores, axis=-1)
    return T._finite(scores / scores.sum(axis=-1, keepdims=True), "csa_alpha")


def _forward(x, params: CsaParams, alpha_override=None, normalize="softmax"):
    x = T._check_map(x)
    d, H, W = x.shape
    if d != params.dim:
        raise ShapeError(f"input has {d} channels, CSA expects {params.dim}")
    k = params.kernel_size
    if H < k or W < k:
        raise ShapeError(f"input {H}x{W} smaller than the {k}x{k} window")
    h, kk, dh = params.heads, k * k, d // params.heads
    spec = params.window_spec
    U = T.unfold(x, spec)  # (L, kk, d)
    L = U.shape[0]
    center = U[:, kk // 2, :]
    if alpha_override is None:
        scores = T.linear(center, params.w_qk, params.b_qk).reshape(L, h, kk, kk)
        if normalize == "softmax":
            A = T.softmax(scores, axis=-1)
        elif normalize == "ratio":
            A = T._finite(scores / scores.sum(axis=-1, keepdims=True), "csa_alpha")
        else:
            raise ValueError(f"normalize must be one of {NORMALIZERS}")
    else:
        scores = None
        A = np.ascontiguousarray(np.broadcast_to(np.asarray(alpha_override, dtype=x.dtype), (L, h, kk, kk)))
    # taps as columns: (h * kk, dh, L); batch axis = (head, window position)
    X = np.ascontiguousarray(U.reshape(L, kk, h, dh).transpose(2, 1, 3, 0)).reshape(h * kk, dh, L)
    Wf = params.w_filter.astype(x.dtype, copy=False).reshape(h * kk, dh, dh)
    P = T.batched_matmul(Wf, X).reshape(h, kk, dh, L)
    Pw = np.ascontiguousarray(P.transpose(3, 0, 1, 2)).reshape(L * h, kk, dh)
    O = T.batched_matmul(A.reshape(L * h, kk, kk), Pw).reshape(L, h, kk, dh)
    O = np.ascontiguousarray(O.transpose(0, 2, 1, 3)).reshape(L, kk, d)
    F = T.fold(O, H, W, spec)
    Ft = np.ascontiguousarray(F.reshape(d, -1).T)
    Y = np.ascontiguousarray(T.linear(Ft, params.w_out, params.b_out).T.reshape(d, H, W))
    cache = dict(U=U, center=center, scores=scores, A=A, X=X, Pw=Pw, Ft=Ft, shape=(d, H, W))
    return Y, cache


def csa_forward(x, params: CsaParams, alpha_override=None, normalize: str = "softmax") -> np.ndarray:
    """CSA on a ``(d, H, W)`` map; output has the input's extent.

    ``alpha_override`` (any array broadcastable to ``(L, heads, k*k, k*k)``)
    replaces the predicted, normalised attention verbatim.
    """
    return _forward(x, params, alpha_override, normalize)[0]


def csa_backward(x, params: CsaParams, upstream_grad, alpha_override=None, normalize: str = "softmax"):
    """Exact gradients of :func:`csa_forward`: ``(dx, CsaParams of grads)``."""
    _, c = _forward(x, params, alpha_override, normalize)
    d, H, W = c["shape"]
    k = params.kernel_size
    h, kk, dh = params.heads, k * k, d // params.heads
    L = c["U"].shape[0]
    spec = params.window_spec
    dY = np.asarray(upstream_grad, dtype=c["U"].dtype)
    if dY.shape != (d, H, W):
        raise ShapeError(f"upstream grad {dY.shape} != output {(d, H, W)}")
    dYt = dY.reshape(d, -1).T
    dFt, dw_out, db_out = T.linear_backward(c["Ft"], params.w_out, dYt)
    dF = np.ascontiguousarray(dFt.T.reshape(d, H, W))
    dO = T.unfold(dF, spec)  # adjoint of fold
    dOh = np.ascontiguousarray(dO.reshape(L, kk, h, dh).transpose(0, 2, 1, 3)).reshape(L * h, kk, dh)
    A = c["A"].reshape(L * h, kk, kk)
    Pw = c["Pw"]
    dA = (dOh @ Pw.transpose(0, 2, 1)).reshape(L, h, kk, kk)
    dPw = A.transpose(0, 2, 1) @ dOh  # (L*h, kk, dh)
    dP = np.ascontiguousarray(dPw.reshape(L, h, kk, dh).transpose(1, 2, 3, 0)).reshape(h * kk, dh, L)
    X = c["X"]
    Wf = params.w_filter.astype(X.dtype, copy=False).reshape(h * kk, dh, dh)
    dw_filter = (dP @ X.transpose(0, 2, 1)).reshape(h, kk, dh, dh)
    dX = Wf.transpose(0, 2, 1) @ dP  # (h*kk, dh, L)
    dU = np.ascontiguousarray(dX.reshape(h, kk, dh, L).transpose(3, 1, 0, 2)).reshape(L, kk, d)
    dw_qk = np.zeros_like(params.w_qk, dtype=X.dtype)
    db_qk = np.zeros_like(params.b_qk, dtype=X.dtype)
    if alpha_override is None:
        if normalize == "softmax":
            dS = T.softmax_backward(c["A"], dA)
        else:
            S = c["scores"]
            dS = (dA - (c["A"] * dA).sum(axis=-1, keepdims=True)) / S.sum(axis=-1, keepdims=True)
        dS = dS.reshape(L, -1)
        dcenter, dw_qk, db_qk = T.linear_backward(c["center"], params.w_qk, dS)
        dU[:, kk // 2, :] += dcenter
    dx = T.fold(dU, H, W, spec)
    grads = CsaParams(
        w_filter=dw_filter,
        w_qk=dw_qk,
        b_qk=db_qk,
        w_out=dw_out,
        b_out=db_out,
        kernel_size=params.kernel_size,
        stride=params.stride,
    )
    return dx, grads


def window_grid(H: int, W: int, params: CsaParams) -> tuple[int, int]:
    """Extent of the window grid the unfold produces for an ``H x W`` input."""
    return params.window_spec.out_shape(H, W)
