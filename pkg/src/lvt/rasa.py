"""Atrous self-attention (ASA) and its recursive wrapper (RASA).

ASA builds a multi-scale query: a 1x1 projection followed by one shared
depthwise 3x3 kernel applied at dilation rates 1, 3 and 5, each branch
passed through SiLU and the three summed. Keys and values come from the
spatially reduced input. RASA feeds ASA back into itself::

    X_1 = ASA(X_0)
    X_t = ASA(X_{t-1} + X_{t-2})    for t >= 2

with the same parameters at every step, so depth adds compute but no
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import (
    AttentionConfig,
    ParamGroup,
    SrConfig,
    attention_backward,
    attention_forward,
    spatial_reduction,
    spatial_reduction_backward,
    trunc_normal,
)
from .tensor import ConvSpec, ShapeError

DILATIONS = (1, 3, 5)


@dataclass
class AsaParams(ParamGroup):
    """ASA weights. Linear weights are stored (out, in).

    ``w_qd`` is the single depthwise kernel shared by every dilation branch.
    The key projection has no bias: it would shift all logits of a query
    row equally and cancel in the softmax.
    """

    w_q1: np.ndarray
    b_q1: np.ndarray
    w_qd: np.ndarray  # (d, 1, 3, 3)
    b_qd: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    sr: SrConfig
    heads: AttentionConfig
    dilations: tuple = field(default=DILATIONS)

    @classmethod
    def init(cls, dim: int, num_heads: int, sr_ratio: int, rng, dtype=np.float32, std: float = 0.02, dilations=DILATIONS):
        def w(*shape):
            return trunc_normal(rng, shape, std, dtype)

        def z(n):
            return np.zeros(n, dtype)

        return cls(
            w_q1=w(dim, dim),
            b_q1=z(dim),
            w_qd=w(dim, 1, 3, 3),
            b_qd=z(dim),
            w_k=w(dim, dim),
            w_v=w(dim, dim),
            b_v=z(dim),
            w_out=w(dim, dim),
            b_out=z(dim),
            sr=SrConfig.init(dim, sr_ratio, rng, dtype, std),
            heads=AttentionConfig(dim, num_heads),
            dilations=tuple(dilations),
        )

    @property
    def dim(self) -> int:
        return self.w_q1.shape[0]

    def query_param_count(self, biases: bool = False) -> int:
        n = self.w_q1.size + self.w_qd.size
        return n + (self.b_q1.size + self.b_qd.size if biases else 0)

    def dilated_spec(self, rate: int) -> ConvSpec:
        return ConvSpec.same(3, dilation=rate, groups=self.dim)


@dataclass(frozen=True)
class RasaConfig:
    """Recursion settings. The input/hidden combine weights are fixed at 1."""

    depth: int = 2
    w_f: float = 1.0
    u_f: float = 1.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"recursion depth must be >= 1, got {self.depth}")
        if self.w_f != 1.0 or self.u_f != 1.0:
            raise ValueError("combine weights are fixed at 1")


def _tokens(x):
    return np.ascontiguousarray(x.reshape(x.shape[0], -1).T)


def _map(t, H, W):
    return np.ascontiguousarray(t.T.reshape(-1, H, W))


def _check(x, params: AsaParams):
    x = T._check_map(x)
    if x.shape[0] != params.dim:
        raise ShapeError(f"input has {x.shape[0]} channels, ASA expects {params.dim}")
    return x


def asa_branches(x, params: AsaParams) -> list[np.ndarray]:
    """Pre-activation output of each dilation branch, in ``params.dilations`` order."""
    x = _check(x, params)
    d, H, W = x.shape
    qhat = _map(T.linear(_tokens(x), params.w_q1, params.b_q1), H, W)
    return [T.conv2d(qhat, params.w_qd, params.b_qd, params.dilated_spec(r)) for r in params.dilations]


def asa_query(x, params: AsaParams) -> np.ndarray:
    """Multi-scale query map ``sum_r SiLU(dwconv_r(W_q1 x))``, shape (d, H, W)."""
    branches = asa_branches(x, params)
    q = T.silu(branches[0])
    for z in branches[1:]:
        q = q + T.silu(z)
    return q


def _asa(x, params: AsaParams):
    x = _check(x, params)
    d, H, W = x.shape
    xt = _tokens(x)
    qhat_t = T.linear(xt, params.w_q1, params.b_q1)
    qhat = _map(qhat_t, H, W)
    zs = [T.conv2d(qhat, params.w_qd, params.b_qd, params.dilated_spec(r)) for r in params.dilations]
    q = T.silu(zs[0])
    for z in zs[1:]:
        q = q + T.silu(z)
    Qt = _tokens(q)
    S = spatial_reduction(x, params.sr)
    K = T.linear(S, params.w_k)
    V = T.linear(S, params.w_v, params.b_v)
    O, P = attention_forward(Qt, K, V, params.heads)
    Y = _map(T.linear(O, params.w_out, params.b_out), H, W)
    cache = dict(x=x, xt=xt, qhat=qhat, zs=zs, Qt=Qt, S=S, K=K, V=V, O=O, P=P)
    return Y, cache


def asa_forward(x, params: AsaParams) -> np.ndarray:
    return _asa(x, params)[0]


def _asa_backward_from_cache(c, params: AsaParams, dY):
    x = c["x"]
    d, H, W = x.shape
    dYt = _tokens(np.asarray(dY, dtype=x.dtype))
    dO, dw_out, db_out = T.linear_backward(c["O"], params.w_out, dYt)
    dQt, dK, dV = attention_backward(c["Qt"], c["K"], c["V"], c["P"], dO, params.heads)
    dS_k, dw_k, _ = T.linear_backward(c["S"], params.w_k, dK)
    dS_v, dw_v, db_v = T.linear_backward(c["S"], params.w_v, dV)
    dx, dsr = spatial_reduction_backward(x, params.sr, dS_k + dS_v)
    dq = _map(dQt, H, W)
    dqhat = np.zeros_like(c["qhat"])
    dw_qd = np.zeros_like(params.w_qd, dtype=x.dtype)
    db_qd = np.zeros_like(params.b_qd, dtype=x.dtype)
    for r, z in zip(params.dilations, c["zs"]):
        dz = dq * T.silu_grad(z)
        g_in, g_w, g_b = T.conv2d_backward(c["qhat"], params.w_qd, dz, params.dilated_spec(r))
        dqhat += g_in
        dw_qd += g_w
        db_qd += g_b
    dxt, dw_q1, db_q1 = T.linear_backward(c["xt"], params.w_q1, _tokens(dqhat))
    dx = dx + _map(dxt, H, W)
    grads = AsaParams(
        w_q1=dw_q1,
        b_q1=db_q1,
        w_qd=dw_qd,
        b_qd=db_qd,
        w_k=dw_k,
        w_v=dw_v,
        b_v=db_v,
        w_out=dw_out,
        b_out=db_out,
        sr=dsr,
        heads=params.heads,
        dilations=params.dilations,
    )
    return dx, grads


def asa_backward(x, params: AsaParams, upstream_grad):
    """Exact gradients of :func:`asa_forward`: ``(dx, AsaParams of grads)``."""
    _, c = _asa(x, params)
    return _asa_backward_from_cache(c, params, upstream_grad)


def rasa_forward(x, params: AsaParams, cfg: RasaConfig = RasaConfig()) -> np.ndarray:
    return _rasa(x, params, cfg)[0]


def _rasa(x, params, cfg):
    if cfg.depth < 1:
        raise ValueError("recursion depth must be >= 1")
    caches = []
    prev2, prev = None, x
    for _ in range(cfg.depth):
        step_in = prev if prev2 is None else prev + prev2
        out, c = _asa(step_in, params)
        caches.append(c)
        prev2, prev = prev, out
    return prev, caches


def rasa_backward(x, params: AsaParams, cfg: RasaConfig, upstream_grad):
    """Gradients through the fully unrolled recursion.

    Shared-parameter gradients are summed over recursion steps (and, for
    the dilated kernel, over the three rates inside each step).
    """
    _, caches = _rasa(x, params, cfg)
    n = cfg.depth
    # dX[t] is the gradient w.r.t. X_t; X_0 is the input
    dX = [None] * (n + 1)
    dX[n] = np.asarray(upstream_grad, dtype=caches[0]["x"].dtype)
    total = None
    for t in range(n, 0, -1):
        ds, g = _asa_backward_from_cache(caches[t - 1], params, dX[t])
        total = g if total is None else _add(total, g)
        dX[t - 1] = ds if dX[t - 1] is None else dX[t - 1] + ds
        if t >= 2:
            dX[t - 2] = ds if dX[t - 2] is None else dX[t - 2] + ds
    return dX[0], total


def _add(a: ParamGroup, b: ParamGroup) -> ParamGroup:
    other = b.named_arrays()
    return a.map_arrays(lambda name, arr: arr + other[name])
