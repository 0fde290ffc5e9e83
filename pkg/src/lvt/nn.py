"""Transformer building blocks shared by the CSA and RASA stages.

Multi-head scaled dot-product attention, spatial reduction of keys/values,
the depthwise-conv feed-forward network and overlapped patch embedding.
Parameters live in small dataclasses (:class:`ParamGroup` subclasses) whose
array fields are the trainable tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, ShapeError

LN_EPS = 1e-6


class ParamGroup:
    """Mixin for parameter dataclasses.

    ``ndarray`` fields are parameters; nested groups flatten into dotted
    names; every other field (ints, configs) is static structure.
    """

    def named_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                out[prefix + f.name] = value
            elif isinstance(value, ParamGroup):
                out.update(value.named_arrays(f"{prefix}{f.name}."))
        return out

    def num_params(self) -> int:
        return sum(a.size for a in self.named_arrays().values())

    def map_arrays(self, fn, prefix: str = ""):
        """Copy of this group with every array replaced by ``fn(name, array)``."""
        changes = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                changes[f.name] = fn(prefix + f.name, value)
            elif isinstance(value, ParamGroup):
                changes[f.name] = value.map_arrays(fn, f"{prefix}{f.name}.")
        return replace(self, **changes)

    def zeros_like(self):
        return self.map_arrays(lambda _, a: np.zeros_like(a))

    def astype(self, dtype):
        return self.map_arrays(lambda _, a: a.astype(dtype))


# --------------------------------------------------------------------------
# attention


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int
    num_heads: int

    def __post_init__(self):
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ValueError(f"num_heads={self.num_heads} must divide embed_dim={self.embed_dim}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def logit_scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)


def _split_heads(t: np.ndarray, h: int) -> np.ndarray:
    n, d = t.shape
    return np.ascontiguousarray(t.reshape(n, h, d // h).transpose(1, 0, 2))


def _merge_heads(t: np.ndarray) -> np.ndarray:
    h, n, dh = t.shape
    return np.ascontiguousarray(t.transpose(1, 0, 2).reshape(n, h * dh))


def attention_weights(Q, K, cfg: AttentionConfig) -> np.ndarray:
    """Per-head attention matrices, shape (heads, N, M)."""
    Qh = _split_heads(Q, cfg.num_heads)
    Kh = _split_heads(K, cfg.num_heads)
    logits = T.batched_matmul(Qh, np.ascontiguousarray(Kh.transpose(0, 2, 1))) * cfg.logit_scale
    return T.softmax(logits, axis=-1)


def _check_qkv(Q, K, V, cfg):
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("Q, K, V must be token matrices")
    d = cfg.embed_dim
    if Q.shape[1] != d or K.shape[1] != d or V.shape[1] != d or K.shape[0] != V.shape[0]:
        raise ShapeError(f"attention shapes Q{Q.shape} K{K.shape} V{V.shape} vs embed_dim {d}")


def scaled_dot_attention(Q, K, V, cfg: AttentionConfig) -> np.ndarray:
    out, _ = attention_forward(Q, K, V, cfg)
    return out


def attention_forward(Q, K, V, cfg: AttentionConfig):
    """Attention output plus the weight tensor needed by the backward pass."""
    Q, K, V = T._float(Q), T._float(K), T._float(V)
    _check_qkv(Q, K, V, cfg)
    P = attention_weights(Q, K, cfg)
    out = T.batched_matmul(P, _split_heads(V, cfg.num_heads))
    return _merge_heads(out), P


def attention_backward(Q, K, V, P, dout, cfg: AttentionConfig):
    h = cfg.num_heads
    Qh, Kh, Vh = _split_heads(Q, h), _split_heads(K, h), _split_heads(V, h)
    dO = _split_heads(dout, h)
    dP = dO @ Vh.transpose(0, 2, 1)
    dV = P.transpose(0, 2, 1) @ dO
    dS = T.softmax_backward(P, dP) * cfg.logit_scale
    dQ = dS @ Kh
    dK = dS.transpose(0, 2, 1) @ Qh
    return _merge_heads(dQ), _merge_heads(dK), _merge_heads(dV)


# --------------------------------------------------------------------------
# spatial reduction


@dataclass
class SrConfig(ParamGroup):
    """Key/value spatial reduction: strided R x R conv then layer norm.

    ``ratio == 1`` bypasses the reduction and carries no parameters.
    """

    ratio: int
    w: np.ndarray | None = None
    b: np.ndarray | None = None
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None

    def __post_init__(self):
        if self.ratio < 1:
            raise ValueError(f"reduction ratio must be >= 1, got {self.ratio}")
        if self.ratio > 1 and self.w is None:
            raise ValueError("reduction ratio > 1 needs conv and norm parameters")

    @classmethod
    def init(cls, dim: int, ratio: int, rng, dtype=np.float32, std: float = 0.02) -> "SrConfig":
        if ratio == 1:
            return cls(1)
        return cls(
            ratio,
            w=trunc_normal(rng, (dim, dim, ratio, ratio), std, dtype),
            b=np.zeros(dim, dtype),
            gamma=np.ones(dim, dtype),
            beta=np.zeros(dim, dtype),
        )

    @property
    def spec(self) -> ConvSpec:
        return ConvSpec(self.ratio, stride=self.ratio)


def _pad_to_multiple(x: np.ndarray, m: int) -> np.ndarray:
    C, H, W = x.shape
    ph, pw = -H % m, -W % m
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, ph), (0, pw)))


def spatial_reduction(x, cfg: SrConfig) -> np.ndarray:
    """Token matrix of the reduced grid, shape (ceil(H/R) * ceil(W/R), d)."""
    x = T._check_map(x)
    d = x.shape[0]
    if cfg.ratio == 1:
        return np.ascontiguousarray(x.reshape(d, -1).T)
    if cfg.w.shape[:2] != (d, d):
        raise ShapeError(f"reduction weight {cfg.w.shape} does not match {d} channels")
    s = T.conv2d(_pad_to_multiple(x, cfg.ratio), cfg.w, cfg.b, cfg.spec)
    return T.layer_norm(s.reshape(d, -1).T, cfg.gamma, cfg.beta, LN_EPS)


def spatial_reduction_backward(x, cfg: SrConfig, dtok):
    """Gradients of :func:`spatial_reduction`: (dx, SrConfig of grads)."""
    d, H, W = x.shape
    if cfg.ratio == 1:
        return np.ascontiguousarray(dtok.T.reshape(d, H, W)), SrConfig(1)
    xp = _pad_to_multiple(x, cfg.ratio)
    s = T.conv2d(xp, cfg.w, cfg.b, cfg.spec)
    tok = s.reshape(d, -1).T
    dtok_in, dgamma, dbeta = T.layer_norm_backward(tok, cfg.gamma, dtok, LN_EPS)
    ds = np.ascontiguousarray(dtok_in.T.reshape(s.shape))
    dxp, dw, db = T.conv2d_backward(xp, cfg.w, ds, cfg.spec)
    grads = SrConfig(cfg.ratio, w=dw, b=db, gamma=dgamma, beta=dbeta)
    return np.ascontiguousarray(dxp[:, :H, :W]), grads


# --------------------------------------------------------------------------
# feed-forward


@dataclass
class NormParams(ParamGroup):
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def init(cls, dim: int, dtype=np.float32) -> "NormParams":
        return cls(np.ones(dim, dtype), np.zeros(dim, dtype))


@dataclass
class FfnParams(ParamGroup):
    w1: np.ndarray  # (hidden, d)
    b1: np.ndarray
    w_dw: np.ndarray  # (hidden, 1, 3, 3)
    b_dw: np.ndarray
    w2: np.ndarray  # (d, hidden)
    b2: np.ndarray

    @classmethod
    def init(cls, dim: int, ratio: int, rng, dtype=np.float32, std: float = 0.02) -> "FfnParams":
        hidden = dim * ratio
        return cls(
            trunc_normal(rng, (hidden, dim), std, dtype),
            np.zeros(hidden, dtype),
            trunc_normal(rng, (hidden, 1, 3, 3), std, dtype),
            np.zeros(hidden, dtype),
            trunc_normal(rng, (dim, hidden), std, dtype),
            np.zeros(dim, dtype),
        )

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]


def _tokens(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(x.shape[0], -1).T)


def _map(t: np.ndarray, H: int, W: int) -> np.ndarray:
    return np.ascontiguousarray(t.T.reshape(-1, H, W))


def mix_ffn(x, ratio: int, params: FfnParams) -> np.ndarray:
    """1x1 expand, depthwise 3x3, SiLU, 1x1 project. Residual is the caller's."""
    if ratio < 1:
        raise ValueError("mlp ratio must be >= 1")
    x = T._check_map(x)
    d, H, W = x.shape
    if params.hidden != ratio * d:
        raise ShapeError(f"ffn hidden width {params.hidden} != {ratio} * {d}")
    h = _map(T.linear(_tokens(x), params.w1, params.b1), H, W)
    h = T.conv2d(h, params.w_dw, params.b_dw, ConvSpec(3, 1, 1, 1, params.hidden))
    h = T.silu(h)
    return _map(T.linear(_tokens(h), params.w2, params.b2), H, W)


# --------------------------------------------------------------------------
# patch embedding


@dataclass
class PatchEmbedParams(ParamGroup):
    w: np.ndarray  # (d_out, c_in, k, k)
    b: np.ndarray
    norm: NormParams

    @classmethod
    def init(cls, c_in: int, d_out: int, stage: int, rng, dtype=np.float32, std: float = 0.02):
        k = patch_embed_spec(stage).kernel_size
        return cls(trunc_normal(rng, (d_out, c_in, k, k), std, dtype), np.zeros(d_out, dtype), NormParams.init(d_out, dtype))


def patch_embed_spec(stage: int) -> ConvSpec:
    if stage == 1:
        return ConvSpec(7, stride=4, padding=3)
    if stage in (2, 3, 4):
        return ConvSpec(3, stride=2, padding=1)
    raise ValueError(f"stage must be in 1..4, got {stage}")


def overlapped_patch_embed(x, stage: int, params: PatchEmbedParams) -> np.ndarray:
    spec = patch_embed_spec(stage)
    x = T._check_map(x)
    if min(x.shape[1:]) < spec.stride:
        raise ShapeError(f"input {x.shape[1:]} smaller than stage-{stage} stride {spec.stride}")
    y = T.conv2d(x, params.w, params.b, spec)
    return T.channel_norm(y, params.norm.gamma, params.norm.beta, LN_EPS)


# --------------------------------------------------------------------------
# init


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)
