"""Invariant suite: every structural and numerical property as a named check.

Each check is a function ``(rng, dtype) -> measured`` registered with a
scope and a tolerance; it passes when ``measured <= tolerance``. Counting
checks return the number of violations with tolerance 0.
"""

from __future__ import annotations

import ast
import inspect
import time
from dataclasses import dataclass, field

import numpy as np

from lvt import _backend
from lvt import tensor as T
from lvt.backbone import ModelConfig, StageSpec, build_model, count_params, forward_features
from lvt.csa import CsaParams, csa_alpha, csa_backward, csa_forward, window_grid
from lvt.nn import (
    AttentionConfig,
    SrConfig,
    attention_weights,
    overlapped_patch_embed,
    scaled_dot_attention,
    spatial_reduction,
)
from lvt.rasa import AsaParams, RasaConfig, asa_branches, asa_forward, rasa_backward, rasa_forward
from lvt.tensor import ConvSpec
from lvt.toolkit import oracles
from lvt.toolkit.gradcheck import check_gradients

SCOPES = ("tensor", "nn", "csa", "rasa", "backbone")

# (1-based stage, dim, heads, sr ratio) for the RASA stages of the default model
RASA_STAGES = ((2, 64, 2, 4), (3, 160, 5, 2), (4, 256, 8, 1))


@dataclass
class CheckResult:
    name: str
    scope: str
    passed: bool
    measured: float
    tolerance: float
    elapsed: float
    error: str = ""


@dataclass
class CheckReport:
    results: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list:
        return [r for r in self.results if not r.passed]

    def names(self) -> list:
        return [r.name for r in self.results]

    def format(self) -> str:
        lines = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            extra = f"  [{r.error}]" if r.error else ""
            lines.append(f"{status}  {r.scope:<9} {r.name:<40} measured={r.measured:.3e} tol={r.tolerance:.1e} ({r.elapsed:.2f}s){extra}")
        n_fail = len(self.failures)
        lines.append(f"{len(self.results) - n_fail}/{len(self.results)} checks passed")
        return "\n".join(lines)


_REGISTRY: list = []


def check(scope: str, tolerance: float):
    def deco(fn):
        _REGISTRY.append((scope, fn.__name__, tolerance, fn))
        return fn

    return deco


def registered(scope: str = "all") -> list:
    return [(s, n, t, f) for s, n, t, f in _REGISTRY if scope == "all" or s == scope]


def run_invariant_suite(scope: str = "all", seed: int = 0, f64: bool = False) -> CheckReport:
    if scope != "all" and scope not in SCOPES:
        raise ValueError(f"scope must be 'all' or one of {SCOPES}")
    dtype = np.float64 if f64 else np.float32
    report = CheckReport()
    for i, (sc, name, tol, fn) in enumerate(registered(scope)):
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        try:
            measured = float(fn(rng, dtype))
            passed = bool(measured <= tol)
            err = ""
        except Exception as exc:  # a crashing check is a failed check
            measured, passed, err = float("inf"), False, f"{type(exc).__name__}: {exc}"
        report.results.append(CheckResult(name, sc, passed, measured, tol, time.perf_counter() - t0, err))
    return report


# --------------------------------------------------------------------------
# random problems


def random_csa_params(rng, dim=8, heads=2, dtype=np.float64, std=0.4) -> CsaParams:
    p = CsaParams.init(dim, heads, rng, dtype, std=std)
    p.b_qk[...] = rng.normal(0, std, p.b_qk.shape)
    p.b_out[...] = rng.normal(0, std, p.b_out.shape)
    return p


def random_asa_params(rng, dim=8, heads=2, sr=2, dtype=np.float64, std=0.4, dilations=(1, 3, 5)) -> AsaParams:
    p = AsaParams.init(dim, heads, sr, rng, dtype, std=std, dilations=dilations)

    def perturb(name, a):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            return (1 + rng.normal(0, 0.3, a.shape)).astype(dtype)
        if leaf.startswith("b"):  # biases and LayerNorm betas
            return rng.normal(0, std, a.shape).astype(dtype)
        return a

    return p.map_arrays(perturb)


def gradcheck_csa(rng, dim, heads, H, W, eps=1e-5) -> dict:
    p = random_csa_params(rng, dim, heads, np.float64)
    x = rng.normal(size=(dim, H, W))
    R = rng.normal(size=(dim, H, W))
    dx, g = csa_backward(x, p, R)
    return check_gradients(lambda: float((csa_forward(x, p) * R).sum()), x, p, dx, g, eps)


def gradcheck_rasa(rng, dim, heads, sr, H, W, depth=2, eps=1e-5) -> dict:
    p = random_asa_params(rng, dim, heads, sr, np.float64)
    cfg = RasaConfig(depth)
    x = rng.normal(size=(dim, H, W))
    R = rng.normal(size=(dim, H, W))
    dx, g = rasa_backward(x, p, cfg, R)
    return check_gradients(lambda: float((rasa_forward(x, p, cfg) * R).sum()), x, p, dx, g, eps)


def _max_rel(a, b) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def tied_filter_params(p: CsaParams, rng) -> tuple:
    """Copy of ``p`` with every tap matrix tied to one per-head value matrix,
    plus that matrix as a dense block-diagonal (d, d) array."""
    h, kk, dh, _ = p.w_filter.shape
    wv = rng.normal(0, 0.4, (h, dh, dh)).astype(p.w_filter.dtype)
    tied = p.map_arrays(lambda n, a: np.ascontiguousarray(np.broadcast_to(wv[:, None], a.shape)) if n == "w_filter" else a)
    dense = np.zeros((h * dh, h * dh), dtype=p.w_filter.dtype)
    for i in range(h):
        dense[i * dh:(i + 1) * dh, i * dh:(i + 1) * dh] = wv[i]
    return tied, dense


# --------------------------------------------------------------------------
# tensor core

_ADJOINT_SPECS = (ConvSpec(3, 2, 1), ConvSpec(3, 1, 3, 3), ConvSpec(7, 4, 3), ConvSpec(1), ConvSpec(3, 1, 1))


@check("tensor", 1e-5)
def unfold_fold_adjoint(rng, dtype):
    worst = 0.0
    for spec in _ADJOINT_SPECS:
        x = rng.normal(size=(3, 9, 11))
        u = T.unfold(x, spec)
        y = rng.normal(size=u.shape)
        lhs = float(np.sum(u * y))
        rhs = float(np.sum(x * T.fold(y, 9, 11, spec)))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(u) * np.linalg.norm(y)))
    return worst


@check("tensor", 1e-6)
def fold_unfold_count_map(rng, dtype):
    spec = ConvSpec(3, 2, 1)
    x = rng.normal(size=(2, 8, 7)).astype(dtype)
    counts = T.fold(T.unfold(np.ones_like(x), spec), 8, 7, spec)
    return float(np.max(np.abs(T.fold(T.unfold(x, spec), 8, 7, spec) - x * counts)))


@check("tensor", 1e-6)
def softmax_rows_sum_to_one(rng, dtype):
    t = (rng.normal(size=(64, 9)) * 5).astype(dtype)
    return float(np.max(np.abs(T.softmax(t, -1).sum(-1) - 1)))


@check("tensor", 1e-6)
def softmax_shift_invariance(rng, dtype):
    t = rng.normal(size=(32, 9)).astype(dtype)
    c = rng.normal(size=(32, 1)).astype(dtype) * 3
    return float(np.max(np.abs(T.softmax(t + c) - T.softmax(t))))


@check("tensor", 1e-5)
def conv2d_linearity(rng, dtype):
    worst = 0.0
    for spec, cin, cout in ((ConvSpec(3, 1, 1), 4, 6), (ConvSpec.same(3, 3, 4), 4, 4), (ConvSpec(3, 2, 1, 1, 2), 4, 6)):
        w = rng.normal(size=(cout, cin // spec.groups, 3, 3)).astype(dtype)
        x1, x2 = (rng.normal(size=(cin, 8, 8)).astype(dtype) for _ in range(2))
        a, b = 0.7, -1.3
        lhs = T.conv2d(a * x1 + b * x2, w, None, spec)
        rhs = a * T.conv2d(x1, w, None, spec) + b * T.conv2d(x2, w, None, spec)
        worst = max(worst, _max_rel(lhs, rhs))
    return worst


@check("tensor", 0)
def conv2d_depthwise_identity(rng, dtype):
    x = rng.normal(size=(5, 6, 7)).astype(dtype)
    w = np.ones((5, 1, 1, 1), dtype)
    return float(np.max(np.abs(T.conv2d(x, w, None, ConvSpec(1, groups=5)) - x)))


@check("tensor", 0)
def ops_bitwise_repeatable(rng, dtype):
    x = rng.normal(size=(6, 10, 10)).astype(dtype)
    w = rng.normal(size=(6, 1, 3, 3)).astype(dtype)
    spec = ConvSpec(3, 2, 1)
    mismatches = 0
    with _backend.limit_threads(1):
        for fn in (
            lambda: T.conv2d(x, w, None, ConvSpec.same(3, 5, 6)),
            lambda: T.unfold(x, spec),
            lambda: T.fold(T.unfold(x, spec), 10, 10, spec),
            lambda: T.softmax(x, 0),
            lambda: T.layer_norm(x, np.ones(10, dtype), np.zeros(10, dtype)),
        ):
            mismatches += int(np.count_nonzero(fn() != fn()))
    return mismatches


@check("tensor", 1e-5)
def numba_numpy_backends_agree(rng, dtype):
    if not _backend.HAVE_NUMBA:
        return 0.0
    x = rng.normal(size=(6, 11, 9)).astype(dtype)
    w = rng.normal(size=(6, 1, 3, 3)).astype(dtype)
    spec = ConvSpec(3, 2, 1)

    def run():
        u = T.unfold(x, spec)
        return [u, T.fold(u, 11, 9, spec), T.conv2d(x, w, None, ConvSpec.same(3, 3, 6)), *T.conv2d_backward(x, w, x, ConvSpec.same(3, 3, 6))]

    with _backend.use_backend("numba"):
        a = run()
    with _backend.use_backend("numpy"):
        b = run()
    return max(_max_rel(p, q) for p, q in zip(a, b))


@check("tensor", 0)
def oracles_share_no_fast_path_code(rng, dtype):
    tree = ast.parse(inspect.getsource(oracles))
    violations = 0
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom) and node.module and node.module.startswith("lvt"):
            if node.module != "lvt.tensor" or [a.name for a in node.names] != ["softmax"]:
                violations += 1
        elif isinstance(node, ast.Import) and any(a.name.startswith("lvt") for a in node.names):
            violations += 1
    return violations


# --------------------------------------------------------------------------
# shared blocks


@check("nn", 1e-6)
def attention_rows_sum_to_one(rng, dtype):
    cfg = AttentionConfig(16, 4)
    P = attention_weights(rng.normal(size=(20, 16)).astype(dtype), rng.normal(size=(7, 16)).astype(dtype), cfg)
    return float(np.max(np.abs(P.sum(-1) - 1)))


@check("nn", 1e-6)
def attention_kv_permutation_invariance(rng, dtype):
    cfg = AttentionConfig(16, 4)
    Q, K, V = (rng.normal(size=(n, 16)).astype(dtype) for n in (12, 9, 9))
    perm = rng.permutation(9)
    a = scaled_dot_attention(Q, K, V, cfg)
    b = scaled_dot_attention(Q, K[perm], V[perm], cfg)
    return _max_rel(a, b)


@check("nn", 0)
def spatial_reduction_preserves_channels(rng, dtype):
    bad = 0
    for R in (1, 2, 4):
        sr = SrConfig.init(12, R, rng, dtype)
        tok = spatial_reduction(rng.normal(size=(12, 8, 8)).astype(dtype), sr)
        bad += int(tok.shape != ((8 // R) ** 2, 12))
    return bad


@check("nn", 0)
def patch_embed_strides(rng, dtype):
    from lvt.nn import PatchEmbedParams

    x = rng.normal(size=(3, 64, 96)).astype(dtype)
    bad, c = 0, 3
    for stage, (d, stride) in enumerate(zip((8, 8, 16, 16), (4, 8, 16, 32)), start=1):
        x = overlapped_patch_embed(x, stage, PatchEmbedParams.init(c, d, stage, rng, dtype))
        bad += int(x.shape != (d, 64 // stride, 96 // stride))
        c = d
    return bad


# --------------------------------------------------------------------------
# CSA


@check("csa", 1e-5)
def csa_reduces_to_convolution(rng, dtype):
    worst = 0.0
    for _ in range(5):
        p = random_csa_params(rng, 8, 2, dtype)
        p.w_out[...] = np.eye(8, dtype=dtype)
        p.b_out[...] = 0
        x = rng.normal(size=(8, 9, 10)).astype(dtype)
        y = csa_forward(x, p, alpha_override=1.0)
        conv = T.conv2d(x, p.as_conv_kernel(), None, ConvSpec(3, 2, 1, groups=2))
        worst = max(worst, _max_rel(y[:, ::2, ::2], conv))
    return worst


@check("csa", 1e-5)
def csa_reduces_to_windowed_attention(rng, dtype):
    p = random_csa_params(rng, 8, 2, dtype)
    tied, dense = tied_filter_params(p, rng)
    x = rng.normal(size=(8, 7, 7)).astype(dtype)
    ref = oracles.oracle_outlook_attention(x, dense, p.w_qk, p.b_qk, p.w_out, p.b_out, 2)
    return _max_rel(csa_forward(x, tied), ref)


@check("csa", 1e-6)
def csa_alpha_rows_in_simplex(rng, dtype):
    p = random_csa_params(rng, 8, 2, dtype)
    a = csa_alpha(rng.normal(size=(30, 8)).astype(dtype), p)
    if a.min() <= 0 or a.max() >= 1:
        return float("inf")
    return float(np.max(np.abs(a.sum(-1) - 1)))


@check("csa", 0)
def csa_window_geometry(rng, dtype):
    p = CsaParams.init(8, 2, rng, dtype)
    bad = int(window_grid(56, 56, p) != (28, 28))
    y = csa_forward(rng.normal(size=(8, 56, 56)).astype(dtype), p)
    return bad + int(y.shape != (8, 56, 56))


@check("csa", 0)
def csa_locality(rng, dtype):
    p = random_csa_params(rng, 4, 2, dtype)
    x = rng.normal(size=(4, 12, 12)).astype(dtype)
    with _backend.limit_threads(1):
        y0 = csa_forward(x, p)
        x2 = x.copy()
        # output pixel (2, 2) sees windows (0..1, 0..1) whose taps span rows/cols 0..3
        x2[:, 6:, :] += 1.0
        x2[:, :, 6:] += 1.0
        y1 = csa_forward(x2, p)
    return int(np.count_nonzero(y0[:, :3, :3] != y1[:, :3, :3]))


@check("csa", 1e-4)
def csa_gradients_match_finite_differences(rng, dtype):
    return max(max(gradcheck_csa(rng, d, h, H, W).values()) for d, h, H, W in ((4, 1, 5, 5), (6, 2, 6, 7), (8, 2, 7, 7)))


@check("csa", 1e-5)
def csa_matches_loop_oracle(rng, dtype):
    worst = 0.0
    for _ in range(5):
        p = random_csa_params(rng, 6, 2, dtype)
        x = rng.normal(size=(6, 7, 6)).astype(dtype)
        worst = max(worst, _max_rel(csa_forward(x, p), oracles.oracle_csa(x, p)))
    return worst


# --------------------------------------------------------------------------
# RASA


@check("rasa", 0)
def asa_shared_kernel_drives_all_branches(rng, dtype):
    p = random_asa_params(rng, 8, 2, 2, dtype)
    x = rng.normal(size=(8, 12, 12)).astype(dtype)
    before = asa_branches(x, p)
    p.w_qd[:, 0, 0, 0] += 0.5  # a corner tap: every rate reads it at interior pixels
    after = asa_branches(x, p)
    return sum(int(np.array_equal(a, b)) for a, b in zip(before, after)) + int(len(before) != 3)


@check("rasa", 0)
def asa_query_param_count(rng, dtype):
    bad = 0
    for d in (8, 64):
        p = AsaParams.init(d, 2, 1, rng, dtype)
        bad += int(p.query_param_count() != d * d + 9 * d)
        bad += int(p.query_param_count(biases=True) != d * d + 9 * d + 2 * d)
        bad += int(AsaParams.init(d, 2, 1, rng, dtype, dilations=(1, 2)).num_params() != p.num_params())
    return bad


@check("rasa", 0)
def rasa_params_independent_of_depth(rng, dtype):
    counts = {count_params(build_model(_small_cfg(depth=k), seed=0)).encoder for k in (1, 2, 3, 4)}
    return len(counts) - 1


@check("rasa", 0)
def rasa_depth1_equals_asa(rng, dtype):
    p = random_asa_params(rng, 8, 2, 2, dtype)
    x = rng.normal(size=(8, 6, 6)).astype(dtype)
    with _backend.limit_threads(1):
        return int(np.count_nonzero(rasa_forward(x, p, RasaConfig(1)) != asa_forward(x, p)))


@check("rasa", 1e-6)
def rasa_depth2_expansion(rng, dtype):
    p = random_asa_params(rng, 8, 2, 2, dtype)
    x = rng.normal(size=(8, 6, 6)).astype(dtype)
    return _max_rel(rasa_forward(x, p, RasaConfig(2)), asa_forward(asa_forward(x, p) + x, p))


@check("rasa", 0)
def rasa_output_finite(rng, dtype):
    p = random_asa_params(rng, 8, 2, 2, dtype, std=1.0)
    bad = 0
    for scale in (1.0, 10.0, 100.0):
        bad += int(not np.isfinite(rasa_forward(rng.normal(size=(8, 6, 6)).astype(dtype) * scale, p, RasaConfig(3))).all())
    return bad


@check("rasa", 0)
def asa_preserves_shape_for_every_stage(rng, dtype):
    bad = 0
    for stage, d, heads, sr in RASA_STAGES:
        side = 224 // (4 * 2 ** (stage - 1))
        p = AsaParams.init(d, heads, sr, rng, dtype)
        x = rng.normal(size=(d, side, side)).astype(dtype)
        bad += int(asa_forward(x, p).shape != x.shape)
    return bad


@check("rasa", 1e-4)
def rasa_gradients_match_finite_differences(rng, dtype):
    shapes = ((4, 1, 2, 5, 5, 2), (6, 2, 1, 4, 5, 2), (8, 2, 2, 6, 6, 3))
    return max(max(gradcheck_rasa(rng, d, h, sr, H, W, depth).values()) for d, h, sr, H, W, depth in shapes)


@check("rasa", 1e-5)
def asa_matches_loop_oracle(rng, dtype):
    worst = 0.0
    for sr in (1, 2, 2):
        p = random_asa_params(rng, 8, 2, sr, dtype)
        x = rng.normal(size=(8, 5, 6)).astype(dtype)
        worst = max(worst, _max_rel(asa_forward(x, p), oracles.oracle_asa(x, p)))
    return worst


# --------------------------------------------------------------------------
# backbone


def _small_cfg(depth=2, dilations=(1, 3, 5)) -> ModelConfig:
    return ModelConfig(
        stages=(
            StageSpec("CSA", 1, 8, 2, 2),
            StageSpec("RASA", 1, 8, 2, 2, sr_ratio=2, dilations=dilations),
            StageSpec("RASA", 1, 16, 2, 2, sr_ratio=2, dilations=dilations),
            StageSpec("RASA", 1, 16, 4, 2, sr_ratio=1, dilations=dilations),
        ),
        num_classes=10,
        recursion_depth=depth,
        image_size=64,
    )


@check("backbone", 0)
def stage_strides(rng, dtype):
    m = build_model(_small_cfg(), seed=0, dtype=dtype)
    bad = 0
    for H, W in ((64, 64), (96, 64)):
        feats = forward_features(m, rng.normal(size=(3, H, W)))
        bad += sum(int(f.shape[1:] != (H // s, W // s)) for f, s in zip(feats, (4, 8, 16, 32)))
    return bad


@check("backbone", 0)
def encoder_params_invariant_to_depth_and_rates(rng, dtype):
    bad = 0
    for base in (_small_cfg(), ModelConfig.default()):
        ref = count_params(build_model(base)).encoder
        variants = [base.with_depth(k) for k in (1, 3, 4)]
        variants += [base.with_dilations(r) for r in ((1, 2), (2, 4, 6, 8))]
        bad += sum(int(count_params(build_model(v)).encoder != ref) for v in variants)
    return bad


@check("backbone", 0)
def forward_bitwise_repeatable(rng, dtype):
    m = build_model(_small_cfg(), seed=3, dtype=dtype)
    x = rng.normal(size=(3, 64, 64))
    with _backend.limit_threads(1):
        a = forward_features(m, x)
        b = forward_features(m, x)
    return sum(int(np.count_nonzero(p != q)) for p, q in zip(a, b))


@check("backbone", 1e-6)
def forward_agrees_across_thread_counts(rng, dtype):
    m = build_model(_small_cfg(), seed=3, dtype=dtype)
    x = rng.normal(size=(3, 64, 64))
    with _backend.limit_threads(1):
        a = forward_features(m, x)
    with _backend.limit_threads(4):
        b = forward_features(m, x)
    return max(_max_rel(p, q) for p, q in zip(a, b))


@check("backbone", 0)
def parameters_reachable_by_unique_names(rng, dtype):
    m = build_model(ModelConfig.default())
    named = m.named_parameters()
    ids = [id(a) for a in named.values()]
    store = m.weight_store()
    bad = len(ids) - len(set(ids))
    bad += int(store.total_params != sum(a.size for a in named.values()))
    bad += int(len(store) != len(named))
    return bad


@check("backbone", 0)
def encoder_param_budget(rng, dtype):
    n = count_params(build_model(ModelConfig.default())).encoder
    return int(not 3.06e6 <= n <= 3.74e6)
