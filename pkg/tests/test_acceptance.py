"""Acceptance criteria, one test each.

Every criterion prints a single ``PASS``/``FAIL`` line with its measured
value. Run standalone for just those lines::

    python tests/test_acceptance.py
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from lvt import _backend
from lvt.backbone import ModelConfig, build_model, count_params, estimate_flops, forward_features, load_model, save_weights
from lvt.csa import csa_forward
from lvt.rasa import AsaParams, RasaConfig, asa_branches, asa_forward, rasa_forward
from lvt.tensor import ConvSpec, conv2d, fold, softmax, unfold
from lvt.toolkit import oracles
from lvt.toolkit.suite import gradcheck_csa, gradcheck_rasa, random_asa_params, random_csa_params, tied_filter_params
from lvt.weights import BadMagicError, ChecksumError, WeightStore


def _rel(a, b) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def budget_params():
    t0 = time.perf_counter()
    n = count_params(build_model(ModelConfig.default())).encoder
    dt = time.perf_counter() - t0
    return 3.06e6 <= n <= 3.74e6 and dt < 5, f"encoder params {n:,} (band 3.06M-3.74M), {dt:.2f}s (< 5s)"


def budget_flops():
    rep = estimate_flops(ModelConfig.default(), (3, 224, 224))
    ok, dev = rep.reference_check()
    explained = ok or "note:" in rep.format()
    return ok and explained, f"{rep.encoder / 1e9:.3f} GMAC vs 0.9 G: {dev:+.1%} (tol +-25%, MAC = 1 FLOP)"


def shape_walk():
    model = build_model(ModelConfig.default())
    x = np.random.default_rng(0).standard_normal((3, 224, 224)).astype(np.float32)
    with _backend.limit_threads(1):
        t0 = time.perf_counter()
        shapes = [f.shape for f in forward_features(model, x)]
        dt = time.perf_counter() - t0
    want = [(64, 56, 56), (64, 28, 28), (160, 14, 14), (256, 7, 7)]
    return shapes == want and dt < 30, f"{shapes}, {dt:.2f}s single-threaded (< 30s)"


def csa_is_convolution():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = random_csa_params(rng, 8, 2, np.float32)
        p.w_out[...] = np.eye(8)
        p.b_out[...] = 0
        x = rng.normal(size=(8, 9, 10)).astype(np.float32)
        y = csa_forward(x, p, alpha_override=1.0)
        ref = oracles.oracle_conv2d(x, p.as_conv_kernel(), None, stride=2, padding=1, groups=2)
        worst = max(worst, _rel(y[:, ::2, ::2], ref))
    return worst <= 1e-5, f"max rel diff {worst:.2e} over 20 seeds (tol 1e-5)"


def csa_is_attention():
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        p = random_csa_params(rng, 8, 2, np.float32)
        tied, dense = tied_filter_params(p, rng)
        x = rng.normal(size=(8, 7, 7)).astype(np.float32)
        ref = oracles.oracle_outlook_attention(x, dense, p.w_qk, p.b_qk, p.w_out, p.b_out, 2)
        worst = max(worst, _rel(csa_forward(x, tied), ref))
    return worst <= 1e-5, f"max rel diff {worst:.2e} vs predicted-alpha attention (tol 1e-5)"


def rasa_base_case():
    rng = np.random.default_rng(7)
    p = random_asa_params(rng, 16, 2, 2, np.float32)
    x = rng.normal(size=(16, 8, 8)).astype(np.float32)
    with _backend.limit_threads(1):
        bitwise_diff = int(np.count_nonzero(rasa_forward(x, p, RasaConfig(1)) != asa_forward(x, p)))
        d2 = _rel(rasa_forward(x, p, RasaConfig(2)), asa_forward(asa_forward(x, p) + x, p))
    return bitwise_diff == 0 and d2 <= 1e-6, f"depth-1 differing elements {bitwise_diff}; depth-2 rel diff {d2:.2e} (tol 1e-6)"


def recursion_param_invariance():
    counts = [count_params(build_model(ModelConfig.default().with_depth(k))).total for k in (1, 2, 3, 4)]
    return len(set(counts)) == 1, f"params at depth 1-4: {counts}"


def asa_weight_sharing():
    rng = np.random.default_rng(3)
    p = AsaParams.init(64, 2, 4, rng, np.float64)
    n_q, n_qb = p.query_param_count(), p.query_param_count(biases=True)
    counts_ok = n_q == 64 * 64 + 9 * 64 and n_qb == n_q + 2 * 64
    x = rng.normal(size=(64, 16, 16))
    before = asa_branches(x, p)
    p.w_qd[:, 0, 0, 0] += 0.1
    changed = sum(int(not np.array_equal(a, b)) for a, b in zip(before, asa_branches(x, p)))
    return counts_ok and changed == 3, f"query params {n_q} (+{n_qb - n_q} bias) for d=64; branches changed {changed}/3"


def gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    csa = [max(gradcheck_csa(rng, *s).values()) for s in ((4, 1, 5, 5), (6, 2, 6, 7), (8, 2, 7, 7))]
    rasa = [max(gradcheck_rasa(rng, *s).values()) for s in ((4, 1, 2, 5, 5, 2), (6, 2, 1, 4, 5, 2), (8, 2, 2, 6, 6, 3))]
    dt = time.perf_counter() - t0
    worst = max(csa + rasa)
    return worst <= 1e-4 and dt < 300, f"max rel err CSA {max(csa):.2e}, RASA {max(rasa):.2e} (tol 1e-4), {dt:.1f}s"


def oracle_equivalence():
    worst = {"conv2d": 0.0, "csa": 0.0, "asa": 0.0}
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        g = int(rng.choice([1, 2]))
        spec = ConvSpec(int(rng.choice([1, 3])), int(rng.integers(1, 3)), int(rng.integers(0, 2)), int(rng.integers(1, 3)), g)
        x = rng.normal(size=(4, int(rng.integers(5, 10)), int(rng.integers(5, 10)))).astype(np.float32)
        w = rng.normal(size=(6, 4 // g, spec.kernel_size, spec.kernel_size)).astype(np.float32)
        b = rng.normal(size=6).astype(np.float32)
        ref = oracles.oracle_conv2d(x, w, b, spec.stride, spec.padding, spec.dilation, g)
        worst["conv2d"] = max(worst["conv2d"], _rel(conv2d(x, w, b, spec), ref))

        H, W = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        pc = random_csa_params(rng, 6, 2, np.float32)
        xc = rng.normal(size=(6, H, W)).astype(np.float32)
        worst["csa"] = max(worst["csa"], _rel(csa_forward(xc, pc), oracles.oracle_csa(xc, pc)))

        pa = random_asa_params(rng, 8, 2, int(rng.choice([1, 2, 3])), np.float32)
        xa = rng.normal(size=(8, H, W)).astype(np.float32)
        worst["asa"] = max(worst["asa"], _rel(asa_forward(xa, pa), oracles.oracle_asa(xa, pa)))
    ok = max(worst.values()) <= 1e-5
    return ok, "max rel diff over 50 instances each: " + ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + " (tol 1e-5)"


def kernel_properties():
    rng = np.random.default_rng(5)
    adj = 0.0
    for spec in (ConvSpec(3, 2, 1), ConvSpec(3, 1, 5, 5), ConvSpec(7, 4, 3)):
        x = rng.normal(size=(4, 15, 13))
        u = unfold(x, spec)
        y = rng.normal(size=u.shape)
        adj = max(adj, abs(np.sum(u * y) - np.sum(x * fold(y, 15, 13, spec))) / (np.linalg.norm(u) * np.linalg.norm(y)))
    sm = float(np.max(np.abs(softmax((rng.normal(size=(500, 9)) * 10).astype(np.float32)).sum(-1) - 1)))

    model = build_model(ModelConfig.default(), seed=1)
    img = rng.normal(size=(3, 96, 96)).astype(np.float32)
    with _backend.limit_threads(1):
        a = forward_features(model, img)
        b = forward_features(model, img)
    with _backend.limit_threads(4):
        c = forward_features(model, img)
    repeat = sum(int(np.count_nonzero(p != q)) for p, q in zip(a, b))
    threads = max(float(np.max(np.abs(p - q))) for p, q in zip(a, c))
    ok = adj <= 1e-5 and sm <= 1e-6 and repeat == 0 and threads <= 1e-6
    return ok, (f"adjointness {adj:.1e} (1e-5), softmax row sum {sm:.1e} (1e-6), "
                f"repeat-run differing elements {repeat}, threads 1 vs 4 max diff {threads:.1e} (1e-6)")


def serialization(tmp_dir=None):
    import tempfile
    from pathlib import Path

    cfg = ModelConfig.default()
    model = build_model(cfg, seed=2)
    x = np.random.default_rng(2).standard_normal((3, 64, 64)).astype(np.float32)
    with tempfile.TemporaryDirectory(dir=tmp_dir) as d:
        path = Path(d) / "m.lvtw"
        save_weights(model, path)
        loaded = load_model(cfg, path)
        with _backend.limit_threads(1):
            same = all(np.array_equal(p, q) for p, q in zip(forward_features(model, x), forward_features(loaded, x)))
        buf = path.read_bytes()
    bad_magic = b"XXXX" + buf[4:]
    bad_crc = bytearray(buf)
    bad_crc[-5] ^= 0x01
    errors = []
    for blob in (bad_magic, bytes(bad_crc)):
        try:
            WeightStore.from_bytes(blob)
            errors.append(None)
        except (BadMagicError, ChecksumError) as exc:
            errors.append(type(exc))
    ok = same and errors == [BadMagicError, ChecksumError]
    names = [e.__name__ if e else "accepted" for e in errors]
    return ok, f"roundtrip bitwise {same}; corrupted magic -> {names[0]}, corrupted data -> {names[1]}"


CRITERIA = [
    (1, "parameter budget", budget_params),
    (2, "FLOPs budget", budget_flops),
    (3, "shape walk", shape_walk),
    (4, "CSA reduces to convolution", csa_is_convolution),
    (5, "CSA reduces to self-attention", csa_is_attention),
    (6, "RASA base case", rasa_base_case),
    (7, "recursion parameter invariance", recursion_param_invariance),
    (8, "ASA weight sharing", asa_weight_sharing),
    (9, "gradient checks", gradient_checks),
    (10, "oracle equivalence", oracle_equivalence),
    (11, "kernel-layer properties", kernel_properties),
    (12, "serialization", serialization),
]


def _line(num, title, ok, detail):
    return f"[{'PASS' if ok else 'FAIL'}] {num:>2}. {title}: {detail}"


@pytest.mark.parametrize("num,title,fn", CRITERIA, ids=[f"c{n:02d}" for n, _, _ in CRITERIA])
def test_criterion(num, title, fn, capsys):
    ok, detail = fn()
    with capsys.disabled():
        print("\n" + _line(num, title, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for num, title, fn in CRITERIA:
        ok, detail = fn()
        failed += not ok
        print(_line(num, title, ok, detail), flush=True)
    raise SystemExit(1 if failed else 0)
