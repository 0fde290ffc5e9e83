"""Compare the numba kernels against the pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--threads 1]

Also times a full forward_features pass at 224x224 under each backend.
"""

from __future__ import annotations

import argparse
import time
from contextlib import nullcontext

import numpy as np

from lvt import _backend, build_model, kernels
from lvt.tensor import ConvSpec
from lvt.toolkit.bench import run_bench


def _time(fn, repeat):
    fn()  # compile / warm caches
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def cases(rng):
    # shapes taken from the default model at 224x224
    x64 = rng.standard_normal((64, 56, 56)).astype(np.float32)
    x256 = rng.standard_normal((256, 28, 28)).astype(np.float32)
    w256 = rng.standard_normal((256, 1, 3, 3)).astype(np.float32)
    w64 = rng.standard_normal((64, 1, 3, 3)).astype(np.float32)
    win = ConvSpec(3, 2, 1)
    oh, ow = win.out_shape(56, 56)
    cols = kernels.unfold_np(x64, 3, 2, 1, 1, oh, ow)
    return {
        "unfold 64x56x56 k3 s2": (kernels.unfold_nb, kernels.unfold_np, (x64, 3, 2, 1, 1, oh, ow)),
        "fold 64x56x56 k3 s2": (kernels.fold_nb, kernels.fold_np, (cols, 56, 56, 3, 2, 1, 1, oh, ow)),
        "dwconv 256x28x28 k3": (kernels.dwconv_nb, kernels.dwconv_np, (x256, w256, 3, 1, 1, 1, 28, 28)),
        "dwconv 64x56x56 k3 r5": (kernels.dwconv_nb, kernels.dwconv_np, (x64, w64, 3, 1, 5, 5, 56, 56)),
        "dwconv dx 256x28x28": (kernels.dwconv_grad_input_nb, kernels.dwconv_grad_input_np, (x256, w256, 28, 28, 3, 1, 1, 1)),
        "dwconv dw 256x28x28": (kernels.dwconv_grad_weight_nb, kernels.dwconv_grad_weight_np, (x256, x256, 3, 1, 1, 1)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--skip-model", action="store_true")
    args = ap.parse_args(argv)
    if not _backend.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    limit = _backend.limit_threads(args.threads) if args.threads else nullcontext()
    print(f"{'kernel':<28} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max |diff|':>11}")
    with limit:
        for name, (nb, np_, a) in cases(rng).items():
            diff = float(np.max(np.abs(nb(*a) - np_(*a))))
            t_nb = _time(lambda: nb(*a), args.repeat)
            t_np = _time(lambda: np_(*a), args.repeat)
            print(f"{name:<28} {t_nb * 1e3:>10.3f} {t_np * 1e3:>10.3f} {t_np / t_nb:>7.2f}x {diff:>11.2e}")
    if not args.skip_model:
        model = build_model()
        for backend in _backend.BACKENDS:
            print(f"\nforward_features, {backend} backend")
            print(run_bench(model, (1, 3, 224, 224), iters=5, threads=args.threads, backend=backend, warmup=2).format())


if __name__ == "__main__":
    main()
