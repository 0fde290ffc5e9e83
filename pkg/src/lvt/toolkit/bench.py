"""Latency benchmark for forward_features."""

from __future__ import annotations

import time
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from lvt import _backend
from lvt.backbone import Model, forward_features
from lvt.tensor import count_macs


@dataclass
class BenchResult:
    shape: tuple
    iters: int
    threads: int | None
    backend: str
    times: np.ndarray  # seconds per iteration
    macs: int  # per iteration, instrumented

    @property
    def mean(self) -> float:
        return float(self.times.mean())

    @property
    def p50(self) -> float:
        return float(np.percentile(self.times, 50))

    @property
    def p95(self) -> float:
        return float(np.percentile(self.times, 95))

    @property
    def macs_per_s(self) -> float:
        return self.macs / self.mean

    def format(self) -> str:
        shape = "x".join(map(str, self.shape))
        threads = "default" if self.threads is None else self.threads
        return (
            f"shape {shape}  backend {self.backend}  threads {threads}  iters {self.iters}\n"
            f"latency mean {self.mean * 1e3:.1f} ms  p50 {self.p50 * 1e3:.1f} ms  p95 {self.p95 * 1e3:.1f} ms\n"
            f"MACs/iter {self.macs:,}  achieved {self.macs_per_s / 1e9:.2f} GMAC/s"
        )


def run_bench(model: Model, shape=(1, 3, 224, 224), iters: int = 10, threads: int | None = None,
              backend: str | None = None, warmup: int = 1, seed: int = 0) -> BenchResult:
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = np.random.default_rng(seed).standard_normal(shape).astype(model.dtype)
    limit = _backend.limit_threads(threads) if threads else nullcontext()
    chosen = backend or _backend.get_backend()
    with _backend.use_backend(chosen), limit:
        with count_macs() as counter:
            forward_features(model, x)
        for _ in range(max(0, warmup - 1)):
            forward_features(model, x)
        times = np.empty(iters)
        for i in range(iters):
            t0 = time.perf_counter()
            forward_features(model, x)
            times[i] = time.perf_counter() - t0
    return BenchResult(tuple(shape), iters, threads, chosen, times, counter.total)
