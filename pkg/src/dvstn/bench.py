"""Per-window latency benchmark."""

from __future__ import annotations

import contextlib
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .graph import compile_model, init_weights
from .pipeline.window import SEGMENT_OFFSETS, SEGMENT_FRAMES, consensus

BENCH_FIELDS = ("model", "side", "warmup", "iters", "median_ms", "p90_ms", "p99_ms", "wps", "fps", "stride",
                "host")


def host_descriptor():
    cpu = platform.processor() or platform.machine()
    return f"{platform.system()}-{cpu}-{os.cpu_count()}cpu-py{platform.python_version()}"


@dataclass
class BenchReport:
    model_id: str
    input_side: int
    warmup: int
    iters: int
    samples_ms: list = field(default_factory=list)
    stride: int = 1
    host: str = field(default_factory=host_descriptor)

    @property
    def median_ms(self):
        return float(np.percentile(self.samples_ms, 50))

    @property
    def p90_ms(self):
        return float(np.percentile(self.samples_ms, 90))

    @property
    def p99_ms(self):
        return float(np.percentile(self.samples_ms, 99))

    @property
    def windows_per_second(self):
        return 1000.0 / self.median_ms if self.median_ms > 0 else float("inf")

    @property
    def fps(self):
        """Input frame rate sustainable when a window is classified every ``stride`` frames."""
        return self.windows_per_second * self.stride

    def summary_line(self):
        """Tab-separated, fixed field order (see ``BENCH_FIELDS``)."""
        values = (self.model_id, self.input_side, self.warmup, self.iters, f"{self.median_ms:.4f}",
                  f"{self.p90_ms:.4f}", f"{self.p99_ms:.4f}", f"{self.windows_per_second:.3f}",
                  f"{self.fps:.3f}", self.stride, self.host)
        return "BENCH\t" + "\t".join(str(v) for v in values)

    def text(self):
        return "\n".join([
            f"model        {self.model_id} ({self.input_side}x{self.input_side})",
            f"iterations   {self.iters} (+{self.warmup} warmup)",
            f"latency ms   median {self.median_ms:.3f}  p90 {self.p90_ms:.3f}  p99 {self.p99_ms:.3f}",
            f"throughput   {self.windows_per_second:.2f} windows/s, {self.fps:.2f} FPS at stride {self.stride}",
            f"host         {self.host}",
        ])


def _window_task(spec, weights, seed):
    if weights is None:
        weights = init_weights(spec, seed=seed)
    model = compile_model(spec, weights)
    c, h, w = spec.input_shape
    rng = np.random.default_rng(seed)
    window = rng.random((SEGMENT_OFFSETS[-1] + SEGMENT_FRAMES, h, w), dtype=np.float32)
    stacks = [window[o:o + c][None] for o in SEGMENT_OFFSETS]

    def once():
        logits = np.concatenate([model(s) for s in stacks], axis=0)
        return consensus(logits)

    return once


def _timed(once):
    t0 = time.perf_counter()
    once()
    return (time.perf_counter() - t0) * 1000.0


def _thread_limit(threads):
    return threadpool_limits(limits=threads) if threads is not None else contextlib.nullcontext()


def bench_model(spec, weights=None, warmup=20, iters=200, stride=1, seed=0, threads=1, model_id=None):
    """Time full-window classification (three forwards plus consensus).

    The window is random, pre-normalized and already at the model's input
    size, so only inference is inside the timed region.  ``threads=None``
    leaves the BLAS thread pool alone.
    """
    return bench_models([(model_id or spec.name, spec, weights)], warmup, iters, stride, seed, threads)[0]


def bench_models(models, warmup=20, iters=200, stride=1, seed=0, threads=1):
    """Benchmark several ``(model_id, spec, weights)`` entries round-robin.

    Each round times one window per model, so slow drift in host load hits
    every model alike and their medians stay comparable.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    tasks = [_window_task(spec, weights, seed) for _, spec, weights in models]
    samples = [[] for _ in tasks]
    with _thread_limit(threads):
        for _ in range(warmup):
            for once in tasks:
                once()
        for _ in range(iters):
            for once, out in zip(tasks, samples):
                out.append(_timed(once))
    return [BenchReport(mid, spec.input_shape[1], warmup, iters, s, stride)
            for (mid, spec, _), s in zip(models, samples)]
