"""Speedup, Bjontegaard delta rate, and per-CTU latency measurement."""

from __future__ import annotations

import csv
import io
import os
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import Tensor
from .errors import ContractError, DataError


def speedup(t_ref: float, t_model: float) -> float:
    """``(1 - t_model / t_ref) * 100`` computed exactly from the decimal inputs."""
    if t_ref <= 0:
        raise ContractError("reference time must be positive")
    if t_model < 0:
        raise ContractError("model time must be non-negative")
    ratio = Fraction(repr(float(t_model))) / Fraction(repr(float(t_ref)))
    return float((1 - ratio) * 100)


@dataclass(frozen=True)
class RdPoint:
    bitrate: float  # kbps
    quality: float

    def __post_init__(self):
        if not self.bitrate > 0:
            raise DataError(f"bitrate must be positive, got {self.bitrate}")


def _curve(points: Sequence[RdPoint]) -> tuple[np.ndarray, np.ndarray]:
    pts = sorted(points, key=lambda p: p.bitrate)
    rate = np.array([p.bitrate for p in pts], dtype=np.float64)
    quality = np.array([p.quality for p in pts], dtype=np.float64)
    if len(pts) < 4:
        raise DataError("a BD-rate curve needs at least 4 points")
    if len(np.unique(quality)) < len(quality):
        raise DataError("repeated quality values make the cubic fit degenerate")
    return rate, quality


def bd_rate(curve_ref: Sequence[RdPoint], curve_test: Sequence[RdPoint]) -> float:
    """Average bitrate difference (%) of ``curve_test`` over ``curve_ref`` at equal quality.

    Classic formulation: cubic fit of log10(rate) against quality for each
    curve, integrated over the overlapping quality interval.
    """
    r1, q1 = _curve(curve_ref)
    r2, q2 = _curve(curve_test)
    lo, hi = max(q1.min(), q2.min()), min(q1.max(), q2.max())
    if not hi > lo:
        raise DataError("quality ranges of the two curves do not overlap")
    p1 = np.polyfit(q1, np.log10(r1), 3)
    p2 = np.polyfit(q2, np.log10(r2), 3)
    i1, i2 = np.polyint(p1), np.polyint(p2)
    area1 = np.polyval(i1, hi) - np.polyval(i1, lo)
    area2 = np.polyval(i2, hi) - np.polyval(i2, lo)
    avg = (area2 - area1) / (hi - lo)
    return float((10 ** avg - 1) * 100)


# ----------------------------------------------------------------------------
# latency


@dataclass
class BenchResult:
    variant: str
    batch: int
    reps: int
    warmup: int
    samples_ms: list[float] = field(repr=False, default_factory=list)

    @property
    def ms_per_ctu(self) -> float:
        return self.median_ms

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def median_ms(self) -> float:
        return float(np.median(self.samples_ms))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 95))

    @property
    def cov(self) -> float:
        return float(np.std(self.samples_ms) / np.mean(self.samples_ms))


def _variant(model) -> str:
    return "fused" if model.config.fused else "unfused"


def _time_once(model, x: Tensor, qp: np.ndarray) -> float:
    start = time.perf_counter()
    model(x, qp)
    return (time.perf_counter() - start) * 1e3 / x.shape[0]


def _prepare(model, batch):
    if len(batch) == 0:
        raise ContractError("benchmark batch is empty")
    x = np.stack([s.pixels for s in batch])
    qp = np.array([s.qp for s in batch])
    return Tensor(x, dtype=model.pos_embed.dtype), qp


def bench_latency(model, batch, reps: int = 30, warmup: int = 3, threads: int = 1) -> BenchResult:
    """Wall-clock ms per CTU of batched inference, after ``warmup`` untimed runs."""
    if reps < 1:
        raise ContractError("reps must be >= 1")
    model.eval()
    x, qp = _prepare(model, batch)
    with threadpool_limits(threads):
        for _ in range(warmup):
            model(x, qp)
        samples = [_time_once(model, x, qp) for _ in range(reps)]
    return BenchResult(_variant(model), len(batch), reps, warmup, samples)


def paired_bench(models: Sequence, batch, reps: int = 30, warmup: int = 3,
                 threads: int = 1) -> list[BenchResult]:
    """Interleave timing of several models on identical inputs so that drift in
    machine load affects every variant alike."""
    if reps < 1:
        raise ContractError("reps must be >= 1")
    prepared = []
    for m in models:
        m.eval()
        prepared.append(_prepare(m, batch))
    results = [BenchResult(_variant(m), len(batch), reps, warmup) for m in models]
    with threadpool_limits(threads):
        for m, (x, qp) in zip(models, prepared):
            for _ in range(warmup):
                m(x, qp)
        for _ in range(reps):
            for m, (x, qp), res in zip(models, prepared, results):
                res.samples_ms.append(_time_once(m, x, qp))
    return results


CSV_COLUMNS = ("variant", "batch", "reps", "mean_ms", "median_ms", "p95_ms", "params", "gflops")


def bench_csv(results: Sequence[BenchResult], params, gflops, threads: int = 1) -> str:
    """CSV rows, one per variant; ``params``/``gflops`` are scalars or per-result sequences."""
    n = len(results)
    params = list(params) if isinstance(params, Sequence) else [params] * n
    gflops = list(gflops) if isinstance(gflops, Sequence) else [gflops] * n
    buf = io.StringIO()
    buf.write(f"# threads={threads} pid_cpus={len(os.sched_getaffinity(0))} timer=perf_counter\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r, n_params, g in zip(results, params, gflops):
        writer.writerow([r.variant, r.batch, r.reps, f"{r.mean_ms:.4f}", f"{r.median_ms:.4f}",
                         f"{r.p95_ms:.4f}", n_params, f"{g:.6f}"])
    return buf.getvalue()
