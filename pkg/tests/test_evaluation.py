import csv
import io
import math

import numpy as np
import pytest

from hfvit import data as dio
from hfvit.errors import ContractError, DataError
from hfvit.evaluation import CSV_COLUMNS, RdPoint, bd_rate, bench_csv, bench_latency, paired_bench, speedup
from hfvit.fusion import fuse_model
from hfvit.model import HfvitConfig, HfvitModel

REF = [RdPoint(1000.0, 32.0), RdPoint(1800.0, 34.6), RdPoint(3300.0, 37.1), RdPoint(6100.0, 39.4)]
TEST = [RdPoint(1040.0, 31.9), RdPoint(1880.0, 34.5), RdPoint(3420.0, 37.0), RdPoint(6350.0, 39.35)]


def lagrange(xs, ys, x):
    total = np.zeros_like(x)
    for i, (xi, yi) in enumerate(zip(xs, ys)):
        term = np.full_like(x, yi)
        for j, xj in enumerate(xs):
            if j != i:
                term *= (x - xj) / (xi - xj)
        total += term
    return total


def dense_bd_rate(ref, test, n=200_001):
    """Interpolating cubic (4 points) evaluated on a fine grid, trapezoid rule."""
    q1, r1 = [p.quality for p in ref], [math.log10(p.bitrate) for p in ref]
    q2, r2 = [p.quality for p in test], [math.log10(p.bitrate) for p in test]
    lo, hi = max(min(q1), min(q2)), min(max(q1), max(q2))
    grid = np.linspace(lo, hi, n)
    diff = lagrange(q2, r2, grid) - lagrange(q1, r1, grid)
    avg = np.sum((diff[1:] + diff[:-1]) / 2 * np.diff(grid)) / (hi - lo)
    return (10 ** avg - 1) * 100


class TestSpeedup:
    def test_table_value(self):
        assert speedup(100, 35.73) == 64.27

    def test_equal_times(self):
        assert speedup(12.5, 12.5) == 0.0

    def test_zero_model_time(self):
        assert speedup(3.0, 0.0) == 100.0

    @pytest.mark.parametrize("ref, model", [(0.0, 1.0), (-1.0, 1.0), (1.0, -0.5)])
    def test_invalid(self, ref, model):
        with pytest.raises(ContractError):
            speedup(ref, model)


class TestBdRate:
    def test_identical(self):
        assert bd_rate(REF, REF) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_offset(self):
        scaled = [RdPoint(p.bitrate * 1.10, p.quality) for p in REF]
        assert bd_rate(REF, scaled) == pytest.approx(10.0, abs=0.01)

    def test_matches_dense_integration(self):
        assert abs(bd_rate(REF, TEST) - dense_bd_rate(REF, TEST)) <= 0.01

    def test_order_of_points_irrelevant(self):
        assert bd_rate(REF[::-1], TEST) == pytest.approx(bd_rate(REF, TEST), rel=1e-12)

    def test_too_few_points(self):
        with pytest.raises(DataError):
            bd_rate(REF[:3], TEST)

    def test_no_overlap(self):
        far = [RdPoint(p.bitrate, p.quality + 20) for p in REF]
        with pytest.raises(DataError):
            bd_rate(REF, far)

    def test_non_positive_rate(self):
        with pytest.raises(DataError):
            RdPoint(0.0, 30.0)


@pytest.fixture(scope="module")
def bench_models():
    model = HfvitModel(HfvitConfig(d1=64, d2=32))
    fused, _ = fuse_model(model, n_probes=2)
    samples = dio.generate_synthetic_dataset(16, seed=0).samples()
    return model, fused, samples


class TestBench:
    def test_result_fields(self, bench_models):
        model, _, samples = bench_models
        r = bench_latency(model, samples, reps=5, warmup=1)
        assert r.variant == "unfused" and r.batch == 16 and len(r.samples_ms) == 5
        assert r.ms_per_ctu == r.median_ms > 0

    def test_empty_batch(self, bench_models):
        with pytest.raises(ContractError):
            bench_latency(bench_models[0], [], reps=1)

    def test_paired_variants(self, bench_models):
        model, fused, samples = bench_models
        results = paired_bench([model, fused], samples, reps=4, warmup=1)
        assert [r.variant for r in results] == ["unfused", "fused"]
        assert all(len(r.samples_ms) == 4 for r in results)

    def test_csv(self, bench_models):
        model, fused, samples = bench_models
        results = paired_bench([model, fused], samples, reps=2, warmup=0)
        text = bench_csv(results, [100, 90], [0.5, 0.5], threads=1)
        lines = text.splitlines()
        assert lines[0].startswith("# threads=1")
        rows = list(csv.reader(io.StringIO("\n".join(lines[1:]))))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert [r[0] for r in rows[1:]] == ["unfused", "fused"] and rows[2][6] == "90"

    def test_median_stable_when_reps_double(self, bench_models):
        model, _, samples = bench_models
        short = bench_latency(model, samples, reps=15, warmup=2)
        long = bench_latency(model, samples, reps=30, warmup=2)
        assert abs(long.median_ms - short.median_ms) / short.median_ms < 0.10
