"""Scan benchmark: report shape, channel-split execution and measured scaling."""

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from services.benchmark_service import (
    BenchImpl,
    BenchReport,
    BenchRow,
    bench_scan,
    channel_groups,
    kernel_scan,
    loglog_slope,
    parse_lengths,
    split_scan,
)
from tools.config import ScanImpl
from tools.errors import ConfigError, ToleranceError
from tools.ssm_core import SelectiveParams, run_scan


# ============================================================================
# Report and execution
# ============================================================================


class TestBenchmark:
    @pytest.mark.parametrize("impl", list(BenchImpl))
    def test_report_rows(self, rng, impl):
        report = bench_scan([64, 256], rng, impl=impl, repeat=2)

        assert [row.length for row in report.rows] == [64, 256]
        assert all(len(row.runs) == 2 and row.median_s > 0 for row in report.rows)
        assert math.isfinite(report.slope)
        assert report.to_dict()["impl"] == impl.value

    def test_loglog_slope(self):
        assert loglog_slope([10, 100, 1000], [0.1, 1.0, 10.0]) == pytest.approx(1.0)
        assert loglog_slope([10, 100], [1.0, 100.0]) == pytest.approx(2.0)
        assert math.isnan(loglog_slope([10], [1.0]))

    def test_check_linear(self):
        rows = [BenchRow(length=10, median_s=1.0, runs=[1.0])]

        BenchReport(BenchImpl.PARALLEL, rows, slope=1.05, threads=1).check_linear()
        with pytest.raises(ToleranceError):
            BenchReport(BenchImpl.PARALLEL, rows, slope=2.0, threads=1).check_linear()

    def test_parse_lengths(self):
        assert parse_lengths("1024, 4096") == [1024, 4096]
        with pytest.raises(ConfigError):
            parse_lengths("10,x")
        with pytest.raises(ConfigError):
            parse_lengths("0")

    def test_kernel_scan_shape(self, rng):
        p = SelectiveParams.initialize(3, rng)
        x = rng.normal(size=(50, 3))

        assert kernel_scan(x, p).shape == (50, 3)

    def test_repeat_must_be_positive(self, rng):
        with pytest.raises(ConfigError):
            bench_scan([16], rng, repeat=0)

    def test_channel_groups_cover_every_channel(self):
        groups = channel_groups(5, 3)

        assert [g.tolist() for g in groups] == [[0, 1], [2, 3], [4]]
        assert len(channel_groups(2, 8)) == 2
        assert len(channel_groups(4, 1)) == 1

    @pytest.mark.parametrize("impl", [BenchImpl.SEQUENTIAL, BenchImpl.PARALLEL])
    def test_split_scan_matches_full_scan(self, rng, impl):
        p = SelectiveParams.initialize(5, rng)
        x = rng.normal(size=(40, 5))
        scan_impl = ScanImpl.PARALLEL if impl is BenchImpl.PARALLEL else ScanImpl.SEQUENTIAL
        expected, _ = run_scan(x, p, impl=scan_impl)

        with ThreadPoolExecutor(max_workers=3) as pool:
            y = split_scan(x, p, impl, threads=3, map_fn=pool.map)

        np.testing.assert_allclose(y, expected, rtol=0, atol=1e-12)

    def test_split_kernel_matches_kernel_scan(self, rng):
        p = SelectiveParams.initialize(4, rng)
        x = rng.normal(size=(64, 4))

        y = split_scan(x, p, BenchImpl.KERNEL, threads=2)

        np.testing.assert_allclose(y, kernel_scan(x, p), rtol=0, atol=1e-12)

    def test_threads_reach_the_map_fn(self, rng):
        calls = []

        def recording_map(fn, items):
            items = list(items)
            calls.append(len(items))
            return [fn(i) for i in items]

        report = bench_scan([32], rng, repeat=2, channels=4, threads=2, map_fn=recording_map)

        assert calls == [2, 2]
        assert report.threads == 2

    def test_threads_must_be_positive(self, rng):
        with pytest.raises(ConfigError):
            bench_scan([16], rng, threads=0)


# ============================================================================
# Measured scaling
# ============================================================================


@pytest.mark.slow
class TestMeasuredScaling:
    def test_sequential_scan_grows_linearly(self):
        report = bench_scan([2**k for k in range(12, 17)], np.random.default_rng(0), repeat=3)

        assert [row.length for row in report.rows] == [4096, 8192, 16384, 32768, 65536]
        report.check_linear()
