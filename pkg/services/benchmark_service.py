"""
Wall-clock scaling of the scan kernels with sequence length.
"""
import logging
import time
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np
from numpy.typing import NDArray
from tqdm import tqdm

from tools.config import ScanImpl, SSMConfig
from tools.errors import ConfigError, ToleranceError
from tools.progress import bar_disabled
from tools.ssm_core import (
    SelectiveParams,
    discretize,
    lti_convolve,
    lti_kernel,
    project_selective,
    selective_scan_ref,
    softplus,
)

logger = logging.getLogger(__name__)

DEFAULT_LENGTHS = tuple(2**k for k in range(10, 21, 2))
LINEAR_SLOPE_RANGE = (0.8, 1.3)

MapFn = Callable[[Callable[[Any], Any], Sequence[Any]], Iterable[Any]]


class BenchImpl(Enum):
    SEQUENTIAL = "seq"
    PARALLEL = "par"
    KERNEL = "kernel"


@dataclass(frozen=True)
class BenchRow:
    length: int
    median_s: float
    runs: list[float]


@dataclass(frozen=True)
class BenchReport:
    impl: BenchImpl
    rows: list[BenchRow]
    slope: float
    threads: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "impl": self.impl.value,
            "threads": self.threads,
            "slope": self.slope,
            "rows": [{"length": r.length, "median_s": r.median_s, "runs": r.runs} for r in self.rows],
        }

    def to_table(self) -> str:
        lines = [f"{'L':>10}  {'median [s]':>12}", "-" * 24]
        lines += [f"{r.length:>10}  {r.median_s:>12.6f}" for r in self.rows]
        lines.append(f"log-log slope ({self.impl.value}): {self.slope:.3f}")
        return "\n".join(lines)

    def check_linear(self, bounds: tuple[float, float] = LINEAR_SLOPE_RANGE) -> None:
        lo, hi = bounds
        if not lo <= self.slope <= hi:
            raise ToleranceError(f"Log-log slope {self.slope:.3f} outside [{lo}, {hi}]")


def parse_lengths(text: str) -> list[int]:
    try:
        lengths = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"Bad --lengths {text!r}") from e
    if not lengths or min(lengths) < 1:
        raise ConfigError(f"--lengths must list positive integers, got {text!r}")
    return lengths


def loglog_slope(lengths: Sequence[int], times: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(length); NaN with fewer than two points."""
    if len(lengths) < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(np.asarray(lengths, dtype=np.float64)), np.log(np.asarray(times)), 1)
    return float(slope)


def _frozen_kernel(p: SelectiveParams, length: int) -> NDArray[np.float64]:
    unit = np.ones(p.channels)
    delta = softplus(p.w_delta @ unit + p.b_delta)
    a_bar, b_bar = discretize(delta[:, None], p.a_diag, p.w_b @ unit)
    return lti_kernel(a_bar, b_bar, p.w_c @ unit, length)


def kernel_scan(x: NDArray[Any], p: SelectiveParams) -> NDArray[np.float64]:
    """Time-invariant counterpart of the scan: parameters frozen at a unit input, FFT convolution."""
    return lti_convolve(x, _frozen_kernel(p, x.shape[0]), method="fft") + p.d_skip * x


def channel_groups(channels: int, threads: int) -> list[NDArray[np.intp]]:
    """Contiguous channel blocks, one per worker and never empty."""
    return np.array_split(np.arange(channels), max(1, min(threads, channels)))


def split_scan(
    x: NDArray[Any],
    p: SelectiveParams,
    impl: BenchImpl = BenchImpl.SEQUENTIAL,
    threads: int = 1,
    map_fn: MapFn | None = None,
) -> NDArray[np.float64]:
    """
    One benchmark pass. The projections see every channel; the per-channel
    recurrences (or convolutions) then run as ``threads`` independent blocks
    through ``map_fn``.
    """
    groups = channel_groups(p.channels, threads)
    if impl is BenchImpl.KERNEL:
        kernel = _frozen_kernel(p, x.shape[0])

        def job(g: NDArray[np.intp]) -> NDArray[np.float64]:
            return lti_convolve(x[:, g], kernel[:, g], method="fft") + p.d_skip[g] * x[:, g]

    else:
        delta, b, c = project_selective(x, p)
        scan_impl = ScanImpl.PARALLEL if impl is BenchImpl.PARALLEL else ScanImpl.SEQUENTIAL

        def job(g: NDArray[np.intp]) -> NDArray[np.float64]:
            y, _ = selective_scan_ref(x[:, g], delta[:, g], p.a_diag[g], b, c, p.d_skip[g], impl=scan_impl)
            return np.asarray(y, dtype=np.float64)

    mapper = map_fn or (lambda fn, items: map(fn, items))
    y = np.empty(x.shape)
    for g, part in zip(groups, mapper(job, groups)):
        y[:, g] = part
    return y


def bench_scan(
    lengths: Sequence[int],
    rng: np.random.Generator,
    impl: BenchImpl = BenchImpl.SEQUENTIAL,
    repeat: int = 3,
    channels: int = 4,
    d_state: int = 4,
    threads: int = 1,
    progress: bool = False,
    map_fn: MapFn | None = None,
) -> BenchReport:
    """
    Median wall time of ``split_scan`` per length. ``threads`` sets the number
    of channel blocks, ``map_fn`` (usually the runtime pool) runs them.
    """
    if repeat < 1:
        raise ConfigError(f"--repeat must be >= 1, got {repeat}")
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    p = SelectiveParams.initialize(channels, rng, SSMConfig(d_state=d_state))
    rows = []
    for length in tqdm(lengths, desc=f"Benchmark {impl.value}", disable=bar_disabled(progress)):
        x = rng.normal(size=(length, channels))
        runs = []
        for _ in range(repeat):
            start = time.perf_counter()
            split_scan(x, p, impl, threads, map_fn)
            runs.append(time.perf_counter() - start)
        rows.append(BenchRow(length=length, median_s=float(np.median(runs)), runs=runs))
        logger.info(f"[BenchScan] {impl.value} L={length} median {rows[-1].median_s:.6f}s")
    slope = loglog_slope([r.length for r in rows], [r.median_s for r in rows])
    return BenchReport(impl=impl, rows=rows, slope=slope, threads=threads)
