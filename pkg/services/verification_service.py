"""
Numerical verification: finite-difference gradient checks for the scan
adjoint and the self-test matrix run by ``selftest``.
"""
import logging
import os
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray
from tqdm import tqdm

from tools.config import ScanConfig, SSMConfig, describe_defaults
from tools.cost_volume import build_correlation, build_pyramid, lookup, wta_disparity
from tools.errors import ConfigError, StereoSSMError, ToleranceError
from tools.metrics import compute_metrics
from tools.progress import bar_disabled
from tools.scan2d import ConvSS2DWeights, ScanDirection, convss2d_forward, direction_permutation
from tools.ssm_core import (
    PARAM_NAMES,
    SelectiveParams,
    discretize,
    lti_convolve,
    lti_kernel,
    scan_backward,
    scan_parallel,
    scan_sequential,
    selective_scan_ref,
)
from tools.tensor_io import archive_read, archive_write, join_path, pfm_decode, pfm_encode, read_bytes

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

GOLDEN_DIR = str(Path(__file__).resolve().parent.parent / "golden")
GOLDEN_PFM = "pfm_1x1.pfm"
GOLDEN_ARCHIVE = "archive_1x1.ssa2"
GOLDEN_PFM_VALUE = 2.5
GOLDEN_ARCHIVE_NAME = "x"

Shape = tuple[int, int, int]


# Gradient check


@dataclass(frozen=True)
class GradcheckCase:
    shape: Shape  # (L, C, N)
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


@dataclass(frozen=True)
class GradcheckReport:
    cases: list[GradcheckCase]
    eps: float
    tol: float

    @property
    def max_error(self) -> float:
        return max(case.max_error for case in self.cases)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def raise_for_tolerance(self) -> None:
        if not self.passed:
            worst = max(self.cases, key=lambda c: c.max_error)
            raise ToleranceError(
                f"Gradient check failed: max relative error {self.max_error:.3e} > tol {self.tol:.1e}"
                f" (worst shape L,C,N={worst.shape})"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "eps": self.eps,
            "tol": self.tol,
            "max_error": self.max_error,
            "passed": self.passed,
            "cases": [{"shape": list(c.shape), "errors": c.errors} for c in self.cases],
        }


def parse_shapes(text: str) -> list[Shape]:
    """'L,C,N;L,C,N' -> [(L, C, N), ...]."""
    shapes: list[Shape] = []
    for chunk in filter(None, (part.strip() for part in text.split(";"))):
        try:
            length, channels, d_state = (int(v) for v in chunk.split(","))
        except ValueError as e:
            raise ConfigError(f"Bad shape {chunk!r}; expected L,C,N") from e
        if min(length, channels, d_state) < 1:
            raise ConfigError(f"Shape entries must be >= 1, got {chunk!r}")
        shapes.append((length, channels, d_state))
    if not shapes:
        raise ConfigError("No shapes given")
    return shapes


def random_shapes(rng: np.random.Generator, count: int) -> list[Shape]:
    return [
        (int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        for _ in range(count)
    ]


def create_gradcheck_problem(
    rng: np.random.Generator, length: int, channels: int, d_state: int
) -> tuple[Array, SelectiveParams, Array, Array]:
    """Well-conditioned random scan problem: (x, params, h_init, grad_y)."""
    params = SelectiveParams(
        a_diag=-rng.uniform(0.5, 2.0, size=(channels, d_state)),
        w_delta=rng.normal(0.0, 0.5, size=(channels, channels)),
        b_delta=rng.uniform(-3.0, 0.0, size=channels),
        w_b=rng.normal(0.0, 0.5, size=(d_state, channels)),
        w_c=rng.normal(0.0, 0.5, size=(d_state, channels)),
        d_skip=rng.normal(0.0, 0.5, size=channels),
    )
    x = rng.normal(0.0, 1.0, size=(length, channels))
    h_init = rng.normal(0.0, 0.5, size=(channels, d_state))
    grad_y = rng.normal(0.0, 1.0, size=(length, channels))
    return x, params, h_init, grad_y


def _loss(x: Array, p: SelectiveParams, h_init: Array, grad_y: Array) -> float:
    y, _ = scan_sequential(x, p, h_init)
    return float(np.sum(np.asarray(y, dtype=np.float64) * grad_y))


def finite_difference_gradients(
    x: Array, p: SelectiveParams, h_init: Array, grad_y: Array, eps: float
) -> dict[str, Array]:
    """Central differences of sum(y * grad_y) with respect to every input tensor."""

    def central(base: Array, evaluate: Callable[[Array], float]) -> Array:
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            minus = base.copy()
            plus[idx] += eps
            minus[idx] -= eps
            grad[idx] = (evaluate(plus) - evaluate(minus)) / (2.0 * eps)
        return grad

    grads = {
        "x": central(x, lambda v: _loss(v, p, h_init, grad_y)),
        "h_init": central(h_init, lambda v: _loss(x, p, v, grad_y)),
    }
    for name in PARAM_NAMES:
        grads[name] = central(
            getattr(p, name), lambda v, name=name: _loss(x, replace(p, **{name: v}), h_init, grad_y)
        )
    return grads


def relative_error(analytic: Array, numeric: Array) -> float:
    """max|a - b| / max(max|a|, max|b|, 1e-8)."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def gradcheck(
    shapes: Sequence[Shape],
    rng: np.random.Generator,
    eps: float = 1e-5,
    tol: float = 1e-5,
    progress: bool = False,
) -> GradcheckReport:
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    if tol < 0:
        raise ConfigError(f"tol must be >= 0, got {tol}")
    cases = []
    for shape in tqdm(shapes, desc="Gradient check", disable=bar_disabled(progress)):
        x, p, h_init, grad_y = create_gradcheck_problem(rng, *shape)
        analytic = scan_backward(x, p, h_init, grad_y).as_dict()
        numeric = finite_difference_gradients(x, p, h_init, grad_y, eps)
        errors = {name: relative_error(analytic[name], numeric[name]) for name in numeric}
        cases.append(GradcheckCase(shape=shape, errors=errors))
    report = GradcheckReport(cases=cases, eps=eps, tol=tol)
    logger.info(f"[Gradcheck] {len(cases)} cases, max relative error {report.max_error:.3e}")
    return report


# Self-test matrix


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


@dataclass
class SelfTestContext:
    rng: np.random.Generator
    # local directory or smart_open URI
    golden_dir: str = GOLDEN_DIR


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ToleranceError(message)


def check_scan_equivalence(ctx: SelfTestContext, configs: int = 20) -> None:
    worst = 0.0
    for _ in range(configs):
        length = int(ctx.rng.integers(1, 513))
        channels = int(ctx.rng.integers(1, 9))
        d_state = int(ctx.rng.integers(1, 9))
        p = SelectiveParams.initialize(channels, ctx.rng, SSMConfig(d_state=d_state))
        x = ctx.rng.normal(size=(length, channels))
        y_seq, h_seq = scan_sequential(x, p)
        y_par, h_par = scan_parallel(x, p)
        worst = max(worst, float(np.max(np.abs(y_seq - y_par))), float(np.max(np.abs(h_seq - h_par))))
    _require(worst <= 1e-12, f"parallel vs sequential deviation {worst:.3e}")


def check_lti_kernel(ctx: SelfTestContext, configs: int = 10) -> None:
    worst = 0.0
    for _ in range(configs):
        length = int(ctx.rng.integers(1, 257))
        channels = int(ctx.rng.integers(1, 5))
        d_state = int(ctx.rng.integers(1, 5))
        x, y_rec, y_conv = lti_problem(ctx.rng, length, channels, d_state)
        worst = max(worst, float(np.max(np.abs(y_rec - y_conv))))
    _require(worst <= 1e-12, f"recurrence vs convolution deviation {worst:.3e}")


def lti_problem(
    rng: np.random.Generator, length: int, channels: int, d_state: int
) -> tuple[Array, Array, Array]:
    """Time-invariant scan evaluated by recurrence and by convolution with its kernel."""
    a = -rng.uniform(0.1, 2.0, size=(channels, d_state))
    delta = rng.uniform(0.01, 0.5, size=channels)
    b = rng.normal(size=d_state)
    c = rng.normal(size=d_state)
    x = rng.normal(size=(length, channels))
    y_rec, _ = selective_scan_ref(
        x,
        np.broadcast_to(delta, (length, channels)),
        a,
        np.broadcast_to(b, (length, d_state)),
        np.broadcast_to(c, (length, d_state)),
    )
    a_bar, b_bar = discretize(delta[:, None], a, b)
    kernel = lti_kernel(a_bar, b_bar, c, length)
    return x, np.asarray(y_rec, dtype=np.float64), lti_convolve(x, kernel)


def check_zoh(ctx: SelfTestContext) -> None:
    a_bar, b_bar = discretize(np.log(2.0), -1.0, 1.0)
    _require(abs(float(a_bar) - 0.5) <= 1e-12 and abs(float(b_bar) - 0.5) <= 1e-12, "ZOH closed form")
    for sign in (1.0, -1.0):
        _, inside = discretize(1.0, sign * (1e-4 - 1e-13), 1.0)
        _, outside = discretize(1.0, sign * (1e-4 + 1e-13), 1.0)
        _require(abs(float(inside) - float(outside)) <= 1e-10, "series branch discontinuous")


def check_gradients(ctx: SelfTestContext, configs: int = 5) -> None:
    gradcheck(random_shapes(ctx.rng, configs), ctx.rng).raise_for_tolerance()


def check_correlation(ctx: SelfTestContext, configs: int = 10) -> None:
    for _ in range(configs):
        height, width, depth = (int(v) for v in ctx.rng.integers(1, 5, size=3))
        f_l = ctx.rng.normal(size=(height, width, depth))
        f_r = ctx.rng.normal(size=(height, width, depth))
        volume = build_correlation(f_l, f_r).volume
        oracle = triple_loop_correlation(f_l, f_r)
        _require(bool(np.array_equal(volume, oracle)), "correlation differs from triple-loop oracle")


def triple_loop_correlation(f_l: Array, f_r: Array) -> Array:
    height, width, depth = f_l.shape
    out = np.zeros((height, width, width))
    for i in range(height):
        for j in range(width):
            for k in range(width):
                total = 0.0
                for d in range(depth):
                    total += float(f_l[i, j, d]) * float(f_r[i, k, d])
                out[i, j, k] = total
    return out


def check_lookup(ctx: SelfTestContext) -> None:
    height, width = 3, 16
    f_l = ctx.rng.normal(size=(height, width, 4))
    f_r = ctx.rng.normal(size=(height, width, 4))
    volume = build_correlation(f_l, f_r)
    pyr = build_pyramid(volume)
    cols = np.arange(width)[None, :]
    d = ctx.rng.integers(0, width, size=(height, width)) % (cols + 1)
    sampled = lookup(pyr, d.astype(np.float64), r=0)[..., 0]
    rows = np.arange(height)[:, None]
    _require(bool(np.array_equal(sampled, volume.volume[rows, cols, cols - d])), "lookup differs from indexing")


def check_wta_shift(ctx: SelfTestContext) -> None:
    shift, width = 3, 12
    basis = np.eye(width + shift)
    f_l = basis[None, :width]
    f_r = basis[None, shift : width + shift]
    d = wta_disparity(build_correlation(f_l, f_r)).disparity
    _require(bool(np.all(d[0, shift:] == shift)), "WTA failed to recover the integer shift")


def check_permutations(ctx: SelfTestContext) -> None:
    for height, width in ((1, 1), (2, 3), (7, 5), (32, 32)):
        for direction in ScanDirection:
            perm = direction_permutation(direction, height, width)
            inverse = np.argsort(perm)
            _require(bool(np.array_equal(perm[inverse], np.arange(height * width))), "permutation not bijective")


def check_propagation(ctx: SelfTestContext) -> None:
    height, width, channels = 9, 11, 4
    weights = propagation_weights(ctx.rng, channels)
    i, j = 4, 5
    impulse = np.zeros((height, width, channels))
    impulse[i, j] = 1.0
    diff = np.abs(convss2d_forward(impulse, weights) - convss2d_forward(np.zeros_like(impulse), weights)).max(axis=-1)
    _require(bool(np.all(diff[i] > 0) and np.all(diff[:, j] > 0)), "impulse did not reach its full row and column")


def propagation_weights(rng: np.random.Generator, channels: int) -> ConvSS2DWeights:
    """Random block weights with nonzero biases, so a zero background still carries signal."""
    weights = ConvSS2DWeights.initialize(channels, rng)
    return replace(
        weights,
        dw_bias=np.full(channels, 0.5),
        gate_b=np.ones(channels),
    )


def check_metrics(ctx: SelfTestContext) -> None:
    gt = np.full((4, 4), 2.0)
    r = compute_metrics(1.3 * gt, gt)
    expected = (0.3, 0.18, 0.6, 0.262364, 0.0, 1.0, 1.0)
    got = (r.absrel, r.sqrel, r.rmse, r.logrmse, r.delta1, r.delta2, r.delta3)
    _require(all(abs(g - e) <= 1e-6 for g, e in zip(got, expected)), f"metrics closed form {got}")


def random_dims(rng: np.random.Generator, max_rank: int = 3) -> tuple[int, ...]:
    return tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(0, max_rank + 1))))


def check_archive(ctx: SelfTestContext, payloads: int = 20) -> None:
    tensors = {
        f"t{k}": np.asarray(ctx.rng.normal(size=random_dims(ctx.rng)), dtype=np.float32)
        for k in range(payloads)
    }
    restored = archive_read(archive_write(tensors))
    _require(list(restored) == list(tensors), "archive order changed")
    _require(
        all(restored[k].tobytes() == v.tobytes() and restored[k].shape == v.shape for k, v in tensors.items()),
        "archive payload changed",
    )


def check_pfm(ctx: SelfTestContext) -> None:
    image = ctx.rng.normal(size=(31, 17)).astype(np.float32)
    _require(pfm_decode(pfm_encode(image)).tobytes() == image.tobytes(), "PFM round trip changed payload")


def check_golden_pfm(ctx: SelfTestContext) -> None:
    data = read_bytes(join_path(ctx.golden_dir, GOLDEN_PFM))
    _require(data == pfm_encode(np.array([[GOLDEN_PFM_VALUE]], dtype=np.float32)), f"{GOLDEN_PFM} bytes differ")
    _require(float(pfm_decode(data)[0, 0]) == GOLDEN_PFM_VALUE, f"{GOLDEN_PFM} value differs")


def check_golden_archive(ctx: SelfTestContext) -> None:
    data = read_bytes(join_path(ctx.golden_dir, GOLDEN_ARCHIVE))
    expected = archive_write({GOLDEN_ARCHIVE_NAME: np.ones((1, 1), dtype=np.float32)})
    _require(data == expected, f"{GOLDEN_ARCHIVE} bytes differ")
    _require(data[-4:] == bytes([0x00, 0x00, 0x80, 0x3F]), f"{GOLDEN_ARCHIVE} payload is not 1.0f")


def check_defaults(ctx: SelfTestContext) -> None:
    described = describe_defaults()
    _require(described["ssm"]["d_state"] == 4 and described["ssm"]["ssm_ratio"] == 1.0, "SSM defaults")
    _require(described["iters_infer"] == 32, "inference iterations")
    _require(described["scan"]["num_directions"] == ScanConfig().num_directions == 4, "direction count")


SELF_CHECKS: tuple[tuple[str, Callable[[SelfTestContext], None]], ...] = (
    ("scan.parallel_vs_sequential", check_scan_equivalence),
    ("scan.lti_kernel", check_lti_kernel),
    ("scan.zoh_closed_form", check_zoh),
    ("scan.gradcheck", check_gradients),
    ("scan2d.permutations", check_permutations),
    ("scan2d.propagation", check_propagation),
    ("corr.triple_loop", check_correlation),
    ("corr.lookup_indexing", check_lookup),
    ("corr.wta_shift", check_wta_shift),
    ("metrics.closed_form", check_metrics),
    ("io.archive_roundtrip", check_archive),
    ("io.pfm_roundtrip", check_pfm),
    ("io.golden_pfm", check_golden_pfm),
    ("io.golden_archive", check_golden_archive),
    ("config.defaults", check_defaults),
)


def run_selftest(
    rng: np.random.Generator,
    golden_dir: str | os.PathLike[str] | None = None,
    progress: bool = False,
) -> list[CheckResult]:
    ctx = SelfTestContext(rng=rng, golden_dir=os.fspath(golden_dir or GOLDEN_DIR))
    results = []
    for name, check in tqdm(SELF_CHECKS, desc="Self-test", disable=bar_disabled(progress)):
        start = time.perf_counter()
        try:
            check(ctx)
            results.append(CheckResult(name, True, seconds=time.perf_counter() - start))
        except (StereoSSMError, OSError) as e:
            logger.info(f"[SelfTest] {name} failed: {e}")
            results.append(CheckResult(name, False, f"{type(e).__name__}: {e}", time.perf_counter() - start))
    return results


def format_matrix(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.seconds:6.2f}s  {r.detail}".rstrip() for r in results]
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines)
