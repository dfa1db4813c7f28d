"""
Depth and disparity evaluation.

Depth metrics are computed per image over the valid mask; a set of images is
summarized by the pixel-count weighted mean of the per-image values.
"""
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np
from numpy.typing import NDArray

from tools.errors import EmptyMaskError, NumericError, ShapeError
from tools.synth_scenes import CameraRig

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

DISPARITY_EPS = 1e-6
TABLE_COLUMNS = (
    ("Rel", "absrel"),
    ("SqRel", "sqrel"),
    ("RMSE", "rmse"),
    ("Log RMSE", "logrmse"),
    ("A1", "delta1"),
    ("A2", "delta2"),
    ("A3", "delta3"),
)


@dataclass(frozen=True)
class MetricReport:
    absrel: float
    sqrel: float
    rmse: float
    logrmse: float
    delta1: float
    delta2: float
    delta3: float
    valid_pixel_count: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class EPEReport:
    epe: float
    within_threshold: float
    threshold: float
    valid_pixel_count: int


def disparity_to_depth(
    d: NDArray[Any], rig: CameraRig, eps: float = DISPARITY_EPS
) -> tuple[Array, NDArray[np.bool_]]:
    """z = f * B / d where d > eps; invalid pixels carry depth 0."""
    disparity = np.asarray(d, dtype=np.float64)
    valid = np.isfinite(disparity) & (disparity > eps)
    depth = np.zeros_like(disparity)
    depth[valid] = rig.focal_px * rig.baseline_m / disparity[valid]
    return depth, valid


def depth_to_disparity(
    z: NDArray[Any], rig: CameraRig, eps: float = DISPARITY_EPS
) -> tuple[Array, NDArray[np.bool_]]:
    depth = np.asarray(z, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > eps)
    disparity = np.zeros_like(depth)
    disparity[valid] = rig.focal_px * rig.baseline_m / depth[valid]
    return disparity, valid


def _masked_pair(
    pred: NDArray[Any], gt: NDArray[Any], mask: NDArray[Any] | None
) -> tuple[Array, Array]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"Prediction {p.shape} and ground truth {g.shape} differ in shape")
    m = np.ones(g.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != g.shape:
        raise ShapeError(f"Mask {m.shape} does not match ground truth {g.shape}")
    if not m.any():
        raise EmptyMaskError("Evaluation mask selects no pixels")
    return p[m], g[m]


def compute_metrics(
    pred_depth: NDArray[Any], gt_depth: NDArray[Any], mask: NDArray[Any] | None = None
) -> MetricReport:
    pred, gt = _masked_pair(pred_depth, gt_depth, mask)
    if not (np.all(pred > 0) and np.all(gt > 0)):
        raise NumericError("Depths must be positive on the evaluation mask")

    diff = pred - gt
    ratio = np.maximum(pred / gt, gt / pred)
    return MetricReport(
        absrel=float(np.mean(np.abs(diff) / gt)),
        sqrel=float(np.mean(diff**2 / gt)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        logrmse=float(np.sqrt(np.mean((np.log(pred) - np.log(gt)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        valid_pixel_count=int(gt.size),
    )


def aggregate(reports: Sequence[MetricReport]) -> MetricReport:
    """Pixel-count weighted mean of per-image reports."""
    if not reports:
        raise EmptyMaskError("aggregate needs at least one report")
    total = sum(r.valid_pixel_count for r in reports)
    if total == 0:
        raise EmptyMaskError("Reports cover zero valid pixels")
    weights = np.array([r.valid_pixel_count for r in reports], dtype=np.float64) / total

    def mean(name: str) -> float:
        return float(np.dot(weights, [getattr(r, name) for r in reports]))

    return MetricReport(
        absrel=mean("absrel"),
        sqrel=mean("sqrel"),
        rmse=mean("rmse"),
        logrmse=mean("logrmse"),
        delta1=mean("delta1"),
        delta2=mean("delta2"),
        delta3=mean("delta3"),
        valid_pixel_count=total,
    )


def format_table(rows: Sequence[tuple[str, MetricReport]]) -> str:
    """Aligned plain-text table: Rel, SqRel, RMSE, Log RMSE, A1, A2, A3."""
    label_width = max([len("Image")] + [len(label) for label, _ in rows])
    header = f"{'Image':<{label_width}}" + "".join(f"  {title:>9}" for title, _ in TABLE_COLUMNS)
    lines = [header, "-" * len(header)]
    for label, report in rows:
        values = "".join(f"  {getattr(report, field):>9.4f}" for _, field in TABLE_COLUMNS)
        lines.append(f"{label:<{label_width}}{values}")
    return "\n".join(lines)


def end_point_error(
    pred_disp: NDArray[Any],
    gt_disp: NDArray[Any],
    mask: NDArray[Any] | None = None,
    threshold: float = 0.5,
) -> EPEReport:
    """Mean absolute disparity error and the fraction of pixels within ``threshold``."""
    pred, gt = _masked_pair(pred_disp, gt_disp, mask)
    error = np.abs(pred - gt)
    return EPEReport(
        epe=float(error.mean()),
        within_threshold=float(np.mean(error <= threshold)),
        threshold=threshold,
        valid_pixel_count=int(error.size),
    )
