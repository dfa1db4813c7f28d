"""
Directory-level evaluation shared by the CLI and the tests.
"""
import logging
import os
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace
from typing import Any

from tqdm import tqdm

from tools.errors import ConfigError, EmptyMaskError
from tools.metrics import MetricReport, aggregate, compute_metrics, disparity_to_depth, format_table
from tools.progress import bar_disabled
from tools.synth_scenes import DEFAULT_FOCAL_PX, MANIFEST_NAME, CameraRig
from tools.tensor_io import is_uri, join_path, path_exists, pfm_read, read_json

logger = logging.getLogger(__name__)

MASK_SUFFIX = "_mask.pfm"
DISP_SUFFIX = "_disp.pfm"


@dataclass(frozen=True)
class EvaluationResult:
    rows: list[tuple[str, MetricReport]]
    overall: MetricReport

    def to_dict(self) -> dict[str, Any]:
        return {
            "images": {name: report.to_dict() for name, report in self.rows},
            "overall": self.overall.to_dict(),
            "aggregation": "pixel-weighted mean of per-image metrics",
        }

    def to_table(self) -> str:
        return format_table(self.rows + [("overall", self.overall)])


def _manifest_rigs(gt_dir: str) -> dict[str, CameraRig]:
    path = join_path(gt_dir, MANIFEST_NAME)
    if not path_exists(path):
        return {}
    manifest = read_json(path)
    return {
        scene["files"]["disparity"]: CameraRig(scene["focal_px"], scene["baseline_m"])
        for scene in manifest.get("scenes", [])
    }


def list_ground_truth(gt_dir: str) -> list[str]:
    """
    Ground-truth disparity files in ``gt_dir``: the manifest's entries when
    one exists, otherwise every non-mask PFM of a local directory.
    """
    manifest = join_path(gt_dir, MANIFEST_NAME)
    if path_exists(manifest):
        return sorted(scene["files"]["disparity"] for scene in read_json(manifest).get("scenes", []))
    if is_uri(gt_dir):
        raise ConfigError(f"{gt_dir} has no {MANIFEST_NAME}; remote ground truth is listed through it")
    if not os.path.isdir(gt_dir):
        raise FileNotFoundError(f"Ground-truth directory not found: {gt_dir}")
    return sorted(name for name in os.listdir(gt_dir) if name.endswith(".pfm") and not name.endswith(MASK_SUFFIX))


def evaluate_pair(
    pred_path: str,
    gt_path: str,
    rig: CameraRig,
    mask_path: str | None = None,
) -> MetricReport:
    """Convert both disparity maps to depth and score them on the jointly valid pixels."""
    pred_disp = pfm_read(pred_path)
    gt_disp = pfm_read(gt_path)
    if pred_disp.shape != gt_disp.shape:
        raise ConfigError(f"{pred_path} has shape {pred_disp.shape}, {gt_path} has {gt_disp.shape}")
    pred_depth, pred_valid = disparity_to_depth(pred_disp, rig)
    gt_depth, gt_valid = disparity_to_depth(gt_disp, rig)
    mask = pred_valid & gt_valid
    if mask_path is not None:
        mask &= pfm_read(mask_path) < 0.5
    return compute_metrics(pred_depth, gt_depth, mask)


def evaluate_directories(
    pred_dir: str,
    gt_dir: str,
    focal_px: float | None = None,
    baseline_m: float | None = None,
    map_fn: Callable[[Callable[[str], MetricReport], Sequence[str]], Any] | None = None,
) -> EvaluationResult:
    """
    Score every ground-truth PFM in ``gt_dir`` against the same file name in ``pred_dir``.

    The rig comes from the ground-truth manifest; ``focal_px`` and
    ``baseline_m`` each override the matching manifest field when given and
    stand in for a missing manifest. A ``<stem>_mask.pfm`` next to a
    ``<stem>_disp.pfm`` excludes its nonzero pixels.
    """
    names = list_ground_truth(gt_dir)
    if not names:
        raise EmptyMaskError(f"No ground-truth PFM files in {gt_dir}")
    rigs = _manifest_rigs(gt_dir)
    overrides = {
        key: value for key, value in (("focal_px", focal_px), ("baseline_m", baseline_m)) if value is not None
    }

    def rig_for(name: str) -> CameraRig:
        if name in rigs:
            return replace(rigs[name], **overrides)
        if baseline_m is None:
            raise ConfigError(f"No baseline for {name}: pass --baseline or provide {MANIFEST_NAME}")
        return CameraRig(focal_px if focal_px is not None else DEFAULT_FOCAL_PX, baseline_m)

    for name in names:
        pred_path = join_path(pred_dir, name)
        if not path_exists(pred_path):
            raise FileNotFoundError(f"Missing prediction: {pred_path}")

    def score(name: str) -> MetricReport:
        mask_path = None
        if name.endswith(DISP_SUFFIX):
            candidate = join_path(gt_dir, name[: -len(DISP_SUFFIX)] + MASK_SUFFIX)
            mask_path = candidate if path_exists(candidate) else None
        return evaluate_pair(join_path(pred_dir, name), join_path(gt_dir, name), rig_for(name), mask_path)

    mapper = map_fn or (lambda fn, items: map(fn, items))
    bar = tqdm(mapper(score, names), total=len(names), desc="Evaluating", disable=bar_disabled(len(names) > 1))
    reports = list(bar)
    rows = list(zip(names, reports))
    logger.info(f"[EvaluationService] Scored {len(rows)} images")
    return EvaluationResult(rows=rows, overall=aggregate(reports))

