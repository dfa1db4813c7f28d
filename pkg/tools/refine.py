"""
Iterative disparity refinement driven by ConvSS2D.

Every iteration samples the correlation pyramid around the current disparity,
encodes the samples together with the disparity, updates the hidden map
additively through a ConvSS2D block and predicts a disparity increment from
the updated hidden map. There is no context encoder: the hidden map is
initialized by projecting the left features directly.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from numpy.typing import NDArray
from tqdm import tqdm

from tools.config import RefineConfig, ScanConfig
from tools.cost_volume import (
    CorrelationVolume,
    CorrPyramid,
    DisparityMap,
    build_correlation,
    build_pyramid,
    lookup,
    shiftable_max,
    wta_disparity,
)
from tools.errors import ConfigError, EmptyMaskError, NumericError, ShapeError
from tools.features import DOWNSAMPLE, ExtractorConfig, ExtractorWeights, area_downsample, extract
from tools.progress import bar_disabled
from tools.scan2d import ConvSS2DWeights, MapFn, convss2d_forward, dwconv3x3

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]


class RefineMode(Enum):
    LEARNED = "learned"
    ORACLE = "oracle"


@dataclass(frozen=True)
class RefineState:
    disparity: Array  # [h x w], quarter resolution
    hidden: Array  # [h x w x C_h]

    @property
    def width(self) -> int:
        return int(self.disparity.shape[1])


def _relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


@dataclass(frozen=True)
class UpdateWeights:
    state_init_w: Array  # [C_h x C_feat]
    state_init_b: Array
    motion_in_w: Array  # [C_in x (corr_dim + 1)], 1x1 conv
    motion_in_b: Array
    motion_dw_w: Array  # [C_in x 3 x 3], depthwise 3x3 conv
    motion_dw_b: Array
    fuse_w: Array  # [C_h x (C_in + C_h)]
    fuse_b: Array
    convss2d: ConvSS2DWeights
    hidden_head_w: Array  # [C_h x C_h]
    hidden_head_b: Array
    delta_head_w: Array  # [1 x C_h]
    delta_head_b: Array  # [1]

    _NAMES = (
        ("state_init_w", "state_init.weight"),
        ("state_init_b", "state_init.bias"),
        ("motion_in_w", "motion.conv1.weight"),
        ("motion_in_b", "motion.conv1.bias"),
        ("motion_dw_w", "motion.conv2.weight"),
        ("motion_dw_b", "motion.conv2.bias"),
        ("fuse_w", "fuse.weight"),
        ("fuse_b", "fuse.bias"),
        ("hidden_head_w", "hidden_head.weight"),
        ("hidden_head_b", "hidden_head.bias"),
        ("delta_head_w", "delta_head.weight"),
        ("delta_head_b", "delta_head.bias"),
    )

    def __post_init__(self) -> None:
        hidden = self.state_init_b.shape[0]
        motion = self.motion_in_b.shape[0]
        expected = {
            "state_init_w": (hidden, self.state_init_w.shape[-1]),
            "motion_in_w": (motion, self.motion_in_w.shape[-1]),
            "motion_dw_w": (motion, 3, 3),
            "motion_dw_b": (motion,),
            "fuse_w": (hidden, motion + hidden),
            "fuse_b": (hidden,),
            "hidden_head_w": (hidden, hidden),
            "hidden_head_b": (hidden,),
            "delta_head_w": (1, hidden),
            "delta_head_b": (1,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"UpdateWeights.{name} must be {shape}, got {getattr(self, name).shape}")
        if self.convss2d.channels != hidden:
            raise ShapeError(f"ConvSS2D has {self.convss2d.channels} channels, hidden state has {hidden}")
        for name, _ in self._NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"UpdateWeights.{name} contains non-finite entries")

    @property
    def hidden_channels(self) -> int:
        return int(self.state_init_b.shape[0])

    @property
    def feature_channels(self) -> int:
        return int(self.state_init_w.shape[1])

    @property
    def corr_channels(self) -> int:
        return int(self.motion_in_w.shape[1]) - 1

    @classmethod
    def initialize(
        cls,
        feature_channels: int,
        rng: np.random.Generator,
        cfg: RefineConfig | None = None,
    ) -> "UpdateWeights":
        cfg = cfg or RefineConfig()
        hidden = cfg.hidden_channels
        motion = cfg.motion_channels
        corr = cfg.corr.num_levels * (2 * cfg.corr.radius + 1)

        def dense(rows: int, cols: int) -> Array:
            return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))

        return cls(
            state_init_w=dense(hidden, feature_channels),
            state_init_b=np.zeros(hidden),
            motion_in_w=dense(motion, corr + 1),
            motion_in_b=np.zeros(motion),
            motion_dw_w=rng.normal(0.0, 1.0 / 3.0, size=(motion, 3, 3)),
            motion_dw_b=np.zeros(motion),
            fuse_w=dense(hidden, motion + hidden),
            fuse_b=np.zeros(hidden),
            convss2d=ConvSS2DWeights.initialize(hidden, rng, cfg.ssm),
            hidden_head_w=0.1 * dense(hidden, hidden),
            hidden_head_b=np.zeros(hidden),
            delta_head_w=0.01 * dense(1, hidden),
            delta_head_b=np.zeros(1),
        )

    def to_tensors(self, prefix: str = "refine") -> dict[str, Array]:
        tensors = {f"{prefix}.{key}": getattr(self, name) for name, key in self._NAMES}
        tensors.update(self.convss2d.to_tensors(f"{prefix}.ss2d"))
        return tensors

    @classmethod
    def from_tensors(cls, tensors: dict[str, NDArray[Any]], prefix: str = "refine") -> "UpdateWeights":
        missing = [f"{prefix}.{key}" for _, key in cls._NAMES if f"{prefix}.{key}" not in tensors]
        if missing:
            raise ShapeError(f"Archive is missing {', '.join(missing)}")
        values = {name: np.asarray(tensors[f"{prefix}.{key}"], dtype=np.float64) for name, key in cls._NAMES}
        return cls(convss2d=ConvSS2DWeights.from_tensors(tensors, f"{prefix}.ss2d"), **values)


def _clamp(d: Array, width: int) -> Array:
    return np.clip(d, 0.0, float(width - 1))


def init_state(
    feat_l: NDArray[Any],
    mono_disp: NDArray[Any] | DisparityMap | None,
    w: UpdateWeights,
) -> RefineState:
    """
    hidden = tanh(state_init * feat_l + b) per pixel; d = clamped monocular map or zeros.
    """
    feat = np.asarray(feat_l, dtype=np.float64)
    if feat.ndim != 3 or feat.shape[2] != w.feature_channels:
        raise ShapeError(f"Features {feat.shape} do not match {w.feature_channels} input channels")
    height, width = feat.shape[:2]
    hidden = np.tanh(feat @ w.state_init_w.T + w.state_init_b)

    if mono_disp is None:
        disparity = np.zeros((height, width))
    else:
        mono = mono_disp.disparity if isinstance(mono_disp, DisparityMap) else np.asarray(mono_disp, dtype=np.float64)
        if mono.shape != (height, width):
            raise ShapeError(f"Monocular disparity {mono.shape} does not match features {(height, width)}")
        disparity = _clamp(mono, width)
    return RefineState(disparity=disparity, hidden=hidden)


def motion_encode(corr: Array, disparity: Array, w: UpdateWeights) -> Array:
    stacked = np.concatenate([corr, disparity[..., None]], axis=-1)
    m = _relu(stacked @ w.motion_in_w.T + w.motion_in_b)
    return _relu(dwconv3x3(m, w.motion_dw_w, w.motion_dw_b))


def update_step(
    state: RefineState,
    pyr: CorrPyramid,
    w: UpdateWeights | None,
    r: int = 4,
    mode: RefineMode = RefineMode.LEARNED,
    scan: ScanConfig | None = None,
    iteration: int = 0,
    subpixel: bool = True,
    map_fn: MapFn | None = None,
    support: int = 0,
) -> RefineState:
    """
    One refinement iteration.

    Learned mode:
        corr    = lookup(pyr, d, r)
        m       = motion_enc(corr ++ d)
        hidden' = hidden + hidden_head * convss2d(fuse(m ++ hidden))
        d'      = clamp(d + delta_head * hidden', 0, w - 1)

    Oracle mode replaces the increment with wta(level-1 volume) - d, so one
    step lands on the winner-take-all solution. With ``support`` > 0 every
    score is first replaced by its best shifted support window.
    """
    width = state.width
    if pyr.levels[0].shape[:2] != state.disparity.shape:
        raise ShapeError(f"Pyramid {pyr.levels[0].shape[:2]} does not match state {state.disparity.shape}")

    if mode is RefineMode.ORACLE:
        volume = shiftable_max(CorrelationVolume(volume=pyr.levels[0], feature_dim=0), support)
        target = wta_disparity(volume, subpixel=subpixel).disparity
        return RefineState(disparity=_clamp(target, width), hidden=state.hidden)

    if w is None:
        raise ConfigError("Learned refinement needs update weights")
    corr = lookup(pyr, state.disparity, r)
    if corr.shape[-1] != w.corr_channels:
        raise ShapeError(f"Lookup produced {corr.shape[-1]} channels, weights expect {w.corr_channels}")
    m = motion_encode(corr, state.disparity, w)
    fused = np.concatenate([m, state.hidden], axis=-1) @ w.fuse_w.T + w.fuse_b
    mixed = np.asarray(convss2d_forward(fused, w.convss2d, scan, map_fn=map_fn), dtype=np.float64)
    hidden = state.hidden + mixed @ w.hidden_head_w.T + w.hidden_head_b
    delta = (hidden @ w.delta_head_w.T + w.delta_head_b)[..., 0]

    if not np.all(np.isfinite(delta)):
        raise NumericError(f"Non-finite disparity increment at iteration {iteration}", index=iteration)
    return RefineState(disparity=_clamp(state.disparity + delta, width), hidden=hidden)


def upsample_disparity(d: NDArray[Any], factor: int = DOWNSAMPLE, jump: float | None = None) -> Array:
    """
    Bilinear upsampling with half-pixel centres and clamped edges; values are
    multiplied by ``factor`` to express them in full-resolution pixels.

    With ``jump`` set, a full-resolution pixel whose four bilinear neighbours
    spread by more than ``jump`` (low-resolution units) takes the value of the
    low-resolution cell containing it, so depth edges stay sharp.
    """
    low = np.asarray(d, dtype=np.float64)
    if low.ndim != 2:
        raise ShapeError(f"Disparity must be 2D, got {low.shape}")

    def axis_weights(n: int) -> tuple[NDArray[np.intp], NDArray[np.intp], Array]:
        src = np.clip((np.arange(n * factor) + 0.5) / factor - 0.5, 0.0, n - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, src - lo

    r0, r1, rt = axis_weights(low.shape[0])
    c0, c1, ct = axis_weights(low.shape[1])
    rows = (1.0 - rt)[:, None] * low[r0] + rt[:, None] * low[r1]
    full = (1.0 - ct) * rows[:, c0] + ct * rows[:, c1]
    if jump is not None:
        corners = np.stack([low[r0][:, c0], low[r0][:, c1], low[r1][:, c0], low[r1][:, c1]])
        edge = corners.max(axis=0) - corners.min(axis=0) > jump
        cells = np.arange(low.shape[0] * factor) // factor, np.arange(low.shape[1] * factor) // factor
        full = np.where(edge, low[cells[0]][:, cells[1]], full)
    return full * factor


def prepare_mono_init(mono: NDArray[Any], full_shape: tuple[int, int]) -> Array:
    """Full-resolution maps are area-downsampled and divided by 4; quarter-resolution maps pass through."""
    data = np.asarray(mono, dtype=np.float64)
    height, width = full_shape
    if data.shape == (height, width):
        return area_downsample(data) / DOWNSAMPLE
    if data.shape == (height // DOWNSAMPLE, width // DOWNSAMPLE):
        return data
    raise ShapeError(
        f"Monocular disparity {data.shape} matches neither {full_shape} nor its quarter resolution"
    )


@dataclass(frozen=True)
class RefinementResult:
    disparity: Array  # full resolution
    quarter: Array
    snapshots: list[Array] = field(default_factory=list)
    pyramid: CorrPyramid | None = None


def run_refinement(
    img_l: NDArray[Any],
    img_r: NDArray[Any],
    weights: UpdateWeights | None,
    iters: int = 32,
    cfg: RefineConfig | None = None,
    mode: RefineMode = RefineMode.LEARNED,
    extractor: ExtractorConfig | None = None,
    extractor_weights: ExtractorWeights | None = None,
    mono_init: NDArray[Any] | None = None,
    return_snapshots: bool = False,
    map_fn: MapFn | None = None,
    progress: bool = False,
) -> RefinementResult:
    """
    Full pipeline: features, correlation pyramid, state init, ``iters`` updates
    and x4 upsampling.

    Args:
        img_l, img_r: rectified [H x W x 3] pair in [0, 1]
        weights: update weights; may be None in oracle mode
        iters: number of update steps
        cfg: refinement configuration
        mode: learned updates or the winner-take-all oracle
        extractor: feature extractor settings
        extractor_weights: learned-mode feature weights
        mono_init: optional monocular disparity, full or quarter resolution
        return_snapshots: keep the full-resolution disparity after every iteration
        map_fn: executor map for the directional scans
        progress: show a progress bar

    Returns:
        Full-resolution disparity, its quarter-resolution source and snapshots
    """
    cfg = cfg or RefineConfig()
    left = np.asarray(img_l, dtype=np.float64)
    right = np.asarray(img_r, dtype=np.float64)
    if left.shape != right.shape:
        raise ShapeError(f"Stereo pair shapes differ: {left.shape} vs {right.shape}")
    if iters < 0:
        raise ConfigError(f"iters must be >= 0, got {iters}")
    if mode is RefineMode.LEARNED and weights is None:
        raise ConfigError("Learned refinement needs update weights")

    feat_l = extract(left, extractor, extractor_weights)
    feat_r = extract(right, extractor, extractor_weights)
    pyr = build_pyramid(build_correlation(feat_l, feat_r), cfg.corr.num_levels)

    mono = None if mono_init is None else prepare_mono_init(mono_init, left.shape[:2])
    if weights is not None:
        state = init_state(feat_l, mono, weights)
    else:
        height, width = feat_l.shape[:2]
        disparity = np.zeros((height, width)) if mono is None else _clamp(mono, width)
        state = RefineState(disparity=disparity, hidden=np.zeros((height, width, 0)))

    snapshots: list[Array] = []
    for t in tqdm(range(iters), desc="Refining", disable=bar_disabled(progress)):
        state = update_step(
            state,
            pyr,
            weights,
            r=cfg.corr.radius,
            mode=mode,
            scan=cfg.scan,
            iteration=t,
            subpixel=cfg.subpixel,
            map_fn=map_fn,
            support=cfg.oracle_support,
        )
        logger.debug(f"[RefineRunner] iteration {t + 1}/{iters} mean d={state.disparity.mean():.4f}")
        if return_snapshots:
            snapshots.append(upsample_disparity(state.disparity, jump=cfg.upsample_jump))

    return RefinementResult(
        disparity=upsample_disparity(state.disparity, jump=cfg.upsample_jump),
        quarter=state.disparity,
        snapshots=snapshots,
        pyramid=pyr,
    )


def sequence_loss(
    predictions: list[NDArray[Any]],
    gt: NDArray[Any],
    valid: NDArray[np.bool_] | None = None,
    gamma: float = RefineConfig.loss_gamma,
) -> float:
    """sum_i gamma^(n - 1 - i) * mean |d_i - gt| over valid pixels; later iterations weigh more."""
    if not predictions:
        raise ConfigError("sequence_loss needs at least one prediction")
    target = np.asarray(gt, dtype=np.float64)
    mask = np.ones(target.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if mask.shape != target.shape:
        raise ShapeError(f"Mask {mask.shape} does not match ground truth {target.shape}")
    if not mask.any():
        raise EmptyMaskError("sequence_loss mask selects no pixels")

    n = len(predictions)
    loss = 0.0
    for i, pred in enumerate(predictions):
        d = np.asarray(pred, dtype=np.float64)
        if d.shape != target.shape:
            raise ShapeError(f"Prediction {i} has shape {d.shape}, expected {target.shape}")
        loss += gamma ** (n - 1 - i) * float(np.abs(d - target)[mask].mean())
    return loss


def training_loss(
    img_l: NDArray[Any],
    img_r: NDArray[Any],
    gt: NDArray[Any],
    weights: UpdateWeights | None,
    cfg: RefineConfig | None = None,
    valid: NDArray[np.bool_] | None = None,
    mode: RefineMode = RefineMode.LEARNED,
    extractor: ExtractorConfig | None = None,
    map_fn: MapFn | None = None,
) -> float:
    """
    The training objective evaluated without gradients: ``cfg.iters_train``
    updates, every full-resolution iterate scored by ``sequence_loss`` with
    ``cfg.loss_gamma``.
    """
    cfg = cfg or RefineConfig()
    result = run_refinement(
        img_l,
        img_r,
        weights,
        iters=cfg.iters_train,
        cfg=cfg,
        mode=mode,
        extractor=extractor,
        return_snapshots=True,
        map_fn=map_fn,
    )
    return sequence_loss(result.snapshots, gt, valid, gamma=cfg.loss_gamma)
