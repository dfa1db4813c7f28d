"""
Four-directional cross-scan over [H x W x C] feature maps and the ConvSS2D block.

Addressing is row-major: pixel (i, j) sits at flat index i * W + j.

    RowLR  row-major order
    RowRL  RowLR reversed end-to-end
    ColTB  column-major order
    ColBT  ColTB reversed end-to-end

The block runs depthwise 3x3 conv -> SiLU -> cross-scan -> per-direction
selective scan -> merge -> channel LayerNorm -> SiLU gate -> output projection.
"""
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from numpy.typing import NDArray

from tools.config import ScanConfig, ScanPattern, SSMConfig
from tools.errors import NumericError, ShapeError
from tools.ssm_core import SelectiveParams, run_scan

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]
# [H x W x C]
FeatureMap2D = NDArray[Any]

LAYER_NORM_EPS = 1e-5

# Runs independent jobs, e.g. ``ThreadPoolExecutor.map``; results keep input order.
MapFn = Callable[[Callable[[int], Array], Sequence[int]], Any]


class ScanDirection(Enum):
    ROW_LR = 0
    ROW_RL = 1
    COL_TB = 2
    COL_BT = 3

    @property
    def is_row(self) -> bool:
        return self in (ScanDirection.ROW_LR, ScanDirection.ROW_RL)


PATTERN_DIRECTIONS: dict[ScanPattern, tuple[ScanDirection, ...]] = {
    ScanPattern.UNIDIRECTIONAL: (ScanDirection.ROW_LR,),
    ScanPattern.BIDIRECTIONAL: (ScanDirection.ROW_LR, ScanDirection.ROW_RL),
    ScanPattern.CROSS: tuple(ScanDirection),
}


def silu(x: Array) -> Array:
    return x / (1.0 + np.exp(-x))


def direction_permutation(direction: ScanDirection, height: int, width: int) -> NDArray[np.intp]:
    """Flat pixel index visited at each sequence position."""
    grid = np.arange(height * width).reshape(height, width)
    order = grid.ravel() if direction.is_row else grid.T.ravel()
    if direction in (ScanDirection.ROW_RL, ScanDirection.COL_BT):
        order = order[::-1]
    return np.ascontiguousarray(order)


@dataclass(frozen=True)
class CrossScanBundle:
    seqs: tuple[Array, ...]
    perms: tuple[NDArray[np.intp], ...]
    inverse_perms: tuple[NDArray[np.intp], ...]
    height: int
    width: int
    directions: tuple[ScanDirection, ...] = tuple(ScanDirection)

    def line_length(self, direction: ScanDirection) -> int:
        return self.width if direction.is_row else self.height


def _check_map(f: FeatureMap2D) -> Array:
    data = np.asarray(f, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] < 1 or data.shape[1] < 1:
        raise ShapeError(f"Feature map must be [H x W x C] with H, W >= 1, got {data.shape}")
    return data


def cross_expand(f: FeatureMap2D) -> CrossScanBundle:
    data = _check_map(f)
    height, width, channels = data.shape
    flat = data.reshape(height * width, channels)
    perms = tuple(direction_permutation(d, height, width) for d in ScanDirection)
    inverse = tuple(np.argsort(perm) for perm in perms)
    return CrossScanBundle(
        seqs=tuple(flat[perm] for perm in perms),
        perms=perms,
        inverse_perms=inverse,
        height=height,
        width=width,
    )


def cross_merge(
    outputs: Sequence[NDArray[Any]],
    inverse_perms: Sequence[NDArray[np.intp]],
    height: int,
    width: int,
) -> Array:
    """Un-permute each directional output to [H x W x C] and sum them."""
    if not outputs or len(outputs) != len(inverse_perms):
        raise ShapeError(
            f"cross_merge needs one inverse permutation per output, got {len(outputs)} and {len(inverse_perms)}"
        )
    length = height * width
    merged: Array | None = None
    for out, inverse in zip(outputs, inverse_perms):
        seq = np.asarray(out, dtype=np.float64)
        if seq.ndim != 2 or seq.shape[0] != length or inverse.shape != (length,):
            raise ShapeError(f"Directional output has shape {seq.shape}, expected [{length} x C]")
        restored = seq[inverse]
        merged = restored if merged is None else merged + restored
    assert merged is not None
    return merged.reshape(height, width, -1)


def dwconv3x3(f: FeatureMap2D, kernel: NDArray[Any], bias: NDArray[Any]) -> Array:
    """Depthwise 3x3 convolution with zero padding; kernel [C x 3 x 3]."""
    data = _check_map(f)
    height, width, _ = data.shape
    padded = np.pad(data, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros_like(data)
    for di in range(3):
        for dj in range(3):
            out += padded[di : di + height, dj : dj + width] * kernel[:, di, dj]
    return out + bias


def layer_norm(x: Array, scale: Array, shift: Array) -> Array:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + LAYER_NORM_EPS) * scale + shift


@dataclass(frozen=True)
class ConvSS2DWeights:
    dw_kernel: Array  # [C x 3 x 3]
    dw_bias: Array  # [C]
    gate_w: Array  # [C x C]
    gate_b: Array
    out_w: Array  # [C x C]
    out_b: Array
    norm_scale: Array
    norm_shift: Array
    directions: tuple[SelectiveParams, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        channels = self.dw_bias.shape[0]
        expected = {
            "dw_kernel": (channels, 3, 3),
            "gate_w": (channels, channels),
            "gate_b": (channels,),
            "out_w": (channels, channels),
            "out_b": (channels,),
            "norm_scale": (channels,),
            "norm_shift": (channels,),
        }
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ShapeError(f"ConvSS2D {name} must be {shape}, got {np.shape(getattr(self, name))}")
        if len(self.directions) != 4:
            raise ShapeError(f"ConvSS2D needs 4 direction parameter sets, got {len(self.directions)}")
        for k, params in enumerate(self.directions):
            if params.channels != channels:
                raise ShapeError(f"Direction {k} parameters have {params.channels} channels, expected {channels}")
        if not all(np.all(np.isfinite(getattr(self, name))) for name in expected):
            raise NumericError("ConvSS2D weights contain non-finite entries")

    @property
    def channels(self) -> int:
        return int(self.dw_bias.shape[0])

    @classmethod
    def initialize(
        cls, channels: int, rng: np.random.Generator, ssm: SSMConfig | None = None
    ) -> "ConvSS2DWeights":
        scale = 1.0 / np.sqrt(channels)
        return cls(
            dw_kernel=rng.normal(0.0, 1.0 / 3.0, size=(channels, 3, 3)),
            dw_bias=np.zeros(channels),
            gate_w=rng.normal(0.0, scale, size=(channels, channels)),
            gate_b=np.zeros(channels),
            out_w=rng.normal(0.0, scale, size=(channels, channels)),
            out_b=np.zeros(channels),
            norm_scale=np.ones(channels),
            norm_shift=np.zeros(channels),
            directions=tuple(SelectiveParams.initialize(channels, rng, ssm) for _ in range(4)),
        )

    def to_tensors(self, prefix: str = "ss2d") -> dict[str, Array]:
        tensors: dict[str, Array] = {}
        for k, params in enumerate(self.directions):
            tensors.update(params.to_tensors(f"{prefix}.dir{k}"))
        tensors.update(
            {
                f"{prefix}.dwconv.weight": self.dw_kernel,
                f"{prefix}.dwconv.bias": self.dw_bias,
                f"{prefix}.gate.weight": self.gate_w,
                f"{prefix}.gate.bias": self.gate_b,
                f"{prefix}.out.weight": self.out_w,
                f"{prefix}.out.bias": self.out_b,
                f"{prefix}.norm.scale": self.norm_scale,
                f"{prefix}.norm.shift": self.norm_shift,
            }
        )
        return tensors

    @classmethod
    def from_tensors(cls, tensors: dict[str, NDArray[Any]], prefix: str = "ss2d") -> "ConvSS2DWeights":
        def get(name: str) -> Array:
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise ShapeError(f"Archive is missing {key}")
            return np.asarray(tensors[key], dtype=np.float64)

        return cls(
            dw_kernel=get("dwconv.weight"),
            dw_bias=get("dwconv.bias"),
            gate_w=get("gate.weight"),
            gate_b=get("gate.bias"),
            out_w=get("out.weight"),
            out_b=get("out.bias"),
            norm_scale=get("norm.scale"),
            norm_shift=get("norm.shift"),
            directions=tuple(
                SelectiveParams.from_tensors(tensors, f"{prefix}.dir{k}") for k in range(4)
            ),
        )


def scan_direction(
    bundle: CrossScanBundle,
    direction: ScanDirection,
    params: SelectiveParams,
    cfg: ScanConfig,
) -> Array:
    """Selective scan of one direction; line-reset mode scans each row/column independently."""
    seq = bundle.seqs[direction.value]
    if not cfg.line_reset:
        y, _ = run_scan(seq, params, impl=cfg.impl)
        return np.asarray(y, dtype=np.float64)
    line = bundle.line_length(direction)
    lines = seq.reshape(-1, line, seq.shape[-1])
    y, _ = run_scan(lines, params, impl=cfg.impl)
    return np.asarray(y, dtype=np.float64).reshape(seq.shape)


def _serial_map(fn: Callable[[int], Array], items: Sequence[int]) -> list[Array]:
    return [fn(item) for item in items]


def convss2d_forward(
    f: FeatureMap2D,
    w: ConvSS2DWeights,
    cfg: ScanConfig | None = None,
    map_fn: MapFn | None = None,
) -> NDArray[Any]:
    """
    ConvSS2D block, [H x W x C] -> [H x W x C].

    Args:
        f: input feature map
        w: block weights
        cfg: scan pattern, line-reset mode and scan implementation
        map_fn: optional executor map used to run the directional scans concurrently
    """
    cfg = cfg or ScanConfig()
    data = _check_map(f)
    if data.shape[2] != w.channels:
        raise ShapeError(f"Feature map has {data.shape[2]} channels, weights expect {w.channels}")
    height, width, _ = data.shape

    u = silu(dwconv3x3(data, w.dw_kernel, w.dw_bias))
    bundle = cross_expand(u)
    directions = PATTERN_DIRECTIONS[cfg.pattern]

    def scan_one(k: int) -> Array:
        d = directions[k]
        return scan_direction(bundle, d, w.directions[d.value], cfg)

    outputs = list((map_fn or _serial_map)(scan_one, range(len(directions))))
    merged = cross_merge(
        outputs, [bundle.inverse_perms[d.value] for d in directions], height, width
    )

    y = layer_norm(merged, w.norm_scale, w.norm_shift)
    y = y * silu(data @ w.gate_w.T + w.gate_b)
    out = y @ w.out_w.T + w.out_b

    finite = np.isfinite(out).all(axis=-1)
    if not finite.all():
        i, j = (int(v) for v in np.argwhere(~finite)[0])
        raise NumericError(f"ConvSS2D produced a non-finite value at pixel ({i}, {j})", index=(i, j))
    return out.astype(_storage_dtype(f))


def _storage_dtype(f: FeatureMap2D) -> np.dtype[Any]:
    dtype = np.asarray(f).dtype
    return dtype if dtype in (np.float32, np.float64) else np.dtype(np.float64)
