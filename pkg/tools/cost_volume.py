"""
Epipolar correlation volume, average-pooled pyramid, interpolated lookup and a
winner-take-all disparity oracle.

Convention: a left pixel (i, j) with disparity d >= 0 matches right column
k = j - d on the same row.
"""
import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import NDArray

from tools.config import CorrConfig
from tools.errors import ShapeError

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]


@dataclass(frozen=True)
class CorrelationVolume:
    # [H x W x W], indexed (row i, left col j, right col k)
    volume: Array
    feature_dim: int

    @property
    def height(self) -> int:
        return int(self.volume.shape[0])

    @property
    def width(self) -> int:
        return int(self.volume.shape[1])


@dataclass(frozen=True)
class CorrPyramid:
    """Level ``l`` (0-based) has shape [H x W x floor(W / 2^l)]."""

    levels: tuple[Array, ...]
    omitted_levels: tuple[int, ...] = field(default_factory=tuple)

    @property
    def num_levels(self) -> int:
        return len(self.levels) + len(self.omitted_levels)

    def to_tensors(self, prefix: str = "corr") -> dict[str, NDArray[np.float32]]:
        return {
            f"{prefix}.level{l + 1}": level.astype(np.float32) for l, level in enumerate(self.levels)
        }


@dataclass(frozen=True)
class DisparityMap:
    disparity: Array  # [H x W], pixels at the map's resolution
    valid: NDArray[np.bool_]

    @classmethod
    def full(cls, disparity: NDArray[Any]) -> "DisparityMap":
        d = np.asarray(disparity, dtype=np.float64)
        return cls(disparity=d, valid=np.ones(d.shape, dtype=bool))


def build_correlation(f_l: NDArray[Any], f_r: NDArray[Any]) -> CorrelationVolume:
    """
    c[i, j, k] = sum_d f_l[i, j, d] * f_r[i, k, d], unnormalized.

    Channels are accumulated one at a time in index order, so the result is
    bitwise identical to a plain nested loop over (i, j, k, d).
    """
    left = np.asarray(f_l, dtype=np.float64)
    right = np.asarray(f_r, dtype=np.float64)
    if left.shape != right.shape or left.ndim != 3:
        raise ShapeError(f"Feature maps must share an [H x W x D] shape, got {left.shape} and {right.shape}")
    height, width, depth = left.shape
    if depth < 1:
        raise ShapeError("Feature maps need at least one channel")

    volume = np.zeros((height, width, width))
    for d in range(depth):
        volume += left[:, :, d, None] * right[:, None, :, d]
    return CorrelationVolume(volume=volume, feature_dim=depth)


def pool_last_axis(level: Array) -> Array:
    """Mean of adjacent pairs along the last axis; an odd trailing element is dropped."""
    pairs = level.shape[-1] // 2
    return 0.5 * (level[..., 0 : 2 * pairs : 2] + level[..., 1 : 2 * pairs : 2])


def build_pyramid(c: CorrelationVolume, num_levels: int = 4) -> CorrPyramid:
    levels = [c.volume]
    omitted: list[int] = []
    for l in range(1, num_levels):
        if levels[-1].shape[-1] < 2:
            omitted = list(range(l, num_levels))
            logger.warning(
                f"[CorrPyramid] Width {c.width} too small; omitting levels {[o + 1 for o in omitted]}"
            )
            break
        levels.append(pool_last_axis(levels[-1]))
    return CorrPyramid(levels=tuple(levels), omitted_levels=tuple(omitted))


def _sample_zero_outside(level: Array, positions: Array) -> Array:
    """Linear interpolation along the last axis; taps outside [0, W_l - 1] read as 0."""
    width = level.shape[-1]
    k0 = np.floor(positions)
    frac = positions - k0
    k0i = k0.astype(np.intp)
    k1i = k0i + 1

    def tap(k: NDArray[np.intp]) -> Array:
        inside = (k >= 0) & (k < width)
        values = np.take_along_axis(level, np.clip(k, 0, width - 1), axis=-1)
        return np.where(inside, values, 0.0)

    return (1.0 - frac) * tap(k0i) + frac * tap(k1i)


def lookup(pyr: CorrPyramid, d_map: DisparityMap | NDArray[Any], r: int = 4) -> Array:
    """
    Sample every pyramid level around the current disparity.

    Level l (0-based) is read at the pooled right column (j - d) / 2^l + o for
    o in [-r, r]. Output channels are level-major, offset-minor:
    channel = l * (2r + 1) + (o + r). Omitted levels yield zero channels.
    """
    if r < 0:
        raise ShapeError(f"Lookup radius must be >= 0, got {r}")
    disparity = d_map.disparity if isinstance(d_map, DisparityMap) else np.asarray(d_map, dtype=np.float64)
    base = pyr.levels[0]
    height, width = base.shape[:2]
    if disparity.shape != (height, width):
        raise ShapeError(f"Disparity map {disparity.shape} does not match volume {(height, width)}")

    taps = 2 * r + 1
    offsets = np.arange(-r, r + 1, dtype=np.float64)
    columns = np.arange(width, dtype=np.float64)[None, :]
    out = np.zeros((height, width, pyr.num_levels * taps))
    for l, level in enumerate(pyr.levels):
        centre = (columns - disparity) / float(2**l)
        positions = centre[:, :, None] + offsets
        out[:, :, l * taps : (l + 1) * taps] = _sample_zero_outside(level, positions)
    return out


def parabola_offset(c_prev: NDArray[Any], c_peak: NDArray[Any], c_next: NDArray[Any]) -> Array:
    """Vertex offset of the parabola through three samples; 0 where the fit is not a maximum."""
    denom = np.asarray(c_prev - 2.0 * c_peak + c_next, dtype=np.float64)
    concave = denom < 0.0
    safe = np.where(concave, denom, -1.0)
    return np.where(concave, 0.5 * (c_prev - c_next) / safe, 0.0)


def wta_disparity(c: CorrelationVolume, subpixel: bool = True) -> DisparityMap:
    """
    Winner-take-all disparity, k* = argmax over k <= j with ties toward larger k.

    With ``subpixel`` the peak is refined by a parabola fit when both
    neighbours of k* are admissible candidates.
    """
    volume = c.volume
    height, width = volume.shape[:2]
    j = np.arange(width)
    admissible = j[None, :] <= j[:, None]  # [j, k]
    masked = np.where(admissible[None], volume, -np.inf)

    # argmax returns the first maximum; search the reversed axis so ties go to larger k
    k_star = (width - 1) - np.argmax(masked[..., ::-1], axis=-1)
    peak = k_star.astype(np.float64)

    if subpixel:
        interior = (k_star >= 1) & (k_star + 1 <= j[None, :])
        k_prev = np.clip(k_star - 1, 0, width - 1)[..., None]
        k_next = np.clip(k_star + 1, 0, width - 1)[..., None]
        c_prev = np.take_along_axis(volume, k_prev, axis=-1)[..., 0]
        c_peak = np.take_along_axis(volume, k_star[..., None], axis=-1)[..., 0]
        c_next = np.take_along_axis(volume, k_next, axis=-1)[..., 0]
        peak = peak + np.where(interior, parabola_offset(c_prev, c_peak, c_next), 0.0)

    disparity = np.clip(j[None, :] - peak, 0.0, width - 1)
    return DisparityMap(disparity=disparity, valid=np.ones((height, width), dtype=bool))


def shiftable_max(c: CorrelationVolume, radius: int) -> CorrelationVolume:
    """
    Best score over support windows shifted by up to ``radius`` rows and columns.

    out[i, j, k] = max over |s|, |t| <= radius of c[i + s, j + t, k + t], over
    in-range shifts only. Every candidate keeps its disparity j - k. A pixel
    next to a depth edge is scored by a window lying on its own surface.
    """
    if radius < 0:
        raise ShapeError(f"Support radius must be >= 0, got {radius}")
    if radius == 0:
        return c
    volume = c.volume
    height, width = volume.shape[:2]
    padded = np.pad(volume, ((radius, radius), (radius, radius), (radius, radius)), constant_values=-np.inf)
    out = np.full(volume.shape, -np.inf)
    for s in range(-radius, radius + 1):
        rows = slice(radius + s, radius + s + height)
        for t in range(-radius, radius + 1):
            cols = slice(radius + t, radius + t + width)
            np.maximum(out, padded[rows, cols, cols], out=out)
    return CorrelationVolume(volume=out, feature_dim=c.feature_dim)


def correlation_pyramid(f_l: NDArray[Any], f_r: NDArray[Any], cfg: CorrConfig | None = None) -> CorrPyramid:
    cfg = cfg or CorrConfig()
    return build_pyramid(build_correlation(f_l, f_r), cfg.num_levels)
