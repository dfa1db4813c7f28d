"""
Quarter-resolution feature extractors used in place of a pretrained encoder.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray

from tools.errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
DOWNSAMPLE = 4
NORM_EPS = 1e-12


class ExtractorMode(Enum):
    PATCH = "patch"
    LEARNED = "learned"


@dataclass(frozen=True)
class ExtractorConfig:
    mode: ExtractorMode = ExtractorMode.PATCH
    patch_window: int = 5
    channels: int = 64
    seed: int = 0
    # opt-in zero-mean, unit-L2 vectors; correlation then becomes a normalized cross-correlation
    normalize: bool = False

    def __post_init__(self) -> None:
        if self.patch_window < 1 or self.patch_window % 2 == 0:
            raise ConfigError(f"patch_window must be a positive odd integer, got {self.patch_window}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")

    @property
    def out_channels(self) -> int:
        return self.patch_window**2 if self.mode is ExtractorMode.PATCH else self.channels


@dataclass(frozen=True)
class ExtractorWeights:
    conv1_w: Array  # [C x 3 x 3 x 3], (out, in, kh, kw)
    conv1_b: Array
    conv2_w: Array  # [C x C x 3 x 3]
    conv2_b: Array

    @property
    def channels(self) -> int:
        return int(self.conv2_b.shape[0])

    @classmethod
    def initialize(cls, channels: int, seed: int) -> "ExtractorWeights":
        rng = np.random.default_rng(seed)
        return cls(
            conv1_w=rng.normal(0.0, np.sqrt(2.0 / 27.0), size=(channels, 3, 3, 3)),
            conv1_b=np.zeros(channels),
            conv2_w=rng.normal(0.0, np.sqrt(2.0 / (9.0 * channels)), size=(channels, channels, 3, 3)),
            conv2_b=np.zeros(channels),
        )

    def to_tensors(self, prefix: str = "feat") -> dict[str, Array]:
        return {
            f"{prefix}.conv1.weight": self.conv1_w,
            f"{prefix}.conv1.bias": self.conv1_b,
            f"{prefix}.conv2.weight": self.conv2_w,
            f"{prefix}.conv2.bias": self.conv2_b,
        }

    @classmethod
    def from_tensors(cls, tensors: dict[str, NDArray[Any]], prefix: str = "feat") -> "ExtractorWeights":
        names = ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias")
        missing = [n for n in names if f"{prefix}.{n}" not in tensors]
        if missing:
            raise ShapeError(f"Archive is missing {', '.join(f'{prefix}.{m}' for m in missing)}")
        weights = cls(*(np.asarray(tensors[f"{prefix}.{n}"], dtype=np.float64) for n in names))
        channels = weights.channels
        if weights.conv1_w.shape != (channels, 3, 3, 3) or weights.conv2_w.shape != (channels, channels, 3, 3):
            raise ShapeError(
                f"Feature conv weights have shapes {weights.conv1_w.shape} and {weights.conv2_w.shape}"
            )
        return weights


def to_gray(image: Array) -> Array:
    return image @ GRAY_WEIGHTS


def area_downsample(plane: NDArray[Any], factor: int = DOWNSAMPLE) -> Array:
    """Mean over non-overlapping factor x factor blocks of the two leading axes."""
    data = np.asarray(plane, dtype=np.float64)
    height, width = data.shape[:2]
    if height % factor or width % factor:
        raise ShapeError(f"Map {height}x{width} is not divisible by {factor}")
    blocks = data.reshape(height // factor, factor, width // factor, factor, *data.shape[2:])
    return blocks.mean(axis=(1, 3))


def _normalize(features: Array, valid: NDArray[np.bool_] | None = None) -> Array:
    """Zero mean, unit L2 per pixel, computed over the taps flagged in ``valid``; other taps become 0."""
    if valid is None:
        valid = np.ones(features.shape, dtype=bool)
    count = np.maximum(valid.sum(axis=-1, keepdims=True), 1)
    mean = np.where(valid, features, 0.0).sum(axis=-1, keepdims=True) / count
    centred = np.where(valid, features - mean, 0.0)
    norm = np.linalg.norm(centred, axis=-1, keepdims=True)
    # flat neighbourhoods carry only rounding noise
    return np.where(norm > NORM_EPS, centred / np.maximum(norm, NORM_EPS), 0.0)


def _windows(plane: Array, window: int) -> Array:
    padded = np.pad(plane, window // 2)
    patches = sliding_window_view(padded, (window, window))
    return patches.reshape(plane.shape[0], plane.shape[1], window * window).astype(np.float64)


def patch_features(image: Array, window: int) -> tuple[Array, NDArray[np.bool_]]:
    """Zero-padded window x window neighbourhoods of the quarter-resolution gray image, and which taps lie inside it."""
    gray = area_downsample(to_gray(image))
    inside = _windows(np.ones_like(gray), window) > 0.5
    return _windows(gray, window), inside


def conv3x3_stride2(x: Array, weight: Array, bias: Array) -> Array:
    """3x3 convolution, zero padding 1, stride 2; x is [H x W x C_in]."""
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(padded, (3, 3), axis=(0, 1))[::2, ::2]
    # windows: [H/2 x W/2 x C_in x 3 x 3]
    return np.einsum("hwcij,ocij->hwo", windows, weight) + bias


def learned_features(image: Array, weights: ExtractorWeights) -> Array:
    hidden = np.maximum(conv3x3_stride2(image, weights.conv1_w, weights.conv1_b), 0.0)
    return np.maximum(conv3x3_stride2(hidden, weights.conv2_w, weights.conv2_b), 0.0)


def extract(
    image: NDArray[Any],
    cfg: ExtractorConfig | None = None,
    weights: ExtractorWeights | None = None,
) -> Array:
    """
    Extract an [H/4 x W/4 x C] feature map from an [H x W x 3] image.

    Args:
        image: RGB image with values in [0, 1]
        cfg: extractor settings
        weights: learned-mode weights; seeded from ``cfg.seed`` when absent

    Returns:
        Feature map, C = patch_window^2 in patch mode and cfg.channels in learned mode
    """
    cfg = cfg or ExtractorConfig()
    data = np.asarray(image, dtype=np.float64)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ShapeError(f"Image must be [H x W x 3], got {data.shape}")
    if data.shape[0] % DOWNSAMPLE or data.shape[1] % DOWNSAMPLE or 0 in data.shape:
        raise ShapeError(f"Image size {data.shape[0]}x{data.shape[1]} is not divisible by {DOWNSAMPLE}")
    if not np.all(np.isfinite(data)):
        raise NumericError("Image contains non-finite values")

    valid: NDArray[np.bool_] | None = None
    if cfg.mode is ExtractorMode.PATCH:
        features, valid = patch_features(data, cfg.patch_window)
    else:
        weights = weights or ExtractorWeights.initialize(cfg.channels, cfg.seed)
        features = learned_features(data, weights)

    return _normalize(features, valid) if cfg.normalize else features
