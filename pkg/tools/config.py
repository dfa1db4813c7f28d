"""
Default configuration for the scan, correlation and refinement stages.
"""
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any

from tools.errors import ConfigError


class ScanPattern(Enum):
    UNIDIRECTIONAL = "uni"
    BIDIRECTIONAL = "bi"
    CROSS = "cross"


class ScanImpl(Enum):
    SEQUENTIAL = "seq"
    PARALLEL = "par"


@dataclass(frozen=True)
class SSMConfig:
    d_state: int = 4
    # inner channel count = ssm_ratio * C; only the unexpanded block is built
    ssm_ratio: float = 1.0
    # softplus(b_delta) is initialised inside this interval
    delta_min: float = 1e-3
    delta_max: float = 1e-1

    def __post_init__(self) -> None:
        if self.d_state < 1:
            raise ConfigError(f"d_state must be >= 1, got {self.d_state}")
        if self.ssm_ratio != 1.0:
            raise ConfigError(f"ssm_ratio {self.ssm_ratio} is not supported; ConvSS2D keeps C inner channels")
        if not 0.0 < self.delta_min <= self.delta_max:
            raise ConfigError(f"Need 0 < delta_min <= delta_max, got {self.delta_min}, {self.delta_max}")


@dataclass(frozen=True)
class ScanConfig:
    pattern: ScanPattern = ScanPattern.CROSS
    line_reset: bool = True
    impl: ScanImpl = ScanImpl.SEQUENTIAL

    @property
    def num_directions(self) -> int:
        return {
            ScanPattern.UNIDIRECTIONAL: 1,
            ScanPattern.BIDIRECTIONAL: 2,
            ScanPattern.CROSS: 4,
        }[self.pattern]


@dataclass(frozen=True)
class CorrConfig:
    num_levels: int = 4
    radius: int = 4


@dataclass(frozen=True)
class RefineConfig:
    iters_train: int = 22
    iters_infer: int = 32
    loss_gamma: float = 0.9
    subpixel: bool = True
    hidden_channels: int = 32
    motion_channels: int = 32
    # oracle support windows may shift this many quarter pixels off-centre
    oracle_support: int = 2
    # neighbour spread (quarter px) above which upsampling keeps the containing cell; None = always bilinear
    upsample_jump: float | None = 0.5
    ssm: SSMConfig = field(default_factory=SSMConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    corr: CorrConfig = field(default_factory=CorrConfig)

    def __post_init__(self) -> None:
        if self.iters_train < 1 or self.iters_infer < 0:
            raise ConfigError(f"Invalid iteration counts {self.iters_train}/{self.iters_infer}")
        if not 0.0 < self.loss_gamma <= 1.0:
            raise ConfigError(f"loss_gamma must be in (0, 1], got {self.loss_gamma}")
        if self.oracle_support < 0:
            raise ConfigError(f"oracle_support must be >= 0, got {self.oracle_support}")
        if self.upsample_jump is not None and self.upsample_jump <= 0.0:
            raise ConfigError(f"upsample_jump must be positive, got {self.upsample_jump}")


def describe_defaults() -> dict[str, Any]:
    """Self-description of the default configuration, JSON ready."""
    cfg = RefineConfig()
    description = asdict(cfg)
    description["scan"]["pattern"] = cfg.scan.pattern.value
    description["scan"]["impl"] = cfg.scan.impl.value
    description["scan"]["num_directions"] = cfg.scan.num_directions
    return description
