# runtime.py
import logging
import os
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Any, TypeVar

import numpy as np
from numpy.typing import NDArray

from tools.errors import ConfigError

logger = logging.getLogger(__name__)

THREADS_ENV = "SSA2_THREADS"

T = TypeVar("T")
R = TypeVar("R")


class Precision(Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype[Any]:
        return np.dtype(np.float32 if self is Precision.F32 else np.float64)


def resolve_threads(threads: int) -> int:
    """0 means auto: $SSA2_THREADS, then the CPU count."""
    if threads < 0:
        raise ConfigError(f"--threads must be >= 0, got {threads}")
    if threads > 0:
        return threads
    env = os.getenv(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from e
        if value < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1, got {value}")
        return value
    return os.cpu_count() or 1


class RuntimeClient:
    """Seed, output precision and the worker pool shared by one CLI invocation."""

    def __init__(self, seed: int = 0, precision: Precision = Precision.F32, threads: int = 0) -> None:
        if seed < 0 or seed >= 2**64:
            raise ConfigError(f"--seed must be a u64, got {seed}")
        self.seed = seed
        self.precision = precision
        self.threads = resolve_threads(threads)
        self._executor: ThreadPoolExecutor | None = None

    def rng(self, stream: int = 0) -> np.random.Generator:
        """Independent generator per named stream, reproducible from the seed."""
        return np.random.default_rng([self.seed, stream])

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        """Ordered map over the worker pool; serial with a single thread."""
        if self.threads == 1:
            return [fn(item) for item in items]
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self.threads)
            logger.info(f"[RuntimeClient] Started pool with {self.threads} threads")
        return list(self._executor.map(fn, items))

    def cast(self, array: NDArray[Any]) -> NDArray[Any]:
        return np.asarray(array).astype(self.precision.dtype)

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self) -> "RuntimeClient":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
