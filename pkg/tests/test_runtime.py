import numpy as np
import pytest

from client.runtime import THREADS_ENV, Precision, RuntimeClient, resolve_threads
from tools.errors import ConfigError
from tools.progress import bar_disabled


class TestResolveThreads:
    def test_explicit_value_wins(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "7")

        assert resolve_threads(3) == 3

    def test_environment_when_auto(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "5")

        assert resolve_threads(0) == 5

    def test_cpu_count_fallback(self, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)

        assert resolve_threads(0) >= 1

    @pytest.mark.parametrize("value", ["zero", "0", "-2"])
    def test_bad_environment(self, monkeypatch, value):
        monkeypatch.setenv(THREADS_ENV, value)

        with pytest.raises(ConfigError):
            resolve_threads(0)

    def test_negative(self):
        with pytest.raises(ConfigError):
            resolve_threads(-1)


class TestRuntimeClient:
    def test_streams_are_reproducible_and_distinct(self):
        client = RuntimeClient(seed=42, threads=1)

        first = client.rng(1).normal(size=4)
        assert np.array_equal(first, RuntimeClient(seed=42, threads=1).rng(1).normal(size=4))
        assert not np.array_equal(first, client.rng(2).normal(size=4))

    def test_map_keeps_order(self):
        with RuntimeClient(threads=4) as client:
            assert client.map(lambda x: x * x, range(20)) == [x * x for x in range(20)]

    def test_serial_map(self):
        client = RuntimeClient(threads=1)

        assert client.map(str, [3, 1, 2]) == ["3", "1", "2"]
        assert client._executor is None

    def test_cast(self):
        client = RuntimeClient(precision=Precision.F32, threads=1)

        assert client.cast(np.ones(3)).dtype == np.float32
        assert RuntimeClient(precision=Precision.F64, threads=1).cast(np.ones(3, dtype=np.float32)).dtype == np.float64

    def test_default_precision_is_single(self):
        assert RuntimeClient(threads=1).cast(np.ones(3)).dtype == np.float32

    def test_seed_range(self):
        with pytest.raises(ConfigError):
            RuntimeClient(seed=-1)


class TestProgress:
    def test_bar_disabled(self):
        assert bar_disabled(False) is True
        # None leaves the tty check to tqdm
        assert bar_disabled(True) is None
