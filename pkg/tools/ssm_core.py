"""
One-dimensional selective state-space scan.

For every position t of a sequence x[t, c] the input-dependent parameters are

    delta_t = softplus(W_delta x_t + b_delta)      [C]
    B_t     = W_B x_t                              [N]
    C_t     = W_C x_t                              [N]

and each (channel c, state n) pair is discretized with an exact zero-order
hold before the linear recurrence

    h_t[c, n] = exp(delta_t[c] A[c, n]) h_{t-1}[c, n] + Bbar_t[c, n] x_t[c]
    y_t[c]    = sum_n C_t[n] h_t[c, n] + D[c] x_t[c]

All kernels accumulate in float64 and accept [L x C] or batched [B x L x C]
inputs. Outputs take the floating dtype of ``x``.
"""
import logging
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import NDArray

from tools.config import ScanImpl, SSMConfig
from tools.errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]
# [L x C] sequence, or [B x L x C] for a batch of independent sequences
ScanSequence = NDArray[Any]

SERIES_THRESHOLD = 1e-4
# bounds the [chunk x C x N] working set of the long-sequence kernels
CHUNK_LENGTH = 1 << 16
PARAM_NAMES = ("a_diag", "w_delta", "b_delta", "w_b", "w_c", "d_skip")


def softplus(z: NDArray[Any]) -> Array:
    return np.logaddexp(0.0, np.asarray(z, dtype=np.float64))


def _sigmoid(z: Array) -> Array:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _phi(z: Array) -> Array:
    """(exp(z) - 1) / z with a series branch near zero; each branch sees only its own entries."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < SERIES_THRESHOLD
    out = np.empty_like(z)
    zs, zl = z[small], z[~small]
    out[small] = 1.0 + zs / 2.0 + zs * zs / 6.0
    out[~small] = np.expm1(zl) / zl
    return out


def _dphi(z: Array) -> Array:
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < SERIES_THRESHOLD
    out = np.empty_like(z)
    zs, zl = z[small], z[~small]
    out[small] = 0.5 + zs / 3.0 + zs * zs / 8.0
    out[~small] = (zl * np.exp(zl) - np.expm1(zl)) / (zl * zl)
    return out


def _out_dtype(x: NDArray[Any]) -> np.dtype[Any]:
    return x.dtype if x.dtype in (np.float32, np.float64) else np.dtype(np.float64)


@dataclass(frozen=True)
class SelectiveParams:
    """Learnable tensors of one selective-scan channel group."""

    a_diag: Array  # [C x N], strictly negative
    w_delta: Array  # [C x C]
    b_delta: Array  # [C]
    w_b: Array  # [N x C]
    w_c: Array  # [N x C]
    d_skip: Array  # [C]

    def __post_init__(self) -> None:
        for name in PARAM_NAMES:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))

        if self.a_diag.ndim != 2:
            raise ShapeError(f"a_diag must be [C x N], got shape {self.a_diag.shape}")
        channels, d_state = self.a_diag.shape
        expected = {
            "w_delta": (channels, channels),
            "b_delta": (channels,),
            "w_b": (d_state, channels),
            "w_c": (d_state, channels),
            "d_skip": (channels,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(
                    f"{name} must have shape {shape}, got {getattr(self, name).shape}"
                )
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"SelectiveParams.{name} contains non-finite entries")
        if np.any(self.a_diag >= 0.0):
            raise ConfigError("a_diag entries must be strictly negative")

    @property
    def channels(self) -> int:
        return int(self.a_diag.shape[0])

    @property
    def d_state(self) -> int:
        return int(self.a_diag.shape[1])

    @classmethod
    def initialize(
        cls, channels: int, rng: np.random.Generator, cfg: SSMConfig | None = None
    ) -> "SelectiveParams":
        """
        Seeded initialization.

        a_diag[c, n] = -(n + 1); b_delta is the inverse softplus of a step drawn
        log-uniformly from [cfg.delta_min, cfg.delta_max]; D starts at zero.
        """
        cfg = cfg or SSMConfig()
        n = cfg.d_state
        dt = np.exp(
            rng.uniform(np.log(cfg.delta_min), np.log(cfg.delta_max), size=channels)
        )
        scale = 1.0 / np.sqrt(channels)
        return cls(
            a_diag=-np.tile(np.arange(1, n + 1, dtype=np.float64), (channels, 1)),
            w_delta=rng.normal(0.0, 0.1 * scale, size=(channels, channels)),
            b_delta=dt + np.log(-np.expm1(-dt)),
            w_b=rng.normal(0.0, scale, size=(n, channels)),
            w_c=rng.normal(0.0, scale, size=(n, channels)),
            d_skip=np.zeros(channels),
        )

    def to_tensors(self, prefix: str = "ssm") -> dict[str, Array]:
        return {f"{prefix}.{name}": getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_tensors(cls, tensors: dict[str, NDArray[Any]], prefix: str = "ssm") -> "SelectiveParams":
        missing = [name for name in PARAM_NAMES if f"{prefix}.{name}" not in tensors]
        if missing:
            raise ShapeError(f"Archive is missing {', '.join(f'{prefix}.{m}' for m in missing)}")
        return cls(**{name: tensors[f"{prefix}.{name}"] for name in PARAM_NAMES})


@dataclass(frozen=True)
class DiscreteStep:
    """Discretized transition and already-multiplied input term, [... x C x N]."""

    a_bar: Array
    b_bar_x: Array


@dataclass(frozen=True)
class ScanGradients:
    x: Array
    a_diag: Array
    w_delta: Array
    b_delta: Array
    w_b: Array
    w_c: Array
    d_skip: Array
    h_init: Array

    def as_dict(self) -> dict[str, Array]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


def project_selective(
    x_t: NDArray[Any], p: SelectiveParams
) -> tuple[Array, Array, Array]:
    """
    Project inputs to (delta, B, C).

    Works on a single position [C] or any leading batch of positions [... x C].
    """
    x = np.asarray(x_t, dtype=np.float64)
    if x.shape[-1:] != (p.channels,):
        raise ShapeError(f"Input has {x.shape[-1:]} channels, params expect {p.channels}")
    delta = softplus(x @ p.w_delta.T + p.b_delta)
    return delta, x @ p.w_b.T, x @ p.w_c.T


def discretize(
    delta: NDArray[Any] | float, a: NDArray[Any] | float, b: NDArray[Any] | float
) -> tuple[Array, Array]:
    """
    Exact zero-order hold, elementwise with broadcasting.

    a_bar = exp(delta a)
    b_bar = (delta a)^-1 (exp(delta a) - 1) delta b, with a series below |delta a| = 1e-4
    """
    delta_arr = np.asarray(delta, dtype=np.float64)
    a_arr = np.asarray(a, dtype=np.float64)
    b_arr = np.asarray(b, dtype=np.float64)
    for name, value in (("delta", delta_arr), ("a", a_arr), ("b", b_arr)):
        if not np.all(np.isfinite(value)):
            raise NumericError(f"discretize received non-finite {name}")
    z = delta_arr * a_arr
    return np.exp(z), _phi(z) * delta_arr * b_arr


def _discretize_block(x: Array, delta: Array, a_diag: Array, b: Array) -> DiscreteStep:
    # x, delta: [B, L, C]; b: [B, L, N]
    z = delta[..., None] * a_diag
    b_bar = _phi(z) * delta[..., None] * b[:, :, None, :]
    return DiscreteStep(a_bar=np.exp(z), b_bar_x=b_bar * x[..., None])


def _recurrence_sequential(step: DiscreteStep, h0: Array) -> Array:
    states = np.empty_like(step.b_bar_x)
    h = h0
    for t in range(states.shape[1]):
        h = step.a_bar[:, t] * h + step.b_bar_x[:, t]
        states[:, t] = h
    return states


def compose(
    first: tuple[NDArray[Any], NDArray[Any]], second: tuple[NDArray[Any], NDArray[Any]]
) -> tuple[Array, Array]:
    """(a, b) o (a', b') = (a a', a' b + b'): apply ``first`` then ``second``."""
    a, b = first
    a2, b2 = second
    return np.asarray(a * a2, dtype=np.float64), np.asarray(a2 * b + b2, dtype=np.float64)


def _recurrence_parallel(step: DiscreteStep, h0: Array) -> Array:
    """Work-efficient up-sweep / down-sweep scan over axis 1."""
    length = step.a_bar.shape[1]
    size = 1 << (length - 1).bit_length()
    pad_shape = (step.a_bar.shape[0], size) + step.a_bar.shape[2:]
    pa = np.ones(pad_shape)
    pb = np.zeros(pad_shape)
    pa[:, :length] = step.a_bar
    pb[:, :length] = step.b_bar_x

    stride = 1
    while stride < size:
        left = slice(stride - 1, size, 2 * stride)
        right = slice(2 * stride - 1, size, 2 * stride)
        pb[:, right] = pa[:, right] * pb[:, left] + pb[:, right]
        pa[:, right] = pa[:, left] * pa[:, right]
        stride *= 2

    # exclusive prefixes
    pa[:, size - 1] = 1.0
    pb[:, size - 1] = 0.0
    stride = size // 2
    while stride >= 1:
        left = slice(stride - 1, size, 2 * stride)
        right = slice(2 * stride - 1, size, 2 * stride)
        ta = pa[:, left].copy()
        tb = pb[:, left].copy()
        pa[:, left] = pa[:, right]
        pb[:, left] = pb[:, right]
        pb[:, right] = ta * pb[:, right] + tb
        pa[:, right] = pa[:, right] * ta
        stride //= 2

    inclusive_a = pa[:, :length] * step.a_bar
    inclusive_b = step.a_bar * pb[:, :length] + step.b_bar_x
    return inclusive_a * h0[:, None] + inclusive_b


def _first_bad_step(values: Array) -> int:
    bad = ~np.isfinite(values.reshape(values.shape[0], values.shape[1], -1)).all(axis=2)
    return int(np.argmax(bad.any(axis=0)))


def selective_scan_ref(
    x: ScanSequence,
    delta: NDArray[Any],
    a_diag: NDArray[Any],
    b: NDArray[Any],
    c: NDArray[Any],
    d_skip: NDArray[Any] | None = None,
    h_init: NDArray[Any] | None = None,
    impl: ScanImpl = ScanImpl.SEQUENTIAL,
) -> tuple[NDArray[Any], NDArray[Any]]:
    """
    Scan with explicit per-step parameters.

    Args:
        x: [L x C] or [B x L x C]
        delta: same shape as x, strictly positive
        a_diag: [C x N]
        b, c: [L x N] or [B x L x N]
        d_skip: [C], defaults to zero
        h_init: [C x N] or [B x C x N], defaults to zero
        impl: sequential loop or tree scan

    Returns:
        (y with the shape of x, final state [C x N] or [B x C x N])
    """
    x_arr = np.asarray(x)
    unbatched = x_arr.ndim == 2
    xs = np.asarray(x_arr, dtype=np.float64)
    deltas = np.asarray(delta, dtype=np.float64)
    bs = np.asarray(b, dtype=np.float64)
    cs = np.asarray(c, dtype=np.float64)
    if unbatched:
        xs, deltas, bs, cs = xs[None], deltas[None], bs[None], cs[None]
    a = np.asarray(a_diag, dtype=np.float64)

    if xs.ndim != 3 or xs.shape[1] < 1:
        raise ShapeError(f"Scan input must be [L x C] or [B x L x C] with L >= 1, got {x_arr.shape}")
    batch, length, channels = xs.shape
    d_state = a.shape[-1]
    if a.shape != (channels, d_state) or deltas.shape != xs.shape:
        raise ShapeError(
            f"Shape mismatch: x {xs.shape}, delta {deltas.shape}, a_diag {a.shape}"
        )
    if bs.shape != (batch, length, d_state) or cs.shape != (batch, length, d_state):
        raise ShapeError(f"B/C must be [L x {d_state}], got {bs.shape} and {cs.shape}")

    skip = np.zeros(channels) if d_skip is None else np.asarray(d_skip, dtype=np.float64)
    if h_init is None:
        h = np.zeros((batch, channels, d_state))
    else:
        h = np.broadcast_to(np.asarray(h_init, dtype=np.float64), (batch, channels, d_state)).copy()

    recurrence = _recurrence_parallel if impl is ScanImpl.PARALLEL else _recurrence_sequential
    y = np.empty((batch, length, channels))
    for start in range(0, length, CHUNK_LENGTH):
        stop = min(start + CHUNK_LENGTH, length)
        chunk = slice(start, stop)
        # non-finite values surface as NumericError just below
        with np.errstate(invalid="ignore", over="ignore"):
            step = _discretize_block(xs[:, chunk], deltas[:, chunk], a, bs[:, chunk])
            states = recurrence(step, h)
        if not np.all(np.isfinite(states)):
            t = start + _first_bad_step(states)
            raise NumericError(f"Non-finite scan state at step {t}", index=t)
        y[:, chunk] = np.einsum("blcn,bln->blc", states, cs[:, chunk]) + skip * xs[:, chunk]
        h = states[:, -1]

    if not np.all(np.isfinite(y)):
        t = _first_bad_step(y[..., None])
        raise NumericError(f"Non-finite scan output at step {t}", index=t)

    dtype = _out_dtype(x_arr)
    if unbatched:
        return y[0].astype(dtype), h[0].astype(dtype)
    return y.astype(dtype), h.astype(dtype)


def _scan(
    seq: ScanSequence, p: SelectiveParams, h_init: NDArray[Any] | None, impl: ScanImpl
) -> tuple[NDArray[Any], NDArray[Any]]:
    x = np.asarray(seq)
    if x.ndim not in (2, 3) or x.shape[-2] < 1:
        raise ShapeError(f"Scan input must be [L x C] or [B x L x C] with L >= 1, got {x.shape}")
    delta, b, c = project_selective(x, p)
    return selective_scan_ref(x, delta, p.a_diag, b, c, p.d_skip, h_init, impl=impl)


def scan_sequential(
    seq: ScanSequence, p: SelectiveParams, h_init: NDArray[Any] | None = None
) -> tuple[NDArray[Any], NDArray[Any]]:
    """Selective scan by direct recurrence; the reference every other path is checked against."""
    return _scan(seq, p, h_init, ScanImpl.SEQUENTIAL)


def scan_parallel(
    seq: ScanSequence, p: SelectiveParams, h_init: NDArray[Any] | None = None
) -> tuple[NDArray[Any], NDArray[Any]]:
    """Same contract as ``scan_sequential``, evaluated with a balanced prefix-scan tree."""
    return _scan(seq, p, h_init, ScanImpl.PARALLEL)


def run_scan(
    seq: ScanSequence,
    p: SelectiveParams,
    h_init: NDArray[Any] | None = None,
    impl: ScanImpl = ScanImpl.SEQUENTIAL,
) -> tuple[NDArray[Any], NDArray[Any]]:
    return _scan(seq, p, h_init, impl)


def lti_kernel(
    a_bar: NDArray[Any], b_bar: NDArray[Any], c: NDArray[Any], length: int
) -> Array:
    """
    Convolution kernel of a time-invariant scan.

    k[t] = sum_n c[n] a_bar[n]^t b_bar[n]; ``a_bar`` and ``b_bar`` may carry
    leading channel axes ([... x N]), which are kept in the result [L x ...].
    """
    if length < 1:
        raise ShapeError(f"Kernel length must be >= 1, got {length}")
    a = np.asarray(a_bar, dtype=np.float64)
    bb = np.asarray(b_bar, dtype=np.float64)
    cc = np.asarray(c, dtype=np.float64)
    steps = np.arange(length, dtype=np.float64).reshape((length,) + (1,) * a.ndim)
    powers = a[None] ** steps
    kernel = (powers * bb * cc).sum(axis=-1)
    if not np.all(np.isfinite(kernel)):
        raise NumericError("LTI kernel overflowed")
    return kernel


def scan_backward(
    seq: ScanSequence,
    p: SelectiveParams,
    h_init: NDArray[Any] | None,
    grad_y: NDArray[Any],
) -> ScanGradients:
    """
    Analytic adjoint of ``scan_sequential`` for a single [L x C] sequence.

    Forward intermediates are recomputed; the reverse recurrence runs
    gh_{t-1} = a_bar_t * gh_t + C_t gy_t.
    """
    x = np.asarray(seq, dtype=np.float64)
    gy = np.asarray(grad_y, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.channels or x.shape[0] < 1:
        raise ShapeError(f"scan_backward expects [L x {p.channels}], got {x.shape}")
    if gy.shape != x.shape:
        raise ShapeError(f"grad_y shape {gy.shape} does not match input {x.shape}")
    length = x.shape[0]
    h0 = np.zeros((p.channels, p.d_state)) if h_init is None else np.asarray(h_init, dtype=np.float64)
    if h0.shape != (p.channels, p.d_state):
        raise ShapeError(f"h_init must be [{p.channels} x {p.d_state}], got {h0.shape}")

    z = x @ p.w_delta.T + p.b_delta
    delta = softplus(z)
    bt = x @ p.w_b.T
    ct = x @ p.w_c.T
    u = delta[:, :, None] * p.a_diag
    a_bar = np.exp(u)
    phi = _phi(u)
    b_bar = phi * delta[:, :, None] * bt[:, None, :]

    states = np.empty((length, p.channels, p.d_state))
    prev = np.empty_like(states)
    h = h0
    for t in range(length):
        prev[t] = h
        h = a_bar[t] * h + b_bar[t] * x[t, :, None]
        states[t] = h

    g_d = (gy * x).sum(axis=0)
    g_x = gy * p.d_skip
    g_ct = np.einsum("lc,lcn->ln", gy, states)
    gh_direct = gy[:, :, None] * ct[:, None, :]

    g_states = np.empty_like(states)
    gh = np.zeros((p.channels, p.d_state))
    for t in range(length - 1, -1, -1):
        gh = gh_direct[t] + gh
        g_states[t] = gh
        gh = a_bar[t] * gh
    g_h_init = gh

    g_bbar = g_states * x[:, :, None]
    g_x = g_x + (g_states * b_bar).sum(axis=-1)
    g_u = g_states * prev * a_bar + g_bbar * _dphi(u) * delta[:, :, None] * bt[:, None, :]
    g_delta = (g_bbar * phi * bt[:, None, :]).sum(axis=-1) + (g_u * p.a_diag).sum(axis=-1)
    g_a = (g_u * delta[:, :, None]).sum(axis=0)
    g_bt = (g_bbar * phi * delta[:, :, None]).sum(axis=1)

    g_z = g_delta * _sigmoid(z)
    g_x = g_x + g_z @ p.w_delta + g_bt @ p.w_b + g_ct @ p.w_c

    return ScanGradients(
        x=g_x,
        a_diag=g_a,
        w_delta=g_z.T @ x,
        b_delta=g_z.sum(axis=0),
        w_b=g_bt.T @ x,
        w_c=g_ct.T @ x,
        d_skip=g_d,
        h_init=g_h_init,
    )


def lti_convolve(x: NDArray[Any], kernel: NDArray[Any], method: str = "direct") -> Array:
    """
    Causal per-channel convolution y[t, c] = sum_{s <= t} kernel[s, c] x[t - s, c].

    ``method`` is "direct" (exact summation) or "fft".
    """
    xs = np.asarray(x, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if xs.ndim != 2 or k.shape != xs.shape:
        raise ShapeError(f"Kernel {k.shape} must match input [L x C] {xs.shape}")
    length = xs.shape[0]
    if method == "fft":
        size = 1 << (2 * length - 1).bit_length()
        spectrum = np.fft.rfft(xs, size, axis=0) * np.fft.rfft(k, size, axis=0)
        return np.fft.irfft(spectrum, size, axis=0)[:length]
    if method != "direct":
        raise ConfigError(f"Unknown convolution method {method!r}")
    return np.stack(
        [np.convolve(xs[:, ch], k[:, ch])[:length] for ch in range(xs.shape[1])], axis=1
    )
