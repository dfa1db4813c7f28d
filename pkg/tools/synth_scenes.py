"""
Deterministic synthetic rectified-stereo scenes with exact ground truth.

A scene is a textured background plane plus fronto-parallel rectangles, all
described in left-image coordinates. A surface at disparity d seen at left
column x appears at right column x - d; nearer surfaces win in both views.
"""
import logging
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from numpy.typing import NDArray
from tqdm import tqdm

from tools.errors import ConfigError, ShapeError
from tools.features import DOWNSAMPLE
from tools.progress import bar_disabled
from tools.tensor_io import ensure_dir, join_path, pfm_write, ppm_write, write_json

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

BASELINES_M = (0.2, 0.3, 0.4, 0.5)
DEFAULT_FOCAL_PX = 400.0
# full-resolution Gaussian low-pass scale of the noise textures, in pixels
TEXTURE_SIGMA_PX = 1.0
INTEGER_STEP = DOWNSAMPLE
BOUNDS_ALIGN = 2 * DOWNSAMPLE
MANIFEST_NAME = "manifest.json"
# the far plane needs room for disparities of at least 8 px
MIN_SCENE_WIDTH = 64
# background bands between a layer and the image border are absent or at least this wide
MIN_MARGIN_PX = 24


@dataclass(frozen=True)
class CameraRig:
    focal_px: float = DEFAULT_FOCAL_PX
    baseline_m: float = 0.3

    def __post_init__(self) -> None:
        if not (self.focal_px > 0 and self.baseline_m > 0):
            raise ConfigError(f"Camera rig needs positive focal and baseline, got {self}")

    def disparity(self, depth_m: float) -> float:
        return self.focal_px * self.baseline_m / depth_m

    @classmethod
    def sample(cls, rng: np.random.Generator, focal_px: float = DEFAULT_FOCAL_PX) -> "CameraRig":
        return cls(focal_px=focal_px, baseline_m=float(rng.choice(BASELINES_M)))


@dataclass(frozen=True)
class Layer:
    depth_m: float
    # (top, left, bottom, right), half-open, left-image pixels
    bounds: tuple[int, int, int, int]
    texture_seed: int


@dataclass(frozen=True)
class SceneSpec:
    layers: tuple[Layer, ...]
    background_depth_m: float
    width: int = 640
    height: int = 480
    background_seed: int = 0

    def __post_init__(self) -> None:
        if self.width % 8 or self.height % 8 or self.width <= 0 or self.height <= 0:
            raise ConfigError(f"Scene size {self.width}x{self.height} must be positive and divisible by 8")
        if self.background_depth_m <= 0 or any(layer.depth_m <= 0 for layer in self.layers):
            raise ConfigError("Scene depths must be positive")
        depths = [layer.depth_m for layer in self.layers]
        if len(set(depths)) != len(depths) or any(d >= self.background_depth_m for d in depths):
            raise ConfigError("Layer depths must be distinct and nearer than the background")
        for layer in self.layers:
            top, left, bottom, right = layer.bounds
            if not (0 <= top < bottom <= self.height and 0 <= left < right <= self.width):
                raise ConfigError(f"Layer bounds {layer.bounds} fall outside {self.width}x{self.height}")


@dataclass(frozen=True)
class UnderwaterParams:
    beta: tuple[float, float, float]  # attenuation per channel, 1/m
    veil: tuple[float, float, float]  # backscatter colour per channel

    def __post_init__(self) -> None:
        if len(self.beta) != 3 or len(self.veil) != 3:
            raise ConfigError("Underwater parameters need three channels")
        if any(b < 0 for b in self.beta) or any(not 0.0 <= v <= 1.0 for v in self.veil):
            raise ConfigError(f"Invalid underwater parameters {self}")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "UnderwaterParams":
        # red attenuates fastest; the veil is blue-green
        beta = rng.uniform((0.20, 0.05, 0.02), (0.60, 0.25, 0.20))
        veil = rng.uniform((0.05, 0.30, 0.40), (0.20, 0.60, 0.70))
        return cls(
            beta=(float(beta[0]), float(beta[1]), float(beta[2])),
            veil=(float(veil[0]), float(veil[1]), float(veil[2])),
        )


@dataclass(frozen=True)
class StereoRender:
    left: Array  # [H x W x 3]
    right: Array
    disparity: Array  # left-view ground truth, full resolution
    occlusion: NDArray[np.bool_]  # True where excluded
    depth_left: Array
    depth_right: Array

    def __iter__(self) -> Any:
        return iter((self.left, self.right, self.disparity, self.occlusion, self.depth_left, self.depth_right))


def band_limited_texture(seed: int, height: int, width: int, sigma_px: float = TEXTURE_SIGMA_PX) -> Array:
    """Seeded RGB noise low-passed with a Gaussian in the frequency domain, rescaled to [0.05, 0.95]."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((height, width, 3))
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    gain = np.exp(-2.0 * (np.pi * sigma_px) ** 2 * (fy**2 + fx**2))
    smooth = np.fft.irfft2(np.fft.rfft2(noise, axes=(0, 1)) * gain[..., None], s=(height, width), axes=(0, 1))
    lo = smooth.min(axis=(0, 1))
    hi = smooth.max(axis=(0, 1))
    return 0.05 + 0.9 * (smooth - lo) / np.maximum(hi - lo, 1e-12)


def _snap(disparity: float) -> float:
    nearest = round(disparity)
    return float(nearest) if abs(disparity - nearest) < 1e-9 * max(1.0, disparity) else disparity


def _sample_rows(texture: Array, columns: Array) -> Array:
    """Per-row linear interpolation of ``texture`` at fractional columns, [H x W] -> [H x W x 3]."""
    width = texture.shape[1]
    c0 = np.floor(columns)
    frac = (columns - c0)[..., None]
    i0 = np.clip(c0.astype(np.intp), 0, width - 1)
    i1 = np.clip(i0 + 1, 0, width - 1)
    rows = np.arange(texture.shape[0])[:, None]
    return (1.0 - frac) * texture[rows, i0] + frac * texture[rows, i1]


def render_stereo(spec: SceneSpec, rig: CameraRig, seed: int = 0) -> StereoRender:
    """
    Render a rectified pair with exact left-view disparity.

    The occlusion mask is True on pixels whose right-view match is hidden by a
    nearer surface or falls left of the right image.
    """
    height, width = spec.height, spec.width
    surfaces = [(spec.background_depth_m, None)] + sorted(
        ((layer.depth_m, layer) for layer in spec.layers), key=lambda item: -item[0]
    )
    disparities = [_snap(rig.disparity(depth)) for depth, _ in surfaces]
    max_disp = max(disparities)
    if max_disp / DOWNSAMPLE > width / DOWNSAMPLE - 1:
        raise ConfigError(
            f"Disparity {max_disp:.2f}px exceeds the {width // DOWNSAMPLE - 1} px range of the quarter-resolution volume"
        )

    pad = int(np.ceil(max_disp)) + 1
    textures = [band_limited_texture(seed + spec.background_seed, height, width + pad)] + [
        band_limited_texture(seed + layer.texture_seed, height, width) for _, layer in surfaces[1:] if layer
    ]

    columns = np.broadcast_to(np.arange(width, dtype=np.float64), (height, width))
    rows = np.arange(height)[:, None]

    left = np.empty((height, width, 3))
    right = np.empty((height, width, 3))
    left_id = np.zeros((height, width), dtype=np.intp)
    right_id = np.zeros((height, width), dtype=np.intp)
    # farthest first; nearer surfaces overwrite
    for sid, ((depth, layer), d, texture) in enumerate(zip(surfaces, disparities, textures)):
        if layer is None:
            left_cover = np.ones((height, width), dtype=bool)
            right_cover = left_cover
        else:
            top, x0, bottom, x1 = layer.bounds
            in_rows = (rows >= top) & (rows < bottom)
            left_cover = in_rows & (columns >= x0) & (columns < x1)
            source = columns + d
            right_cover = in_rows & (source >= x0) & (source < x1)
        left[left_cover] = texture[:, :width][left_cover]
        right[right_cover] = _sample_rows(texture, columns + d)[right_cover]
        left_id[left_cover] = sid
        right_id[right_cover] = sid

    disp_of = np.asarray(disparities)
    depth_of = np.asarray([depth for depth, _ in surfaces])
    gt = disp_of[left_id]

    target = columns - gt
    outside = target < 0
    ti = np.clip(np.rint(target).astype(np.intp), 0, width - 1)
    integral = np.all(disp_of == np.rint(disp_of))
    if integral:
        hidden = right_id[rows, ti] != left_id
    else:
        t0 = np.clip(np.floor(target).astype(np.intp), 0, width - 1)
        t1 = np.clip(t0 + 1, 0, width - 1)
        hidden = (right_id[rows, t0] != left_id) | (right_id[rows, t1] != left_id)

    return StereoRender(
        left=left,
        right=right,
        disparity=gt,
        occlusion=outside | hidden,
        depth_left=depth_of[left_id],
        depth_right=depth_of[right_id],
    )


def apply_underwater(img: NDArray[Any], depth_map: NDArray[Any], p: UnderwaterParams) -> Array:
    """img * exp(-beta z) + veil * (1 - exp(-beta z)), per channel."""
    image = np.asarray(img, dtype=np.float64)
    depth = np.asarray(depth_map, dtype=np.float64)
    if image.shape[:2] != depth.shape or image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"Image {image.shape} and depth {depth.shape} do not match")
    transmission = np.exp(-np.asarray(p.beta) * depth[..., None])
    return image * transmission + np.asarray(p.veil) * (1.0 - transmission)


def _align(value: float, step: int) -> int:
    return int(step * round(value / step))


def sample_scene(
    rng: np.random.Generator,
    rig: CameraRig,
    num_layers: int = 1,
    integer_disparity: bool = True,
    width: int = 640,
    height: int = 480,
    min_gap_px: float = 8.0,
) -> SceneSpec:
    """
    Draw a random layout. In integer mode every disparity is a multiple of 4
    full-resolution pixels and layer bounds sit on an 8-pixel grid, so the
    quarter-resolution shifts are whole columns. A layer either touches an
    image border or leaves a band of at least MIN_MARGIN_PX to it.
    """
    if width < MIN_SCENE_WIDTH:
        raise ConfigError(f"Scene width must be >= {MIN_SCENE_WIDTH}, got {width}")
    max_disp = min(width / 4.0, width - 2.0 * DOWNSAMPLE)
    step = INTEGER_STEP if integer_disparity else 0

    def draw(lo: float, hi: float) -> float:
        if step:
            return float(step * rng.integers(int(np.ceil(lo / step)), int(hi // step) + 1))
        return float(rng.uniform(lo, hi))

    d_far = draw(8.0, max_disp / 2.0)
    disparities = [d_far]
    for _ in range(num_layers):
        lo = disparities[-1] + min_gap_px
        if lo > max_disp:
            raise ConfigError(f"Cannot fit {num_layers} layers with {min_gap_px}px gaps below {max_disp}px")
        disparities.append(draw(lo, min(max_disp, lo + 24.0)))

    layers = []
    for k, d in enumerate(disparities[1:]):
        top = _align(rng.uniform(0, height / 3), BOUNDS_ALIGN)
        bottom = _align(rng.uniform(2 * height / 3, height), BOUNDS_ALIGN)
        x0 = _align(rng.uniform(width / 4, width / 2), BOUNDS_ALIGN)
        x1 = _align(rng.uniform(3 * width / 4, width), BOUNDS_ALIGN)
        # x0 keeps the left band so the background stays visible
        x0 = max(x0, MIN_MARGIN_PX)
        top = 0 if top < MIN_MARGIN_PX else top
        bottom = height if height - bottom < MIN_MARGIN_PX else bottom
        x1 = width if width - x1 < MIN_MARGIN_PX else x1
        layers.append(
            Layer(
                depth_m=rig.focal_px * rig.baseline_m / d,
                bounds=(top, x0, max(bottom, top + BOUNDS_ALIGN), max(x1, x0 + BOUNDS_ALIGN)),
                texture_seed=int(rng.integers(1, 2**31)) + k,
            )
        )
    return SceneSpec(
        layers=tuple(layers),
        background_depth_m=rig.focal_px * rig.baseline_m / d_far,
        width=width,
        height=height,
        background_seed=int(rng.integers(0, 2**31)),
    )


@dataclass(frozen=True)
class SynthOptions:
    seed: int = 0
    baseline_m: float | None = None
    underwater: bool = False
    integer_disparity: bool = True
    num_layers: int = 1
    width: int = 640
    height: int = 480
    focal_px: float = DEFAULT_FOCAL_PX

    def __post_init__(self) -> None:
        if self.baseline_m is not None and self.baseline_m <= 0:
            raise ConfigError(f"Baseline must be positive, got {self.baseline_m}")
        if self.num_layers < 0:
            raise ConfigError(f"Layer count must be >= 0, got {self.num_layers}")
        if self.width % 8 or self.height % 8 or self.width < MIN_SCENE_WIDTH or self.height <= 0:
            raise ConfigError(
                f"Scene size {self.width}x{self.height} must be divisible by 8 with width >= {MIN_SCENE_WIDTH}"
            )


@dataclass(frozen=True)
class SceneRecord:
    index: int
    seed: int
    focal_px: float
    baseline_m: float
    background_depth_m: float
    layers: list[dict[str, Any]]
    underwater: dict[str, list[float]] | None
    files: dict[str, str] = field(default_factory=dict)


def scene_files(index: int) -> dict[str, str]:
    stem = f"scene_{index:04d}"
    return {
        "left": f"{stem}_left.ppm",
        "right": f"{stem}_right.ppm",
        "disparity": f"{stem}_disp.pfm",
        "mask": f"{stem}_mask.pfm",
    }


def emit_scene(index: int, seed: int, out_dir: str, opts: SynthOptions) -> SceneRecord:
    rng = np.random.default_rng(seed)
    rig = (
        CameraRig(opts.focal_px, opts.baseline_m)
        if opts.baseline_m is not None
        else CameraRig.sample(rng, opts.focal_px)
    )
    spec = sample_scene(rng, rig, opts.num_layers, opts.integer_disparity, opts.width, opts.height)
    render = render_stereo(spec, rig, seed=int(rng.integers(0, 2**31)))
    left, right = render.left, render.right
    water = UnderwaterParams.sample(rng) if opts.underwater else None
    if water is not None:
        left = apply_underwater(left, render.depth_left, water)
        right = apply_underwater(right, render.depth_right, water)

    files = scene_files(index)
    ppm_write(join_path(out_dir, files["left"]), left)
    ppm_write(join_path(out_dir, files["right"]), right)
    pfm_write(join_path(out_dir, files["disparity"]), render.disparity)
    pfm_write(join_path(out_dir, files["mask"]), render.occlusion.astype(np.float32))

    return SceneRecord(
        index=index,
        seed=seed,
        focal_px=rig.focal_px,
        baseline_m=rig.baseline_m,
        background_depth_m=spec.background_depth_m,
        layers=[asdict(layer) for layer in spec.layers],
        underwater=None if water is None else {"beta": list(water.beta), "veil": list(water.veil)},
        files=files,
    )


MapScenes = Callable[[Callable[[tuple[int, int]], SceneRecord], Sequence[tuple[int, int]]], Any]


def dataset_emit(
    n: int,
    out_dir: str,
    opts: SynthOptions | None = None,
    map_fn: MapScenes | None = None,
) -> dict[str, Any]:
    """
    Render ``n`` scenes into ``out_dir`` and write the manifest.

    Per-scene seeds are spawned from ``opts.seed``, so output does not depend
    on how scenes are scheduled.
    """
    opts = opts or SynthOptions()
    if n < 0:
        raise ConfigError(f"Scene count must be >= 0, got {n}")
    ensure_dir(out_dir)

    children = np.random.SeedSequence(opts.seed).spawn(n)
    jobs = [(i, int(child.generate_state(1)[0])) for i, child in enumerate(children)]

    def run(job: tuple[int, int]) -> SceneRecord:
        return emit_scene(job[0], job[1], out_dir, opts)

    mapper = map_fn or (lambda fn, items: map(fn, items))
    records = list(tqdm(mapper(run, jobs), total=n, desc="Rendering scenes", disable=bar_disabled(n > 1)))

    manifest = {
        "master_seed": opts.seed,
        "options": asdict(opts),
        "scenes": [asdict(record) for record in records],
    }
    write_json(join_path(out_dir, MANIFEST_NAME), manifest)
    logger.info(f"[SceneEmitter] Wrote {n} scenes to {out_dir}")
    return manifest
