"""Rendered stereo scenes, underwater appearance and dataset emission."""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from tools.errors import ConfigError, ShapeError
from tools.metrics import depth_to_disparity, disparity_to_depth
from tools.synth_scenes import (
    BASELINES_M,
    MANIFEST_NAME,
    MIN_MARGIN_PX,
    CameraRig,
    Layer,
    SceneSpec,
    SynthOptions,
    UnderwaterParams,
    apply_underwater,
    band_limited_texture,
    dataset_emit,
    render_stereo,
    sample_scene,
    scene_files,
)
from tools.tensor_io import pfm_read, ppm_read, read_json


def create_two_plane_spec(rig, d_far=8.0, d_near=16.0):
    """32 x 64 scene; the near plane covers columns 32..63 on every row."""
    return SceneSpec(
        layers=(Layer(depth_m=rig.focal_px * rig.baseline_m / d_near, bounds=(0, 32, 32, 64), texture_seed=3),),
        background_depth_m=rig.focal_px * rig.baseline_m / d_far,
        width=64,
        height=32,
    )


def read_bytes(directory):
    out = {}
    for name in sorted(os.listdir(directory)):
        with open(os.path.join(directory, name), "rb") as f:
            out[name] = f.read()
    return out


# ============================================================================
# Rig, layout and rendering
# ============================================================================


class TestCameraRig:
    def test_disparity(self):
        rig = CameraRig(focal_px=400.0, baseline_m=0.3)

        assert rig.disparity(2.0) == pytest.approx(60.0)

    def test_rejects_non_positive(self):
        with pytest.raises(ConfigError):
            CameraRig(baseline_m=0.0)
        with pytest.raises(ConfigError):
            CameraRig(focal_px=-1.0)

    def test_sampled_baselines(self, rng):
        baselines = {CameraRig.sample(rng).baseline_m for _ in range(200)}

        assert baselines == set(BASELINES_M)


class TestRenderStereo:
    def test_ground_truth_disparity(self):
        rig = CameraRig()
        render = render_stereo(create_two_plane_spec(rig), rig)

        np.testing.assert_array_equal(render.disparity[:, :32], 8.0)
        np.testing.assert_array_equal(render.disparity[:, 32:], 16.0)
        np.testing.assert_allclose(render.depth_left[:, 40], rig.focal_px * rig.baseline_m / 16.0)

    def test_occlusion_mask(self):
        rig = CameraRig()
        render = render_stereo(create_two_plane_spec(rig), rig)

        expected = np.zeros(64, dtype=bool)
        expected[:8] = True  # match falls left of the right image
        expected[24:32] = True  # background hidden behind the near plane
        np.testing.assert_array_equal(render.occlusion, np.broadcast_to(expected, (32, 64)))

    def test_visible_pixels_match_across_views(self):
        rig = CameraRig()
        render = render_stereo(create_two_plane_spec(rig), rig, seed=5)
        rows, cols = np.nonzero(~render.occlusion)
        target = cols - render.disparity[rows, cols].astype(np.intp)

        np.testing.assert_array_equal(render.left[rows, cols], render.right[rows, target])

    def test_deterministic(self):
        rig = CameraRig()
        first = render_stereo(create_two_plane_spec(rig), rig, seed=9)
        second = render_stereo(create_two_plane_spec(rig), rig, seed=9)

        for a, b in zip(first, second):
            assert np.array_equal(a, b)

    def test_disparity_beyond_volume_range(self):
        rig = CameraRig()
        spec = SceneSpec(layers=(), background_depth_m=rig.focal_px * rig.baseline_m / 64.0, width=64, height=32)

        with pytest.raises(ConfigError):
            render_stereo(spec, rig)

    def test_texture_range(self):
        texture = band_limited_texture(4, 16, 24)

        assert texture.shape == (16, 24, 3)
        np.testing.assert_allclose(texture.min(axis=(0, 1)), 0.05)
        np.testing.assert_allclose(texture.max(axis=(0, 1)), 0.95)


class TestSceneSpec:
    def test_size_must_align(self):
        with pytest.raises(ConfigError):
            SceneSpec(layers=(), background_depth_m=5.0, width=60, height=32)

    def test_layer_behind_background(self):
        with pytest.raises(ConfigError):
            SceneSpec(layers=(Layer(6.0, (0, 0, 8, 8), 1),), background_depth_m=5.0, width=64, height=32)

    def test_layer_outside_image(self):
        with pytest.raises(ConfigError):
            SceneSpec(layers=(Layer(2.0, (0, 0, 40, 8), 1),), background_depth_m=5.0, width=64, height=32)


class TestSampleScene:
    def test_integer_layout(self, rng):
        for _ in range(20):
            rig = CameraRig.sample(rng)
            spec = sample_scene(rng, rig, num_layers=1, width=128, height=64)
            disparities = [rig.disparity(spec.background_depth_m)] + [
                rig.disparity(layer.depth_m) for layer in spec.layers
            ]

            for d in disparities:
                assert abs(d / 4 - round(d / 4)) < 1e-9
            for layer in spec.layers:
                assert all(edge % 8 == 0 for edge in layer.bounds)
            assert disparities[1] - disparities[0] >= 8.0

    def test_layers_leave_wide_bands(self, rng):
        for k in range(40):
            spec = sample_scene(rng, CameraRig.sample(rng), num_layers=1 + k % 2)

            for top, x0, bottom, x1 in (layer.bounds for layer in spec.layers):
                assert x0 >= MIN_MARGIN_PX
                assert top == 0 or top >= MIN_MARGIN_PX
                assert bottom == spec.height or spec.height - bottom >= MIN_MARGIN_PX
                assert x1 == spec.width or spec.width - x1 >= MIN_MARGIN_PX

    def test_two_layers_are_ordered(self, rng):
        spec = sample_scene(rng, CameraRig(), num_layers=2, width=640, height=64)

        assert spec.layers[0].depth_m > spec.layers[1].depth_m

    def test_too_many_layers(self, rng):
        with pytest.raises(ConfigError):
            sample_scene(rng, CameraRig(), num_layers=5, width=64, height=32)


# ============================================================================
# Underwater
# ============================================================================


class TestUnderwater:
    def test_zero_depth_keeps_image(self, rng):
        image = rng.uniform(size=(4, 4, 3))
        params = UnderwaterParams.sample(rng)

        assert np.array_equal(apply_underwater(image, np.zeros((4, 4)), params), image)

    def test_far_field_is_veil(self, rng):
        params = UnderwaterParams(beta=(0.5, 0.2, 0.1), veil=(0.1, 0.4, 0.6))

        out = apply_underwater(rng.uniform(size=(2, 2, 3)), np.full((2, 2), 1e4), params)

        np.testing.assert_allclose(out, np.broadcast_to([0.1, 0.4, 0.6], (2, 2, 3)), atol=1e-12)

    def test_red_fades_first(self):
        params = UnderwaterParams(beta=(0.5, 0.2, 0.1), veil=(0.0, 0.0, 0.0))

        out = apply_underwater(np.ones((1, 1, 3)), np.full((1, 1), 2.0), params)

        assert out[0, 0, 0] < out[0, 0, 1] < out[0, 0, 2]

    def test_invalid_params(self):
        with pytest.raises(ConfigError):
            UnderwaterParams(beta=(-0.1, 0.2, 0.1), veil=(0.1, 0.1, 0.1))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            apply_underwater(np.zeros((2, 2, 3)), np.zeros((3, 2)), UnderwaterParams((0, 0, 0), (0, 0, 0)))


# ============================================================================
# Dataset emission
# ============================================================================


class TestDatasetEmit:
    def test_files_and_manifest(self, out_dir):
        opts = SynthOptions(seed=3, width=64, height=32)

        manifest = dataset_emit(3, out_dir, opts)

        assert len(os.listdir(out_dir)) == 4 * 3 + 1
        on_disk = read_json(f"{out_dir}/{MANIFEST_NAME}")
        assert on_disk["master_seed"] == 3
        assert len(on_disk["scenes"]) == 3
        assert [scene["files"] for scene in manifest["scenes"]] == [scene_files(i) for i in range(3)]
        assert manifest["master_seed"] == 3
        for scene in manifest["scenes"]:
            assert scene["baseline_m"] in BASELINES_M

    def test_files_decode(self, out_dir):
        dataset_emit(1, out_dir, SynthOptions(width=64, height=32, underwater=True))
        files = scene_files(0)

        assert ppm_read(f"{out_dir}/{files['left']}").shape == (32, 64, 3)
        disparity = pfm_read(f"{out_dir}/{files['disparity']}")
        mask = pfm_read(f"{out_dir}/{files['mask']}")
        assert disparity.shape == mask.shape == (32, 64)
        assert set(np.unique(mask)) <= {0.0, 1.0}

    def test_deterministic_across_schedules(self, tmp_path):
        opts = SynthOptions(seed=11, width=64, height=32, baseline_m=0.4)
        serial = tmp_path / "serial"
        threaded = tmp_path / "threaded"

        dataset_emit(4, str(serial), opts)
        with ThreadPoolExecutor(max_workers=3) as pool:
            dataset_emit(4, str(threaded), opts, map_fn=pool.map)

        assert read_bytes(serial) == read_bytes(threaded)

    def test_seed_changes_output(self, tmp_path):
        dataset_emit(1, str(tmp_path / "a"), SynthOptions(seed=1, width=64, height=32))
        dataset_emit(1, str(tmp_path / "b"), SynthOptions(seed=2, width=64, height=32))

        assert read_bytes(tmp_path / "a")["scene_0000_left.ppm"] != read_bytes(tmp_path / "b")["scene_0000_left.ppm"]

    def test_ground_truth_range_and_depth_round_trip(self, out_dir):
        manifest = dataset_emit(3, out_dir, SynthOptions(seed=4, width=64, height=32))

        for scene in manifest["scenes"]:
            disparity = pfm_read(f"{out_dir}/{scene['files']['disparity']}").astype(np.float64)
            rig = CameraRig(scene["focal_px"], scene["baseline_m"])

            assert disparity.min() >= 0.0
            assert disparity.max() <= (64 / 4 - 1) * 4
            depth, valid = disparity_to_depth(disparity, rig)
            back, _ = depth_to_disparity(depth, rig)
            assert valid.any()
            np.testing.assert_allclose(back[valid], disparity[valid], rtol=0, atol=1e-6)

    def test_negative_count(self, out_dir):
        with pytest.raises(ConfigError):
            dataset_emit(-1, out_dir)

    def test_narrow_scene_rejected(self, rng):
        with pytest.raises(ConfigError):
            SynthOptions(width=56, height=32)
        with pytest.raises(ConfigError):
            sample_scene(rng, CameraRig(), width=48, height=32)
