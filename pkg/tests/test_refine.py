"""Refinement state, update step, upsampling, loss and the oracle pipeline."""

from dataclasses import replace

import numpy as np
import pytest

from tools.config import RefineConfig
from tools.cost_volume import (
    CorrelationVolume,
    DisparityMap,
    build_correlation,
    build_pyramid,
    shiftable_max,
    wta_disparity,
)
from tools.errors import ConfigError, EmptyMaskError, NumericError, ShapeError
from tools.features import ExtractorConfig, extract
from tools.metrics import end_point_error
from tools.refine import (
    RefineMode,
    RefineState,
    UpdateWeights,
    init_state,
    prepare_mono_init,
    run_refinement,
    sequence_loss,
    training_loss,
    update_step,
    upsample_disparity,
)
from tools.synth_scenes import BASELINES_M, CameraRig, render_stereo, sample_scene

NCC = ExtractorConfig(normalize=True)


def create_pair(rng, height=32, width=32, shift=1):
    """Textured pair whose right view is the left shifted ``shift`` quarter pixels."""
    wide = rng.uniform(0.0, 1.0, size=(height, width + 4 * shift, 3))
    return wide[:, :width], wide[:, 4 * shift : 4 * shift + width]


def create_problem(rng, height=32, width=32):
    left, right = create_pair(rng, height, width)
    feat_l = extract(left)
    pyr = build_pyramid(build_correlation(feat_l, extract(right)))
    weights = UpdateWeights.initialize(feat_l.shape[-1], rng)
    return feat_l, pyr, weights


# ============================================================================
# State and update step
# ============================================================================


class TestInitState:
    def test_zero_features_give_zero_hidden(self, rng):
        weights = UpdateWeights.initialize(25, rng)
        state = init_state(np.zeros((4, 6, 25)), None, weights)

        np.testing.assert_array_equal(state.hidden, np.zeros((4, 6, 32)))
        np.testing.assert_array_equal(state.disparity, np.zeros((4, 6)))

    def test_mono_passthrough_and_clamp(self, rng):
        weights = UpdateWeights.initialize(25, rng)
        mono = np.array([[-3.0, 0.5, 2.0, 9.0]])

        state = init_state(rng.normal(size=(1, 4, 25)), DisparityMap.full(mono), weights)

        np.testing.assert_array_equal(state.disparity, [[0.0, 0.5, 2.0, 3.0]])

    def test_feature_channel_mismatch(self, rng):
        weights = UpdateWeights.initialize(25, rng)
        with pytest.raises(ShapeError):
            init_state(np.zeros((4, 4, 9)), None, weights)

    def test_mono_shape_mismatch(self, rng):
        weights = UpdateWeights.initialize(25, rng)
        with pytest.raises(ShapeError):
            init_state(np.zeros((4, 4, 25)), np.zeros((4, 5)), weights)


class TestUpdateStep:
    def test_zero_delta_head_keeps_disparity(self, rng):
        feat_l, pyr, weights = create_problem(rng)
        frozen = replace(weights, delta_head_w=np.zeros((1, 32)), delta_head_b=np.zeros(1))
        state = init_state(feat_l, rng.uniform(0, 7, size=(8, 8)), frozen)

        updated = update_step(state, pyr, frozen)

        np.testing.assert_array_equal(updated.disparity, state.disparity)
        assert updated.hidden.shape == state.hidden.shape

    def test_hidden_update_is_additive(self, rng):
        feat_l, pyr, weights = create_problem(rng)
        silent = replace(weights, hidden_head_w=np.zeros((32, 32)), hidden_head_b=np.zeros(32))
        state = init_state(feat_l, None, silent)

        updated = update_step(state, pyr, silent)

        np.testing.assert_array_equal(updated.hidden, state.hidden)

    def test_disparity_stays_in_range(self, rng):
        feat_l, pyr, weights = create_problem(rng)
        pushed = replace(weights, delta_head_b=np.array([100.0]))
        state = init_state(feat_l, None, pushed)

        for t in range(3):
            state = update_step(state, pyr, pushed, iteration=t)

        np.testing.assert_array_equal(state.disparity, np.full((8, 8), 7.0))

    def test_oracle_lands_on_wta(self, rng):
        _, pyr, _ = create_problem(rng)
        state = RefineState(disparity=np.zeros((8, 8)), hidden=np.zeros((8, 8, 0)))

        updated = update_step(state, pyr, None, mode=RefineMode.ORACLE)

        expected = wta_disparity(CorrelationVolume(volume=pyr.levels[0], feature_dim=25)).disparity
        np.testing.assert_array_equal(updated.disparity, expected)
        # one step is already the fixed point
        again = update_step(updated, pyr, None, mode=RefineMode.ORACLE)
        np.testing.assert_array_equal(again.disparity, updated.disparity)

    def test_oracle_support_window(self, rng):
        _, pyr, _ = create_problem(rng)
        state = RefineState(disparity=np.zeros((8, 8)), hidden=np.zeros((8, 8, 0)))

        updated = update_step(state, pyr, None, mode=RefineMode.ORACLE, subpixel=False, support=1)

        widened = shiftable_max(CorrelationVolume(volume=pyr.levels[0], feature_dim=25), 1)
        np.testing.assert_array_equal(updated.disparity, wta_disparity(widened, subpixel=False).disparity)

    def test_learned_mode_needs_weights(self, rng):
        _, pyr, _ = create_problem(rng)
        state = RefineState(disparity=np.zeros((8, 8)), hidden=np.zeros((8, 8, 32)))

        with pytest.raises(ConfigError):
            update_step(state, pyr, None)

    def test_radius_must_match_weights(self, rng):
        feat_l, pyr, weights = create_problem(rng)
        state = init_state(feat_l, None, weights)

        with pytest.raises(ShapeError):
            update_step(state, pyr, weights, r=2)

    def test_weights_round_trip(self, rng):
        weights = UpdateWeights.initialize(9, rng)
        tensors = weights.to_tensors()
        restored = UpdateWeights.from_tensors(tensors)

        for name, value in restored.to_tensors().items():
            assert np.array_equal(value, tensors[name]), name

    def test_no_context_encoder(self, rng):
        names = UpdateWeights.initialize(9, rng).to_tensors()

        # hidden state comes from the projected left features alone
        assert not any("context" in name or "cnet" in name for name in names)
        assert {"refine.state_init.weight", "refine.state_init.bias"} <= set(names)

    def test_weights_reject_non_finite(self, rng):
        weights = UpdateWeights.initialize(9, rng)
        with pytest.raises(NumericError, match="fuse_w"):
            replace(weights, fuse_w=np.full(weights.fuse_w.shape, np.inf))


# ============================================================================
# Upsampling and pipeline
# ============================================================================


class TestUpsample:
    def test_constant_map(self):
        full = upsample_disparity(np.full((3, 4), 5.0))

        assert full.shape == (12, 16)
        np.testing.assert_allclose(full, 20.0, rtol=1e-15)

    def test_horizontal_ramp(self):
        low = np.broadcast_to(np.arange(6, dtype=np.float64), (2, 6))
        full = upsample_disparity(low)

        # half-pixel centres: full column x samples quarter column (x + 0.5) / 4 - 0.5
        x = np.arange(2, 22)
        np.testing.assert_allclose(full[0, x], x - 1.5, atol=1e-12)
        np.testing.assert_allclose(full[0, :2], 0.0)
        np.testing.assert_allclose(full[0, 22:], 20.0)

    def test_jump_keeps_step_edges(self):
        low = np.array([[0.0, 0.0, 4.0, 4.0]] * 2)

        sharp = upsample_disparity(low, jump=0.5)
        blended = upsample_disparity(low)

        np.testing.assert_array_equal(sharp, 4.0 * np.repeat(np.repeat(low, 4, axis=0), 4, axis=1))
        assert 0.0 < blended[0, 7] < 16.0

    def test_jump_leaves_smooth_maps_bilinear(self):
        low = np.broadcast_to(np.arange(6, dtype=np.float64), (2, 6))

        np.testing.assert_array_equal(upsample_disparity(low, jump=2.0), upsample_disparity(low))

    def test_mono_init_from_full_resolution(self):
        full = np.full((16, 16), 8.0)

        np.testing.assert_allclose(prepare_mono_init(full, (16, 16)), 2.0)

    def test_mono_init_wrong_shape(self):
        with pytest.raises(ShapeError):
            prepare_mono_init(np.zeros((5, 5)), (16, 16))


class TestRunRefinement:
    def test_zero_iterations_return_upsampled_init(self, rng):
        left, right = create_pair(rng)

        result = run_refinement(left, right, None, iters=0, mode=RefineMode.ORACLE)

        np.testing.assert_array_equal(result.disparity, np.zeros((32, 32)))
        assert result.snapshots == []

    def test_zero_iterations_keep_mono_init(self, rng):
        left, right = create_pair(rng)
        mono = np.full((8, 8), 2.0)

        result = run_refinement(left, right, None, iters=0, mode=RefineMode.ORACLE, mono_init=mono)

        np.testing.assert_allclose(result.disparity, 8.0)

    def test_snapshots_per_iteration(self, rng):
        left, right = create_pair(rng)
        weights = UpdateWeights.initialize(25, rng)

        result = run_refinement(left, right, weights, iters=3, return_snapshots=True)

        assert len(result.snapshots) == 3
        np.testing.assert_array_equal(result.snapshots[-1], result.disparity)
        assert result.quarter.shape == (8, 8)
        assert result.pyramid is not None

    def test_deterministic(self, rng):
        left, right = create_pair(rng)
        weights = UpdateWeights.initialize(25, rng)

        first = run_refinement(left, right, weights, iters=2)
        second = run_refinement(left, right, weights, iters=2)

        assert np.array_equal(first.disparity, second.disparity)

    def test_oracle_recovers_shift(self, rng):
        left, right = create_pair(rng, 32, 64, shift=2)
        cfg = RefineConfig(subpixel=False)

        result = run_refinement(left, right, None, iters=1, cfg=cfg, mode=RefineMode.ORACLE, extractor=NCC)

        np.testing.assert_array_equal(result.quarter[2:-2, 4:-2], 2.0)

    def test_shape_mismatch(self, rng):
        left, _ = create_pair(rng)
        with pytest.raises(ShapeError):
            run_refinement(left, left[:, :16], None, mode=RefineMode.ORACLE)

    def test_learned_mode_needs_weights(self, rng):
        left, right = create_pair(rng)
        with pytest.raises(ConfigError):
            run_refinement(left, right, None)

    def test_negative_iterations(self, rng):
        left, right = create_pair(rng)
        with pytest.raises(ConfigError):
            run_refinement(left, right, None, iters=-1, mode=RefineMode.ORACLE)


class TestSequenceLoss:
    def test_later_iterations_weigh_more(self):
        gt = np.zeros((2, 3))

        loss = sequence_loss([gt + 1.0, gt + 2.0], gt, gamma=0.9)

        assert loss == pytest.approx(0.9 * 1.0 + 2.0, abs=1e-15)

    def test_default_gamma_from_config(self):
        gt = np.zeros((2, 3))

        loss = sequence_loss([gt + 1.0, gt + 2.0], gt)

        assert loss == pytest.approx(RefineConfig().loss_gamma * 1.0 + 2.0, abs=1e-15)

    def test_mask_restricts_pixels(self):
        gt = np.zeros((1, 2))
        pred = np.array([[1.0, 100.0]])

        assert sequence_loss([pred], gt, valid=np.array([[True, False]])) == 1.0

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            sequence_loss([np.zeros((2, 2))], np.zeros((2, 2)), valid=np.zeros((2, 2), dtype=bool))

    def test_no_predictions(self):
        with pytest.raises(ConfigError):
            sequence_loss([], np.zeros((2, 2)))

    def test_training_loss_runs_iters_train(self, rng):
        left, right = create_pair(rng, 32, 64, shift=2)
        gt = np.full((32, 64), 9.0)
        once = RefineConfig(subpixel=False, iters_train=1, loss_gamma=0.5)
        twice = replace(once, iters_train=2)

        single = training_loss(left, right, gt, None, once, mode=RefineMode.ORACLE, extractor=NCC)
        double = training_loss(left, right, gt, None, twice, mode=RefineMode.ORACLE, extractor=NCC)

        # the oracle reaches its fixed point in one step, so both iterates score alike
        assert single > 0.0
        assert double == pytest.approx(1.5 * single, rel=1e-12)


# ============================================================================
# Oracle end-to-end on rendered scenes
# ============================================================================


@pytest.mark.slow
class TestOracleScenes:
    @pytest.mark.parametrize("seed", range(20))
    def test_integer_scene_within_half_pixel(self, seed):
        rng = np.random.default_rng(seed)
        rig = CameraRig(baseline_m=BASELINES_M[seed % len(BASELINES_M)])
        spec = sample_scene(rng, rig, num_layers=seed % 2, integer_disparity=True)
        render = render_stereo(spec, rig, seed=seed)
        cfg = RefineConfig(subpixel=False)

        result = run_refinement(
            render.left, render.right, None, iters=1, cfg=cfg, mode=RefineMode.ORACLE, extractor=NCC
        )

        report = end_point_error(result.disparity, render.disparity, mask=~render.occlusion)
        assert report.within_threshold >= 0.99, f"scene {seed}: {report}"
