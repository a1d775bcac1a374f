import numpy as np
import pytest
import torch

from conftest import tiny_model_config
from sparselift.adaptive import AdaptiveConfig, StrideController, adaptive_infer
from sparselift.errors import SparseliftError
from sparselift.geometry import H36M_SKELETON
from sparselift.inference import predict_dense
from sparselift.network import UpliftModel
from sparselift.sequencing import StrideSchedule
from sparselift.synthetic import MotionSpec, build_dataset


@pytest.fixture(scope="module")
def setup():
    torch.manual_seed(0)
    cfg = tiny_model_config(joints=17, d_joint=8, d_temp=16, heads_spatial=2, heads_temporal=2)
    model = UpliftModel(cfg).eval()
    specs = [MotionSpec(kind="sinusoidal-limbs", duration=250, frame_rate=50.0,
                        skeleton=H36M_SKELETON, amplitude_mm=100.0, frequency_hz=1.0, seed=0)]
    dataset = build_dataset(specs, seed=0)
    return model, dataset


def scripted_velocity(slow=100, fast=50, tail=100, low=0.1, high=0.9):
    return np.concatenate([np.full(slow, low), np.full(fast, high), np.full(tail, low)])


def expected_controller_trace(velocity, cfg: AdaptiveConfig, stride_out: int):
    """Independent re-simulation of the documented controller contract."""
    fast = False
    quiet = 0
    consumed = 0
    trace = np.empty(len(velocity), dtype=np.int64)
    for center in range(0, len(velocity), stride_out):
        for f in range(consumed, center + 1):
            if velocity[f] > cfg.velocity_threshold_mps:
                fast, quiet = True, 0
            else:
                quiet += 1
                if fast and quiet >= cfg.cooldown_frames:
                    fast = False
        consumed = center + 1
        stride = cfg.fast_stride if fast else cfg.slow_stride
        trace[center : center + stride_out] = stride
    return trace


class TestController:
    def test_scripted_trace_exact_switch_frames(self, setup):
        model, dataset = setup
        cfg = AdaptiveConfig(slow_stride=4, fast_stride=2, velocity_threshold_mps=0.5,
                             cooldown_frames=25)
        velocity = scripted_velocity()
        result = adaptive_infer(model, dataset.records[0].poses_2d, cfg, H36M_SKELETON,
                                frame_rate=50.0, oracle_velocity=velocity)
        # Switch up at the first frame above threshold, down exactly
        # cooldown frames after the last exceedance (149 + 25 = 174).
        assert result.switch_frames == [100, 174]
        assert np.all(result.stride_trace[:100] == 4)
        assert np.all(result.stride_trace[100:174] == 2)
        assert np.all(result.stride_trace[174:] == 4)
        expected = expected_controller_trace(velocity, cfg, model.config.schedule.stride_out)
        assert np.array_equal(result.stride_trace, expected)

    def test_always_quiet_trace_constant_slow(self, setup):
        model, dataset = setup
        cfg = AdaptiveConfig(slow_stride=4, fast_stride=2, cooldown_frames=10)
        velocity = np.full(250, 0.05)
        result = adaptive_infer(model, dataset.records[0].poses_2d, cfg, H36M_SKELETON,
                                frame_rate=50.0, oracle_velocity=velocity)
        assert np.all(result.stride_trace == 4)
        assert result.switch_frames == []

    def test_infinite_threshold_equals_plain_slow_inference(self, setup):
        model, dataset = setup
        poses = dataset.records[0].poses_2d
        cfg = AdaptiveConfig(slow_stride=4, fast_stride=2,
                             velocity_threshold_mps=float("inf"), cooldown_frames=10)
        result = adaptive_infer(model, poses, cfg, H36M_SKELETON, frame_rate=50.0)
        plain = predict_dense(model, poses, model.config.schedule.with_stride_in(4), H36M_SKELETON)
        assert np.array_equal(result.poses, plain)
        assert np.all(result.stride_trace == 4)

    def test_equal_strides_identical_to_plain_inference(self, setup):
        model, dataset = setup
        poses = dataset.records[0].poses_2d
        cfg = AdaptiveConfig(slow_stride=4, fast_stride=4, velocity_threshold_mps=0.2,
                             cooldown_frames=5)
        result = adaptive_infer(model, poses, cfg, H36M_SKELETON, frame_rate=50.0)
        plain = predict_dense(model, poses, model.config.schedule.with_stride_in(4), H36M_SKELETON)
        assert result.poses.tobytes() == plain.tobytes()

    def test_trace_changes_only_at_center_boundaries(self):
        torch.manual_seed(1)
        cfg_model = tiny_model_config(joints=17, d_joint=8, d_temp=16, heads_spatial=2,
                                      heads_temporal=2, schedule=StrideSchedule(9, 4, 2),
                                      reduction_strides=(5,))
        model = UpliftModel(cfg_model).eval()
        specs = [MotionSpec(kind="sinusoidal-limbs", duration=100, frame_rate=50.0,
                            skeleton=H36M_SKELETON, seed=1)]
        dataset = build_dataset(specs, seed=1)
        cfg = AdaptiveConfig(slow_stride=8, fast_stride=4, velocity_threshold_mps=0.5,
                             cooldown_frames=6)
        rng = np.random.default_rng(0)
        velocity = rng.uniform(0.0, 1.0, 100)
        result = adaptive_infer(model, dataset.records[0].poses_2d, cfg, H36M_SKELETON,
                                frame_rate=50.0, oracle_velocity=velocity)
        changes = np.nonzero(np.diff(result.stride_trace))[0] + 1
        assert all(c % 2 == 0 for c in changes)
        expected = expected_controller_trace(velocity, cfg, 2)
        assert np.array_equal(result.stride_trace, expected)

    def test_self_measured_velocity_runs(self, setup):
        model, dataset = setup
        cfg = AdaptiveConfig(slow_stride=4, fast_stride=2, velocity_threshold_mps=0.01,
                             cooldown_frames=5)
        result = adaptive_infer(model, dataset.records[0].poses_2d[:60], cfg, H36M_SKELETON,
                                frame_rate=50.0)
        assert result.poses.shape == (60, 17, 3)
        assert set(np.unique(result.stride_trace)) <= {2, 4}

    def test_validation_errors(self, setup):
        model, _ = setup
        with pytest.raises(SparseliftError):
            AdaptiveConfig(slow_stride=2, fast_stride=4).validate(1)
        with pytest.raises(SparseliftError):
            AdaptiveConfig(slow_stride=4, fast_stride=3).validate(2)
        with pytest.raises(SparseliftError):
            AdaptiveConfig(cooldown_frames=0).validate(1)

    def test_controller_state_machine_unit(self):
        cfg = AdaptiveConfig(slow_stride=20, fast_stride=5, velocity_threshold_mps=0.5,
                             cooldown_frames=3)
        c = StrideController(cfg)
        assert c.stride == 20
        c.consume(0.6)
        assert c.stride == 5
        c.consume(0.4)
        c.consume(0.4)
        assert c.stride == 5  # only two quiet frames
        c.consume(0.4)
        assert c.stride == 20  # third quiet frame completes the cooldown
