"""Tests for end-to-end training through the fusion filter.

Oracles:
- the T=1 reverse sweep is checked against a fully symbolic (sympy)
  differentiation of the information-form step, pose composition and loss;
- the full parameter gradient is checked against central finite differences
  of the rolled-out loss;
- rollout behavior is checked against dead reckoning when the learned
  information is negligible and against ground truth on a noise-free run.
"""

import math

import numpy as np
import pytest
import sympy

from fuseloc.scene_model import (
    GridSpec,
    NetArchitecture,
    NetParams,
    init_params,
    load_model,
)
from fuseloc.se2 import Pose2, angle_difference, compose
from fuseloc.simulator import Frame, SimConfig, build_corridor, serpentine_path, simulate_run, true_global_poses
from fuseloc.training import (
    TrainConfig,
    _descriptor_grads,
    backward_update,
    forward_rollout,
    pose_loss,
    pose_loss_grad,
    precompute_grids,
    segment_gradient,
    supervision_gate,
    train,
    write_training_log,
)

SMALL_ARCH = NetArchitecture(
    grid_height=12,
    grid_width=12,
    conv1_channels=3,
    conv1_kernel=3,
    conv1_stride=2,
    conv2_channels=4,
    conv2_kernel=3,
    conv2_stride=1,
    hidden_units=10,
)
SMALL_SPEC = GridSpec(width=12, height=12, cell_size=2.4)


def perturbed_params(seed, scale=0.05):
    params = init_params(SMALL_ARCH, seed=seed)
    rng = np.random.Generator(np.random.Philox(seed + 2000))
    params.theta += rng.normal(scale=scale, size=params.theta.shape)
    return params


def hand_frames(seed, count, gps_at=(0,)):
    """Small synthetic frame sequence with distinct scans and chosen anchors."""
    rng = np.random.Generator(np.random.Philox(seed))
    frames = []
    pose = Pose2(0.2, -0.1, 0.05)
    for t in range(count):
        if t == 0:
            x = u = z = Pose2.identity()
        else:
            x = Pose2(*rng.uniform(0.5, 1.2, 1), *rng.uniform(-0.2, 0.2, 1), rng.uniform(-0.15, 0.15))
            u = Pose2(x.dx + rng.normal(0.0, 0.02), x.dy + rng.normal(0.0, 0.02), x.dtheta + rng.normal(0.0, 0.004))
            z = Pose2(x.dx + rng.normal(0.0, 0.05), x.dy + rng.normal(0.0, 0.01), x.dtheta + rng.normal(0.0, 0.002))
            pose = compose(pose, x)
        scan = rng.uniform(-13.0, 13.0, size=(30, 2))
        gps = None
        if t in gps_at:
            gps = Pose2(
                pose.dx + rng.normal(0.0, 0.05),
                pose.dy + rng.normal(0.0, 0.05),
                pose.dtheta + rng.normal(0.0, 0.002),
            )
        frames.append(Frame(t, x, u, z, scan, gps))
    return frames


def quiet_dataset(seed=0, gps_every=1, amplitude=1.0):
    world = build_corridor(60.0, 6.0)
    path = serpentine_path(5.0, 55.0, amplitude, 15.0)
    cfg = SimConfig(
        beams=0,
        odo_noise=np.zeros((3, 3)),
        eso_mode="inject",
        inject_sigma_along=0.0,
        inject_sigma_across=0.0,
        inject_sigma_heading=0.0,
        gps_sigma_pos=0.0,
        gps_sigma_heading=0.0,
        gps_every=gps_every,
        seed=seed,
    )
    return simulate_run(world, path, cfg)


def noisy_dataset(seed=0, gps_every=5, beams=60):
    world = build_corridor(80.0, 6.0)
    path = serpentine_path(5.0, 75.0, 1.2, 16.0)
    cfg = SimConfig(
        beams=beams,
        eso_mode="inject",
        inject_sigma_along=0.5,
        inject_sigma_across=0.02,
        inject_sigma_heading=math.radians(0.05),
        gps_sigma_pos=0.02,
        gps_sigma_heading=math.radians(0.05),
        gps_every=gps_every,
        seed=seed,
    )
    return simulate_run(world, path, cfg)


class TestPoseLoss:
    def test_zero_at_target(self):
        pose = Pose2(1.0, 2.0, 0.3)
        assert pose_loss(pose, pose, 100.0) == 0.0

    def test_position_only(self):
        assert pose_loss(Pose2(5.0, 0.0, 0.0), Pose2.identity(), 100.0) == 25.0
        assert pose_loss(Pose2(3.0, 4.0, 0.0), Pose2.identity(), 100.0) == pytest.approx(25.0)

    def test_heading_weight(self):
        assert pose_loss(Pose2(0.0, 0.0, 0.1), Pose2.identity(), 100.0) == pytest.approx(1.0)
        assert pose_loss(Pose2(0.0, 0.0, 0.1), Pose2.identity(), 0.0) == 0.0

    def test_heading_error_wraps(self):
        est = Pose2(0.0, 0.0, math.pi - 0.05)
        target = Pose2(0.0, 0.0, -math.pi + 0.05)
        assert pose_loss(est, target, 100.0) == pytest.approx(100.0 * 0.1**2)

    def test_grad_matches_finite_differences(self):
        rng = np.random.Generator(np.random.Philox(101))
        for _ in range(10):
            est = Pose2(*rng.uniform(-2.0, 2.0, 2), rng.uniform(-1.0, 1.0))
            target = Pose2(*rng.uniform(-2.0, 2.0, 2), rng.uniform(-1.0, 1.0))
            grad = pose_loss_grad(est, target, 100.0)
            step = 1e-6
            for k in range(3):
                vec = est.as_array()
                vec[k] += step
                up = pose_loss(Pose2.from_array(vec), target, 100.0)
                vec[k] -= 2.0 * step
                down = pose_loss(Pose2.from_array(vec), target, 100.0)
                assert grad[k] == pytest.approx((up - down) / (2.0 * step), rel=1e-5, abs=1e-7)


class TestSupervisionGate:
    def test_fires_only_strictly_above_threshold(self):
        truth = Pose2(3.0, 0.0, 0.0)
        # 3-sigma boundary with sigma = 1: error exactly 3.0 does not fire.
        assert supervision_gate(truth, Pose2.identity(), sigma=1.0, factor=3.0) is False
        assert supervision_gate(Pose2(3.001, 0.0, 0.0), Pose2.identity(), 1.0, 3.0) is True

    def test_heading_ignored(self):
        a = Pose2(0.0, 0.0, 3.0)
        b = Pose2(0.0, 0.0, -3.0)
        assert supervision_gate(a, b, sigma=0.01, factor=3.0) is False


class TestForwardRollout:
    def test_requires_anchor(self):
        frames = hand_frames(seed=1, count=4, gps_at=(2,))
        grids = precompute_grids(frames, SMALL_SPEC)
        cfg = TrainConfig(steps=2)
        with pytest.raises(ValueError):
            forward_rollout(frames, grids, 0, 2, perturbed_params(1), cfg, np.eye(3) * 1e-4)

    def test_rejects_overrun(self):
        frames = hand_frames(seed=2, count=4)
        grids = precompute_grids(frames, SMALL_SPEC)
        cfg = TrainConfig(steps=4)
        with pytest.raises(ValueError):
            forward_rollout(frames, grids, 0, 4, perturbed_params(2), cfg, np.eye(3) * 1e-4)

    def test_pure_function_bitwise(self):
        frames = hand_frames(seed=3, count=6)
        grids = precompute_grids(frames, SMALL_SPEC)
        cfg = TrainConfig(steps=5)
        params = perturbed_params(3)
        odo = np.diag([4e-4, 4e-4, 1.2e-5])
        t1 = forward_rollout(frames, grids, 0, 5, params, cfg, odo)
        t2 = forward_rollout(frames, grids, 0, 5, params, cfg, odo)
        np.testing.assert_array_equal(t1.trajectory, t2.trajectory)
        for r1, r2 in zip(t1.records, t2.records):
            np.testing.assert_array_equal(r1.descriptor, r2.descriptor)
            np.testing.assert_array_equal(r1.detail.omega, r2.detail.omega)

    def test_negligible_information_reduces_to_dead_reckoning(self):
        # A network whose information output is ~1e-12 I leaves the posterior
        # mean at the odometry prediction; accumulation equals dead reckoning.
        frames = hand_frames(seed=4, count=8)
        grids = precompute_grids(frames, SMALL_SPEC)
        cfg = TrainConfig(steps=7)
        params = init_params(SMALL_ARCH, nominal_sigma=1e6)
        tape = forward_rollout(frames, grids, 0, 7, params, cfg, np.diag([4e-4, 4e-4, 1.2e-5]))
        pose = tape.anchor
        for frame in frames[1:8]:
            pose = compose(pose, frame.u)
        np.testing.assert_allclose(tape.trajectory[-1], pose.as_array(), atol=1e-9)

    def test_noise_free_run_tracks_truth(self):
        dataset = quiet_dataset()
        truth = true_global_poses(dataset)
        grids = precompute_grids(dataset.frames, SMALL_SPEC)
        cfg = TrainConfig(steps=10)
        params = init_params(SMALL_ARCH, nominal_sigma=0.1)
        tape = forward_rollout(
            dataset.frames, grids, 0, 10, params, cfg, np.diag([4e-4, 4e-4, 1.2e-5])
        )
        np.testing.assert_allclose(tape.trajectory, truth[:11], atol=1e-8)

    def test_trajectory_row_zero_is_anchor(self):
        frames = hand_frames(seed=5, count=4)
        grids = precompute_grids(frames, SMALL_SPEC)
        cfg = TrainConfig(steps=3)
        tape = forward_rollout(frames, grids, 0, 3, perturbed_params(5), cfg, np.eye(3) * 1e-4)
        np.testing.assert_array_equal(tape.trajectory[0], tape.anchor.as_array())
        assert len(tape.records) == 3
        assert tape.trajectory.shape == (4, 3)


class TestDescriptorGradOracle:
    def test_single_step_matches_symbolic_pipeline(self):
        # Differentiate the whole chain descriptor -> L L^T -> information
        # step -> pose composition -> loss symbolically and compare with the
        # reverse sweep at the network's actual descriptor output.
        frames = hand_frames(seed=6, count=2, gps_at=(0, 1))
        grids = precompute_grids(frames, SMALL_SPEC)
        cfg = TrainConfig(steps=1, heading_weight=100.0, init_sigma0=1e-3)
        params = perturbed_params(6)
        odo = np.diag([4e-4, 4e-4, 1.2e-5])
        tape = forward_rollout(frames, grids, 0, 1, params, cfg, odo)
        target = frames[1].gps

        final = Pose2.from_array(tape.trajectory[-1])
        grad_final = pose_loss_grad(final, target, cfg.heading_weight)
        sweep = _descriptor_grads(tape, grad_final)[0]

        a = sympy.symbols("a0:6", real=True)
        lower = sympy.Matrix([[a[0], 0, 0], [a[1], a[2], 0], [a[3], a[4], a[5]]])
        q_info = lower * lower.T
        omega_prev = sympy.eye(3) / sympy.Float(cfg.init_sigma0) ** 2
        prior_cov = omega_prev.inv()
        pred_info = (prior_cov + sympy.Matrix(odo)).inv()
        u_vec = sympy.Matrix(frames[1].u.as_array())
        z_vec = sympy.Matrix(frames[1].z.as_array())
        omega = q_info + pred_info
        mu = omega.inv() * (q_info * z_vec + pred_info * u_vec)
        anchor = tape.anchor
        c, s = sympy.cos(anchor.dtheta), sympy.sin(anchor.dtheta)
        gx = anchor.dx + c * mu[0] - s * mu[1]
        gy = anchor.dy + s * mu[0] + c * mu[1]
        gth = anchor.dtheta + mu[2]
        loss = (
            (gx - target.dx) ** 2
            + (gy - target.dy) ** 2
            + cfg.heading_weight * (gth - target.dtheta) ** 2
        )
        subs = dict(zip(a, tape.records[0].descriptor))
        expected = np.array(
            [float(sympy.diff(loss, ak).evalf(subs=subs, chop=True)) for ak in a]
        )
        np.testing.assert_allclose(sweep, expected, rtol=1e-7, atol=1e-10)

    def test_zero_final_gradient_gives_zero_descriptor_gradients(self):
        frames = hand_frames(seed=7, count=4)
        grids = precompute_grids(frames, SMALL_SPEC)
        cfg = TrainConfig(steps=3)
        tape = forward_rollout(frames, grids, 0, 3, perturbed_params(7), cfg, np.eye(3) * 1e-4)
        for g in _descriptor_grads(tape, np.zeros(3)):
            np.testing.assert_array_equal(g, np.zeros(6))

    def test_zero_heading_weight_position_match_zero_grad(self):
        # When the final position equals the target's and headings are
        # ignored, the loss gradient vanishes identically.
        frames = hand_frames(seed=8, count=3)
        grids = precompute_grids(frames, SMALL_SPEC)
        cfg = TrainConfig(steps=2, heading_weight=0.0)
        params = perturbed_params(8)
        tape = forward_rollout(frames, grids, 0, 2, params, cfg, np.eye(3) * 1e-4)
        final = Pose2.from_array(tape.trajectory[-1])
        target = Pose2(final.dx, final.dy, final.dtheta + 0.4)
        loss, grad = segment_gradient(tape, target, params, cfg)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros_like(params.theta))


class TestParameterGradient:
    def test_matches_central_differences_through_rollout(self):
        frames = hand_frames(seed=9, count=5, gps_at=(0, 3))
        grids = precompute_grids(frames, SMALL_SPEC)
        cfg = TrainConfig(steps=3, heading_weight=100.0)
        params = perturbed_params(9)
        odo = np.diag([4e-4, 4e-4, 1.2e-5])
        target = frames[3].gps

        tape = forward_rollout(frames, grids, 0, 3, params, cfg, odo)
        loss, grad = segment_gradient(tape, target, params, cfg)
        assert math.isfinite(loss)

        def loss_at(theta):
            probe = NetParams(SMALL_ARCH, theta)
            probe_tape = forward_rollout(frames, grids, 0, 3, probe, cfg, odo)
            return pose_loss(
                Pose2.from_array(probe_tape.trajectory[-1]), target, cfg.heading_weight
            )

        rng = np.random.Generator(np.random.Philox(109))
        picks = rng.choice(params.theta.size, size=40, replace=False)
        step = 1e-6
        for idx in picks:
            theta = params.theta.copy()
            theta[idx] += step
            up = loss_at(theta)
            theta[idx] -= 2.0 * step
            down = loss_at(theta)
            fd = (up - down) / (2.0 * step)
            assert grad[idx] == pytest.approx(fd, rel=2e-4, abs=1e-9)


class TestBackwardUpdate:
    def test_clipped_step_size(self):
        frames = hand_frames(seed=10, count=4, gps_at=(0, 3))
        grids = precompute_grids(frames, SMALL_SPEC)
        cfg = TrainConfig(steps=3, learning_rate=0.01, clip_norm=1.0)
        params = perturbed_params(10)
        tape = forward_rollout(frames, grids, 0, 3, params, cfg, np.eye(3) * 1e-4)
        # A distant target makes the raw gradient norm exceed the clip bound,
        # so the applied step has norm learning_rate * clip_norm exactly.
        result = backward_update(tape, Pose2(200.0, -150.0, 2.0), params, cfg)
        assert not result.skipped
        assert result.grad_norm > cfg.clip_norm
        delta = np.linalg.norm(result.params.theta - params.theta)
        assert delta == pytest.approx(cfg.learning_rate * cfg.clip_norm, rel=1e-12)

    def test_small_gradient_not_clipped(self):
        frames = hand_frames(seed=10, count=4, gps_at=(0, 3))
        grids = precompute_grids(frames, SMALL_SPEC)
        cfg = TrainConfig(steps=3, learning_rate=0.01, clip_norm=1.0)
        params = perturbed_params(10)
        tape = forward_rollout(frames, grids, 0, 3, params, cfg, np.eye(3) * 1e-4)
        result = backward_update(tape, frames[3].gps, params, cfg)
        assert not result.skipped
        assert 0.0 < result.grad_norm < cfg.clip_norm
        delta = np.linalg.norm(result.params.theta - params.theta)
        assert delta == pytest.approx(cfg.learning_rate * result.grad_norm, rel=1e-12)

    def test_unclipped_when_disabled(self):
        frames = hand_frames(seed=11, count=4, gps_at=(0, 3))
        grids = precompute_grids(frames, SMALL_SPEC)
        cfg = TrainConfig(steps=3, learning_rate=0.01, clip_norm=0.0)
        params = perturbed_params(11)
        tape = forward_rollout(frames, grids, 0, 3, params, cfg, np.eye(3) * 1e-4)
        _, grad = segment_gradient(tape, frames[3].gps, params, cfg)
        result = backward_update(tape, frames[3].gps, params, cfg)
        np.testing.assert_allclose(
            result.params.theta, params.theta - 0.01 * grad, rtol=0.0, atol=0.0
        )

    def test_original_params_not_mutated(self):
        frames = hand_frames(seed=12, count=4, gps_at=(0, 3))
        grids = precompute_grids(frames, SMALL_SPEC)
        cfg = TrainConfig(steps=3)
        params = perturbed_params(12)
        before = params.theta.copy()
        tape = forward_rollout(frames, grids, 0, 3, params, cfg, np.eye(3) * 1e-4)
        backward_update(tape, frames[3].gps, params, cfg)
        np.testing.assert_array_equal(params.theta, before)


class TestTrain:
    def test_zero_epochs_returns_params_unchanged(self):
        dataset = noisy_dataset()
        params = perturbed_params(13)
        cfg = TrainConfig(steps=5, epochs=0)
        result = train(dataset, cfg, params)
        np.testing.assert_array_equal(result.params.theta, params.theta)
        assert result.trace == []
        assert result.skipped_updates == 0

    def test_no_aligned_segments_raises(self):
        dataset = noisy_dataset(gps_every=5)
        cfg = TrainConfig(steps=3, epochs=1)  # 3 never lands on a gps frame
        with pytest.raises(ValueError):
            train(dataset, cfg, perturbed_params(14))

    def test_deterministic_trace(self):
        dataset = noisy_dataset()
        cfg = TrainConfig(steps=5, epochs=2, learning_rate=0.05)
        r1 = train(dataset, cfg, perturbed_params(15))
        r2 = train(dataset, cfg, perturbed_params(15))
        assert [s.mean_loss for s in r1.trace] == [s.mean_loss for s in r2.trace]
        np.testing.assert_array_equal(r1.params.theta, r2.params.theta)

    def test_loss_decreases_on_noisy_run(self):
        dataset = noisy_dataset()
        cfg = TrainConfig(steps=5, epochs=8, learning_rate=0.05)
        params = init_params(SMALL_ARCH, seed=0, nominal_sigma=0.1)
        result = train(dataset, cfg, params)
        assert len(result.trace) == 8
        assert result.skipped_updates == 0
        assert result.trace[-1].mean_loss < result.trace[0].mean_loss

    def test_checkpoints_written(self, tmp_path):
        dataset = noisy_dataset()
        cfg = TrainConfig(steps=5, epochs=2, learning_rate=0.01)
        result = train(dataset, cfg, perturbed_params(16), checkpoint_dir=tmp_path)
        assert (tmp_path / "epoch_0000.mdl").exists()
        last = load_model(tmp_path / "epoch_0001.mdl")
        np.testing.assert_array_equal(last.theta, result.params.theta)

    def test_gated_segmentation_runs(self):
        dataset = noisy_dataset(gps_every=2)
        cfg = TrainConfig(
            steps=5,
            epochs=2,
            learning_rate=0.01,
            segmentation="gated",
            gate_factor=0.5,
        )
        start = perturbed_params(17)
        result = train(dataset, cfg, start)
        assert len(result.trace) == 2
        assert all(math.isfinite(s.mean_loss) for s in result.trace)
        assert not np.array_equal(result.params.theta, start.theta)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(steps=0)
        with pytest.raises(ValueError):
            TrainConfig(segmentation="random")
        with pytest.raises(ValueError):
            TrainConfig(epochs=-1)


class TestTrainingLog:
    def test_log_format(self, tmp_path):
        dataset = noisy_dataset()
        cfg = TrainConfig(steps=5, epochs=2, learning_rate=0.01)
        result = train(dataset, cfg, perturbed_params(18))
        log = tmp_path / "trace.csv"
        write_training_log(log, result.trace)
        lines = log.read_text().splitlines()
        assert lines[0] == "epoch,mean_loss,mean_dist_err_m,mean_heading_err_rad"
        assert len(lines) == 3
        for i, line in enumerate(lines[1:]):
            cells = line.split(",")
            assert int(cells[0]) == i
            for cell in cells[1:]:
                float(cell)
