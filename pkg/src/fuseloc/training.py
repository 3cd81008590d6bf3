"""End-to-end training of the scene error model through the fusion filter.

A training segment replays T fused steps from a globally anchored start pose,
accumulates the fused relative poses into a global trajectory, and scores the
final pose against a sparse noisy global measurement (position error plus a
weighted squared heading error).  The gradient of that loss w.r.t. the network
parameters is obtained by a reverse sweep through the pose accumulation and
every filter step; parameters are updated with plain SGD under a global-norm
gradient clip.

The reverse sweep exploits the filter structure: re-expressing the previous
posterior resets the information vector to zero, so no gradient flows through
the information-vector recurrence.  The recurrent adjoint state is the pair
(gradient w.r.t. the running global pose, gradient w.r.t. the posterior
information matrix) plus a scalar for the previous mean heading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .info_filter import (
    InfoState,
    StepDetail,
    fuse_step_recorded,
    init_state,
)
from .scene_model import (
    ForwardCache,
    GridSpec,
    NetParams,
    SceneGrid,
    descriptor_to_info,
    info_grad_to_descriptor,
    net_backward,
    net_forward,
    rasterize,
)
from .se2 import Pose2, angle_difference, compose
from .simulator import Dataset, Frame

__all__ = [
    "TrainConfig",
    "pose_loss",
    "pose_loss_grad",
    "supervision_gate",
    "RolloutTape",
    "precompute_grids",
    "forward_rollout",
    "segment_gradient",
    "backward_update",
    "EpochStats",
    "TrainResult",
    "train",
    "write_training_log",
]


@dataclass(slots=True)
class TrainConfig:
    """Hyperparameters of the end-to-end trainer.

    ``steps`` is the supervised segment length in frames for fixed
    segmentation; ``segmentation`` may be ``"fixed"`` or ``"gated"`` (segments
    end at the first global measurement whose position error exceeds
    ``gate_factor`` times the supervision noise).  ``supervision_sigma``
    defaults to the dataset's configured global measurement noise.
    """

    steps: int = 100
    heading_weight: float = 100.0
    learning_rate: float = 1e-3
    clip_norm: float = 1.0
    epochs: int = 30
    segmentation: str = "fixed"
    gate_factor: float = 3.0
    supervision_sigma: float | None = None
    init_sigma0: float = 1e-3
    grid_cell_size: float = 2.4

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.segmentation not in ("fixed", "gated"):
            raise ValueError(f"unknown segmentation mode {self.segmentation!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


def pose_loss(est: Pose2, target: Pose2, heading_weight: float) -> float:
    """Squared position error plus ``heading_weight`` times squared wrapped heading error."""
    dth = angle_difference(est.dtheta, target.dtheta)
    return (est.dx - target.dx) ** 2 + (est.dy - target.dy) ** 2 + heading_weight * dth**2


def pose_loss_grad(est: Pose2, target: Pose2, heading_weight: float) -> np.ndarray:
    """Gradient of :func:`pose_loss` w.r.t. the estimated pose components."""
    dth = angle_difference(est.dtheta, target.dtheta)
    return np.array(
        [
            2.0 * (est.dx - target.dx),
            2.0 * (est.dy - target.dy),
            2.0 * heading_weight * dth,
        ]
    )


def supervision_gate(x_global: Pose2, mu_global: Pose2, sigma: float, factor: float = 3.0) -> bool:
    """True when the position error exceeds ``factor * sigma`` strictly.

    Keeps supervision events whose error is plausibly dominated by estimator
    drift rather than by the global measurement's own noise.
    """
    err = math.hypot(x_global.dx - mu_global.dx, x_global.dy - mu_global.dy)
    return err > factor * sigma


@dataclass(slots=True)
class StepRecord:
    """Everything one fused step contributes to the reverse sweep."""

    frame_index: int
    cache: ForwardCache
    descriptor: np.ndarray
    detail: StepDetail


@dataclass(slots=True)
class RolloutTape:
    """Replayable record of one supervised segment.

    ``trajectory[i]`` is the accumulated global mean after ``i`` steps
    (row 0 is the anchor pose); ``records[i]`` belongs to the step producing
    ``trajectory[i + 1]``.
    """

    start_index: int
    anchor: Pose2
    records: list[StepRecord] = field(default_factory=list)
    trajectory: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))


def precompute_grids(frames: list[Frame], spec: GridSpec = GridSpec()) -> list[SceneGrid]:
    """Rasterize every frame's scan once; rollouts reuse them across epochs."""
    return [rasterize(frame.scan, spec) for frame in frames]


def _rollout(
    frames: list[Frame],
    grids: list[SceneGrid],
    start: int,
    params: NetParams,
    cfg: TrainConfig,
    odo_cov: np.ndarray,
    stop_fn,
) -> tuple[RolloutTape, int]:
    """Advance fused steps from ``frames[start]`` until ``stop_fn`` or data end.

    ``stop_fn(t, mu_global)`` is consulted after each step; the rollout stops
    at the first step index ``t`` for which it returns True.  Returns the tape
    and the index of the last frame consumed.
    """
    anchor = frames[start].gps
    if anchor is None:
        raise ValueError(f"segment start frame {frames[start].t} lacks a global measurement")
    state = init_state(cfg.init_sigma0)
    mu_prev = Pose2.identity()
    mu_global = anchor
    tape = RolloutTape(start_index=start, anchor=anchor)
    poses = [anchor.as_array()]
    t = start
    while t + 1 < len(frames):
        t += 1
        frame = frames[t]
        descriptor, cache = net_forward(params, grids[t - 1])
        meas_info = descriptor_to_info(descriptor)
        state, mu, detail = fuse_step_recorded(state, mu_prev, frame.u, odo_cov, frame.z, meas_info)
        mu_global = compose(mu_global, mu)
        mu_prev = mu
        tape.records.append(StepRecord(t, cache, descriptor, detail))
        poses.append(mu_global.as_array())
        if stop_fn(t, mu_global):
            break
    tape.trajectory = np.array(poses)
    return tape, t


def forward_rollout(
    frames: list[Frame],
    grids: list[SceneGrid],
    start: int,
    steps: int,
    params: NetParams,
    cfg: TrainConfig,
    odo_cov: np.ndarray,
) -> RolloutTape:
    """Replayable fused rollout of ``steps`` frames anchored at a global measurement.

    Pure function of its inputs: identical arguments produce a bitwise
    identical tape and trajectory.
    """
    if start + steps >= len(frames):
        raise ValueError("segment extends past the end of the dataset")
    tape, _ = _rollout(frames, grids, start, params, cfg, odo_cov, lambda t, _m: t >= start + steps)
    return tape


def _rotation3_dtheta(theta: float) -> np.ndarray:
    """Derivative of ``rotation3(theta)`` w.r.t. ``theta``."""
    c = math.cos(theta)
    s = math.sin(theta)
    return np.array(
        [
            [-s, -c, 0.0],
            [c, -s, 0.0],
            [0.0, 0.0, 0.0],
        ]
    )


def _descriptor_grads(tape: RolloutTape, grad_final: np.ndarray) -> list[np.ndarray]:
    """Reverse sweep from a final-pose gradient to per-step descriptor gradients.

    Mirrors, in reverse, each operation of the forward step: pose composition,
    the information-form solve, the information sums, both guarded inversions,
    and the rotation of the previous posterior.  The jitter guard's branch is
    treated as constant, which is exact whenever the guard did not change
    branch under an infinitesimal perturbation.
    """
    records = tape.records
    grads = [np.zeros(6)] * len(records)
    g_mu_global = np.asarray(grad_final, dtype=float).copy()
    g_omega_carry = np.zeros((3, 3))
    g_theta_carry = 0.0

    for i in reversed(range(len(records))):
        det = records[i].detail
        mu = det.mu_vec
        theta_prev_global = tape.trajectory[i, 2]

        # mu_global_t = compose(mu_global_{t-1}, mu_t)
        c = math.cos(theta_prev_global)
        s = math.sin(theta_prev_global)
        gx, gy, gth = g_mu_global
        g_mu = np.array([c * gx + s * gy, -s * gx + c * gy, gth])
        g_mu_global = np.array(
            [
                gx,
                gy,
                gth + gx * (-s * mu[0] - c * mu[1]) + gy * (c * mu[0] - s * mu[1]),
            ]
        )
        g_mu[2] += g_theta_carry

        # mu = solve(omega, xi)
        w = np.linalg.solve(det.omega, g_mu)
        g_omega = g_omega_carry - np.outer(w, mu)

        # omega = sym(pred_info + meas_info); xi = meas_info @ z + pred_info @ u
        g_sym = 0.5 * (g_omega + g_omega.T)
        g_meas_info = g_sym + np.outer(w, det.z_vec)
        g_pred_info = g_sym + np.outer(w, det.u_vec)

        # pred_info = sym(inv(prior_cov + odo_cov))
        g_pi = 0.5 * (g_pred_info + g_pred_info.T)
        g_prior_cov = -det.pred_info @ g_pi @ det.pred_info

        # prior_cov = sym(inv(omega_hat))
        g_pc = 0.5 * (g_prior_cov + g_prior_cov.T)
        g_omega_hat = -det.prior_cov @ g_pc @ det.prior_cov

        # omega_hat = sym(rot @ omega_prev @ rot.T), rot = rotation3(-theta_prev)
        g_h = 0.5 * (g_omega_hat + g_omega_hat.T)
        g_omega_carry = det.rot.T @ g_h @ det.rot
        drot = -_rotation3_dtheta(-det.theta_prev)
        g_theta_carry = float(
            np.sum(g_h * (drot @ det.omega_prev @ det.rot.T + det.rot @ det.omega_prev @ drot.T))
        )

        grads[i] = info_grad_to_descriptor(records[i].descriptor, g_meas_info)

    return grads


def segment_gradient(
    tape: RolloutTape, target: Pose2, params: NetParams, cfg: TrainConfig
) -> tuple[float, np.ndarray]:
    """Loss at the segment end and its gradient w.r.t. the flat parameters."""
    final = Pose2.from_array(tape.trajectory[-1])
    loss = pose_loss(final, target, cfg.heading_weight)
    grad_final = pose_loss_grad(final, target, cfg.heading_weight)
    descriptor_grads = _descriptor_grads(tape, grad_final)
    grad = np.zeros_like(params.theta)
    for record, g_desc in zip(tape.records, descriptor_grads):
        grad += net_backward(params, record.cache, g_desc)
    return loss, grad


@dataclass(slots=True)
class UpdateResult:
    params: NetParams
    loss: float
    grad_norm: float
    skipped: bool


def backward_update(
    tape: RolloutTape, target: Pose2, params: NetParams, cfg: TrainConfig
) -> UpdateResult:
    """One SGD update from one supervised segment.

    The gradient is clipped to ``clip_norm`` in global L2 norm; a non-finite
    gradient skips the update and reports it instead of corrupting the
    parameters.
    """
    loss, grad = segment_gradient(tape, target, params, cfg)
    norm = float(np.linalg.norm(grad))
    if not (math.isfinite(loss) and math.isfinite(norm)):
        return UpdateResult(params, loss, norm, True)
    if cfg.clip_norm > 0.0 and norm > cfg.clip_norm:
        grad = grad * (cfg.clip_norm / norm)
    theta = params.theta - cfg.learning_rate * grad
    return UpdateResult(NetParams(params.arch, theta), loss, norm, False)


@dataclass(slots=True)
class EpochStats:
    epoch: int
    mean_loss: float
    mean_dist_err_m: float
    mean_heading_err_rad: float


@dataclass(slots=True)
class TrainResult:
    params: NetParams
    trace: list[EpochStats]
    skipped_updates: int


def _fixed_segments(frames: list[Frame], steps: int) -> list[int]:
    """Starts of supervised fixed-length segments: both ends carry a global pose."""
    starts = []
    for start in range(0, len(frames) - steps, steps):
        if frames[start].gps is not None and frames[start + steps].gps is not None:
            starts.append(start)
    return starts


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    params: NetParams,
    checkpoint_dir=None,
) -> TrainResult:
    """Epochs of per-segment SGD over a dataset, in deterministic order.

    Segments are visited in trajectory order with no shuffling, so training is
    a pure function of ``(dataset, cfg, params)``.  When ``checkpoint_dir`` is
    given, the parameters are saved there after every epoch.
    """
    from .scene_model import save_model  # local import to keep module load light

    frames = dataset.frames
    sigma = cfg.supervision_sigma
    if sigma is None:
        sigma = dataset.config.gps_sigma_pos
    grid_spec = GridSpec(
        width=params.arch.grid_width,
        height=params.arch.grid_height,
        cell_size=cfg.grid_cell_size,
    )
    grids = precompute_grids(frames, grid_spec)
    odo_cov = dataset.config.odo_noise

    if cfg.segmentation == "fixed":
        starts = _fixed_segments(frames, cfg.steps)
        if not starts:
            raise ValueError("dataset contains no supervised segment of the configured length")

    trace: list[EpochStats] = []
    skipped = 0
    for epoch in range(cfg.epochs):
        losses: list[float] = []
        dist_errs: list[float] = []
        head_errs: list[float] = []

        if cfg.segmentation == "fixed":
            segments = [(s, s + cfg.steps) for s in starts]
            for start, end in segments:
                tape = forward_rollout(frames, grids, start, end - start, params, cfg, odo_cov)
                target = frames[end].gps
                result = backward_update(tape, target, params, cfg)
                params = result.params
                skipped += int(result.skipped)
                losses.append(result.loss)
                final = Pose2.from_array(tape.trajectory[-1])
                dist_errs.append(math.hypot(final.dx - target.dx, final.dy - target.dy))
                head_errs.append(abs(angle_difference(final.dtheta, target.dtheta)))
        else:
            start = next((i for i, f in enumerate(frames) if f.gps is not None), None)
            if start is None:
                raise ValueError("dataset has no global measurements")
            while start + 1 < len(frames):
                def fires(t: int, mu_global: Pose2) -> bool:
                    frame = frames[t]
                    return frame.gps is not None and supervision_gate(
                        frame.gps, mu_global, sigma, cfg.gate_factor
                    )

                tape, end = _rollout(frames, grids, start, params, cfg, odo_cov, fires)
                target = frames[end].gps
                if target is None or not fires(end, Pose2.from_array(tape.trajectory[-1])):
                    break  # ran off the end without a gated supervision event
                result = backward_update(tape, target, params, cfg)
                params = result.params
                skipped += int(result.skipped)
                losses.append(result.loss)
                final = Pose2.from_array(tape.trajectory[-1])
                dist_errs.append(math.hypot(final.dx - target.dx, final.dy - target.dy))
                head_errs.append(abs(angle_difference(final.dtheta, target.dtheta)))
                start = end

        if losses:
            stats = EpochStats(
                epoch, float(np.mean(losses)), float(np.mean(dist_errs)), float(np.mean(head_errs))
            )
        else:
            stats = EpochStats(epoch, math.nan, math.nan, math.nan)
        trace.append(stats)
        if checkpoint_dir is not None:
            save_model(f"{checkpoint_dir}/epoch_{epoch:04d}.mdl", params)

    return TrainResult(params, trace, skipped)


def write_training_log(path, trace: list[EpochStats]) -> None:
    """CSV log: ``epoch,mean_loss,mean_dist_err_m,mean_heading_err_rad``."""
    with open(path, "w", newline="") as fh:
        fh.write("epoch,mean_loss,mean_dist_err_m,mean_heading_err_rad\n")
        for row in trace:
            fh.write(
                f"{row.epoch},{row.mean_loss!r},{row.mean_dist_err_m!r},{row.mean_heading_err_rad!r}\n"
            )
