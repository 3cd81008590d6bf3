"""Trajectory evaluation and method comparison.

Errors are measured with a segment protocol: the ground-truth trajectory is
cut into fixed-arc-length segments, the estimate is re-anchored to the truth
at each segment start, and the position/heading error is read at the segment
end.  This scores local drift rather than one global alignment, and is
invariant to a rigid transform applied to both trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .baselines import (
    ObjectiveEval,
    SCALE_GRID,
    WeightedSamples,
    hessian_covariance,
    rescale_search,
    sampling_covariance,
)
from .info_filter import fuse_step, init_state
from .scene_model import GridSpec, NetParams, descriptor_to_info, net_forward, rasterize
from .se2 import Pose2, angle_difference, compose, inverse
from .simulator import Dataset, MatchResult, correlative_match, true_global_poses

__all__ = [
    "SegmentStats",
    "segment_errors",
    "dr_trajectory",
    "eso_trajectory",
    "fused_trajectory",
    "fixed_info_provider",
    "learned_info_provider",
    "matcher_results",
    "hessian_covariances",
    "sampling_covariances",
    "MethodRow",
    "CompareResult",
    "compare_methods",
]


# --------------------------------------------------------------------------
# Segment error protocol


@dataclass(slots=True)
class SegmentStats:
    """Per-segment end errors and their aggregates."""

    seg_len: float
    dist_errors: np.ndarray
    heading_errors: np.ndarray

    @property
    def count(self) -> int:
        return self.dist_errors.size

    @property
    def dist_mean(self) -> float:
        return float(np.mean(self.dist_errors))

    @property
    def dist_median(self) -> float:
        return float(np.median(self.dist_errors))

    @property
    def dist_q25(self) -> float:
        return float(np.percentile(self.dist_errors, 25))

    @property
    def dist_q75(self) -> float:
        return float(np.percentile(self.dist_errors, 75))

    @property
    def heading_mean(self) -> float:
        return float(np.mean(self.heading_errors))

    @property
    def heading_median(self) -> float:
        return float(np.median(self.heading_errors))

    @property
    def heading_q25(self) -> float:
        return float(np.percentile(self.heading_errors, 25))

    @property
    def heading_q75(self) -> float:
        return float(np.percentile(self.heading_errors, 75))


def segment_errors(est: np.ndarray, truth: np.ndarray, seg_len: float = 40.0) -> SegmentStats:
    """Re-anchored end-of-segment errors over fixed-arc-length truth segments.

    Parameters
    ----------
    est, truth : np.ndarray
        Global pose trajectories, shape ``(N, 3)``, frame-aligned.
    seg_len : float
        Segment length in meters of ground-truth travel.  A trailing
        remainder shorter than ``seg_len`` is dropped.

    Raises
    ------
    ValueError
        If the trajectory is shorter than one segment.
    """
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    truth = np.asarray(truth, dtype=float).reshape(-1, 3)
    if est.shape != truth.shape:
        raise ValueError("estimate and truth must have the same shape")
    if seg_len <= 0.0:
        raise ValueError("segment length must be positive")
    arc = np.concatenate(
        [[0.0], np.cumsum(np.hypot(np.diff(truth[:, 0]), np.diff(truth[:, 1])))]
    )
    n_segments = int(arc[-1] / seg_len)
    if n_segments < 1:
        raise ValueError("trajectory is shorter than one segment")

    boundaries = [0]
    for k in range(1, n_segments + 1):
        boundaries.append(int(np.searchsorted(arc, k * seg_len)))

    dist_errors = []
    heading_errors = []
    for a, b in zip(boundaries[:-1], boundaries[1:]):
        if b <= a:
            continue
        correction = compose(Pose2.from_array(truth[a]), inverse(Pose2.from_array(est[a])))
        aligned = compose(correction, Pose2.from_array(est[b]))
        dist_errors.append(math.hypot(aligned.dx - truth[b, 0], aligned.dy - truth[b, 1]))
        heading_errors.append(abs(angle_difference(aligned.dtheta, truth[b, 2])))
    return SegmentStats(seg_len, np.array(dist_errors), np.array(heading_errors))


# --------------------------------------------------------------------------
# Trajectory runners


def _accumulate(rels: list[Pose2], start: Pose2) -> np.ndarray:
    pose = start
    out = [pose.as_array()]
    for rel in rels:
        pose = compose(pose, rel)
        out.append(pose.as_array())
    return np.array(out)


def dr_trajectory(dataset: Dataset) -> np.ndarray:
    """Dead reckoning only: accumulate the odometry measurements."""
    return _accumulate([f.u for f in dataset.frames[1:]], dataset.start)


def eso_trajectory(dataset: Dataset) -> np.ndarray:
    """Secondary estimator only: accumulate its pose measurements."""
    return _accumulate([f.z for f in dataset.frames[1:]], dataset.start)


def fused_trajectory(dataset: Dataset, info_provider, sigma0: float = 1e-3) -> np.ndarray:
    """Fuse odometry and secondary measurements with per-frame information.

    ``info_provider(t)`` returns the measurement information matrix for frame
    ``t`` (``t >= 1``); a zero matrix reduces the step to dead reckoning.
    """
    state = init_state(sigma0)
    mu_prev = Pose2.identity()
    pose = dataset.start
    out = [pose.as_array()]
    odo_cov = dataset.config.odo_noise
    for t in range(1, len(dataset.frames)):
        frame = dataset.frames[t]
        state, mu = fuse_step(state, mu_prev, frame.u, odo_cov, frame.z, info_provider(t))
        pose = compose(pose, mu)
        mu_prev = mu
        out.append(pose.as_array())
    return np.array(out)


def fixed_info_provider(sigma: float, scale: float = 1.0):
    """Constant isotropic information ``((scale * sigma^2) I)^-1``."""
    if sigma <= 0.0 or scale <= 0.0:
        raise ValueError("sigma and scale must be positive")
    info = np.eye(3) / (scale * sigma**2)
    return lambda t: info


def learned_info_provider(dataset: Dataset, params: NetParams):
    """Per-frame information from the scene error model on the reference scan.

    The measurement of frame ``t`` is expressed in frame ``t - 1``, so the
    network sees the reference frame's rasterized scan.
    """
    spec = GridSpec(width=params.arch.grid_width, height=params.arch.grid_height)
    grids = [rasterize(f.scan, spec) for f in dataset.frames]
    cache: dict[int, np.ndarray] = {}

    def provider(t: int) -> np.ndarray:
        if t not in cache:
            descriptor, _ = net_forward(params, grids[t - 1])
            cache[t] = descriptor_to_info(descriptor)
        return cache[t]

    return provider


# --------------------------------------------------------------------------
# Matcher-derived baseline covariances


def matcher_results(dataset: Dataset) -> list[MatchResult]:
    """Correlative matches between consecutive scans, initialized at the odometry."""
    cfg = dataset.config
    out = []
    for t in range(1, len(dataset.frames)):
        out.append(
            correlative_match(
                dataset.frames[t - 1].scan,
                dataset.frames[t].scan,
                dataset.frames[t].u,
                cfg.match_window_xy,
                cfg.match_window_heading,
                cfg.match_res_xy,
                cfg.match_res_heading,
            )
        )
    return out


def _quantization_floor(res_xy: float, res_heading: float) -> np.ndarray:
    """Variance of a uniform distribution over one lattice cell per axis."""
    return np.diag([res_xy**2 / 12.0, res_xy**2 / 12.0, res_heading**2 / 12.0])


def hessian_covariances(
    matches: list[MatchResult],
    res_xy: float,
    res_heading: float,
    meas_variance: float = 1.0,
    fallback_sigma: float = 2.0,
) -> list[np.ndarray]:
    """Per-frame covariance from the curvature of the score surface at its peak.

    The negated score is treated as the matching objective and its Hessian
    estimated with second differences on the lattice.  Peaks on the window
    border or with non-positive-definite curvature (flat ridges: the
    under-constrained case) fall back to a weak isotropic covariance of
    ``fallback_sigma``.
    """
    fallback = np.diag([fallback_sigma**2, fallback_sigma**2, fallback_sigma**2])
    out = []
    for match in matches:
        kt, ky, kx = match.peak
        shape = match.scores.shape
        if (
            kt == 0
            or ky == 0
            or kx == 0
            or kt == shape[0] - 1
            or ky == shape[1] - 1
            or kx == shape[2] - 1
        ):
            out.append(fallback)
            continue
        objective = -match.scores.astype(float)
        center = objective[kt, ky, kx]
        # Lattice steps in score-volume axis order (theta, y, x).
        steps = (res_heading, res_xy, res_xy)

        def second(axis_a: int, axis_b: int) -> float:
            idx = [kt, ky, kx]
            if axis_a == axis_b:
                lo = list(idx)
                hi = list(idx)
                lo[axis_a] -= 1
                hi[axis_a] += 1
                return (objective[tuple(hi)] - 2.0 * center + objective[tuple(lo)]) / steps[
                    axis_a
                ] ** 2
            pp = list(idx)
            pm = list(idx)
            mp = list(idx)
            mm = list(idx)
            pp[axis_a] += 1
            pp[axis_b] += 1
            pm[axis_a] += 1
            pm[axis_b] -= 1
            mp[axis_a] -= 1
            mp[axis_b] += 1
            mm[axis_a] -= 1
            mm[axis_b] -= 1
            return (
                objective[tuple(pp)]
                - objective[tuple(pm)]
                - objective[tuple(mp)]
                + objective[tuple(mm)]
            ) / (4.0 * steps[axis_a] * steps[axis_b])

        # Score axes are (theta, y, x); build the Hessian in (x, y, theta) order.
        axis_of = (2, 1, 0)
        hessian = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                hessian[i, j] = second(axis_of[i], axis_of[j])
        hessian = 0.5 * (hessian + hessian.T)
        if np.linalg.eigvalsh(hessian)[0] <= 0.0:
            out.append(fallback)
            continue
        evaluation = ObjectiveEval(center, np.zeros(3), hessian, meas_variance)
        out.append(hessian_covariance(evaluation))
    return out


def sampling_covariances(
    matches: list[MatchResult],
    res_xy: float,
    res_heading: float,
    half_width: int = 7,
) -> list[np.ndarray]:
    """Per-frame covariance from score-weighted candidates around the peak.

    Candidates form a ``(2 * half_width + 1)^2`` translation lattice at the
    matched heading, weighted by their raw scores.  The variance of one
    lattice cell is added so quantization never yields a singular covariance.
    """
    floor = _quantization_floor(res_xy, res_heading)
    out = []
    for match in matches:
        kt, ky, kx = match.peak
        ny, nx = match.scores.shape[1:]
        y_sel = slice(max(0, ky - half_width), min(ny, ky + half_width + 1))
        x_sel = slice(max(0, kx - half_width), min(nx, kx + half_width + 1))
        block = match.scores[kt, y_sel, x_sel].astype(float)
        dx, dy = np.meshgrid(match.dx_offsets[x_sel], match.dy_offsets[y_sel])
        poses = np.column_stack(
            [dx.reshape(-1), dy.reshape(-1), np.full(dx.size, match.dtheta_offsets[kt])]
        )
        if float(block.sum()) <= 0.0 or poses.shape[0] < 2:
            out.append(floor + np.diag([res_xy**2, res_xy**2, res_heading**2]))
            continue
        samples = WeightedSamples.from_scores(poses, block.reshape(-1))
        _, cov = sampling_covariance(samples)
        out.append(cov + floor)
    return out


def _cov_info_provider(covs: list[np.ndarray], scale: float):
    infos = [np.linalg.inv(scale * cov) for cov in covs]
    return lambda t: infos[t - 1]


# --------------------------------------------------------------------------
# Method comparison


@dataclass(slots=True)
class MethodRow:
    """One comparison row: a method, its covariance rescale (if any), its errors."""

    name: str
    scale: float
    stats: SegmentStats


@dataclass(slots=True)
class CompareResult:
    rows: list[MethodRow]
    trajectories: dict[str, np.ndarray]
    truth: np.ndarray
    eval_start: int

    def to_csv_lines(self) -> list[str]:
        lines = [
            "method,scale,n_segments,dist_mean_m,dist_median_m,dist_q25_m,dist_q75_m,"
            "heading_mean_rad,heading_median_rad,heading_q25_rad,heading_q75_rad"
        ]
        for row in self.rows:
            s = row.stats
            scale = repr(row.scale) if math.isfinite(row.scale) else ""
            lines.append(
                f"{row.name},{scale},{s.count},{s.dist_mean!r},{s.dist_median!r},"
                f"{s.dist_q25!r},{s.dist_q75!r},{s.heading_mean!r},{s.heading_median!r},"
                f"{s.heading_q25!r},{s.heading_q75!r}"
            )
        return lines


_DEFAULT_METHODS = ("dr", "eso", "fused_fixed", "fused_hessian", "fused_sampling", "fused_learned")


def compare_methods(
    dataset: Dataset,
    model: NetParams | None = None,
    methods=_DEFAULT_METHODS,
    seg_len: float = 40.0,
    base_sigma: float = 0.1,
    scales=SCALE_GRID,
    calibration_split: float = 0.5,
) -> CompareResult:
    """Run every method on one dataset and tabulate segment errors.

    Baseline covariances are rescaled by grid search on a calibration prefix
    of the trajectory (fraction ``calibration_split``); all reported errors
    come from the remaining evaluation suffix.  The learned model is used
    as-is.  Methods needing a model or scans are skipped when unavailable.
    """
    truth = true_global_poses(dataset)
    n = truth.shape[0]
    split = max(1, min(n - 2, int(n * calibration_split)))

    def calib_err(traj: np.ndarray) -> float:
        return segment_errors(traj[: split + 1], truth[: split + 1], seg_len).dist_mean

    def eval_stats(traj: np.ndarray) -> SegmentStats:
        return segment_errors(traj[split:], truth[split:], seg_len)

    rows: list[MethodRow] = []
    trajectories: dict[str, np.ndarray] = {}

    matches = None
    for name in methods:
        if name == "dr":
            traj = dr_trajectory(dataset)
            scale = math.nan
        elif name == "eso":
            traj = eso_trajectory(dataset)
            scale = math.nan
        elif name == "fused_fixed":
            scale = rescale_search(
                [np.eye(3) * base_sigma**2],
                lambda s: calib_err(fused_trajectory(dataset, fixed_info_provider(base_sigma, s))),
                scales,
            )
            traj = fused_trajectory(dataset, fixed_info_provider(base_sigma, scale))
        elif name in ("fused_hessian", "fused_sampling"):
            if any(f.scan.shape[0] == 0 for f in dataset.frames):
                continue
            if matches is None:
                matches = matcher_results(dataset)
            cfg = dataset.config
            if name == "fused_hessian":
                covs = hessian_covariances(matches, cfg.match_res_xy, cfg.match_res_heading)
            else:
                covs = sampling_covariances(matches, cfg.match_res_xy, cfg.match_res_heading)
            scale = rescale_search(
                covs,
                lambda s: calib_err(fused_trajectory(dataset, _cov_info_provider(covs, s))),
                scales,
            )
            traj = fused_trajectory(dataset, _cov_info_provider(covs, scale))
        elif name == "fused_learned":
            if model is None:
                continue
            traj = fused_trajectory(dataset, learned_info_provider(dataset, model))
            scale = math.nan
        else:
            raise ValueError(f"unknown method {name!r}")
        trajectories[name] = traj
        rows.append(MethodRow(name, scale, eval_stats(traj)))

    return CompareResult(rows, trajectories, truth, split)
