"""Non-learned measurement covariance estimators.

Three classic ways to attach a covariance to a pose estimator's output: the
inverse Hessian of its objective at the optimum scaled by the sensor noise
variance, the weighted scatter of candidate poses, and a global rescaling of
any base covariance sequence picked by grid search against an error metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .se2 import Pose2

__all__ = [
    "ObjectiveEval",
    "hessian_covariance",
    "WeightedSamples",
    "sampling_covariance",
    "SCALE_GRID",
    "rescale_search",
]


@dataclass(slots=True)
class ObjectiveEval:
    """A matching objective evaluated at its optimum.

    ``meas_variance`` is the variance of the sensor noise driving the
    objective; the covariance of the estimate is ``meas_variance * H^-1``.
    """

    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    meas_variance: float

    def __post_init__(self) -> None:
        self.gradient = np.asarray(self.gradient, dtype=float).reshape(3)
        hessian = np.asarray(self.hessian, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(hessian)):
            raise ValueError("Hessian must be finite")
        asym = float(np.max(np.abs(hessian - hessian.T)))
        if asym > 1e-8 * (1.0 + float(np.max(np.abs(hessian)))):
            raise ValueError(f"Hessian is not symmetric (asymmetry {asym:.3e})")
        self.hessian = 0.5 * (hessian + hessian.T)
        if self.meas_variance <= 0.0:
            raise ValueError("measurement variance must be positive")


def hessian_covariance(evaluation: ObjectiveEval) -> np.ndarray:
    """Laplace-style covariance ``meas_variance * H^-1``.

    Raises
    ------
    ValueError
        If the Hessian is not positive definite (flat or indefinite optimum).
    """
    if np.linalg.eigvalsh(evaluation.hessian)[0] <= 0.0:
        raise ValueError("Hessian is not positive definite at the optimum")
    cov = evaluation.meas_variance * np.linalg.inv(evaluation.hessian)
    return 0.5 * (cov + cov.T)


@dataclass(slots=True)
class WeightedSamples:
    """Candidate poses with normalized nonnegative weights.

    ``poses`` has shape ``(K, 3)``; ``weights`` shape ``(K,)``, summing to 1
    within 1e-12.
    """

    poses: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.weights.shape[0] != self.poses.shape[0]:
            raise ValueError("one weight per pose required")
        if not (np.all(np.isfinite(self.poses)) and np.all(np.isfinite(self.weights))):
            raise ValueError("samples must be finite")
        if np.any(self.weights < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")

    @classmethod
    def from_scores(cls, poses: np.ndarray, scores: np.ndarray) -> "WeightedSamples":
        """Normalize raw nonnegative scores (e.g. hit counts) into weights."""
        scores = np.asarray(scores, dtype=float).reshape(-1)
        total = float(scores.sum())
        if total <= 0.0:
            raise ValueError("scores must have positive total")
        return cls(poses, scores / total)


def sampling_covariance(samples: WeightedSamples) -> tuple[Pose2, np.ndarray]:
    """Weighted mean pose and weighted scatter of the samples around it.

    Raises
    ------
    ValueError
        If fewer than two samples are given (scatter undefined).
    """
    if samples.poses.shape[0] < 2:
        raise ValueError("sampling covariance needs at least two samples")
    mean = samples.weights @ samples.poses
    dev = samples.poses - mean
    cov = dev.T @ (samples.weights[:, None] * dev)
    return Pose2.from_array(mean), 0.5 * (cov + cov.T)


# Thirteen logarithmic scales spanning 2^-6 .. 2^6.
SCALE_GRID = tuple(float(2.0**k) for k in range(-6, 7))


def rescale_search(base_covs, eval_fn, scales=SCALE_GRID) -> float:
    """Pick the covariance rescaling factor minimizing ``eval_fn(scale)``.

    ``base_covs`` is the covariance sequence being rescaled (available to the
    caller's ``eval_fn`` closure).  Scales are tried in ascending order and
    only a strictly smaller error replaces the incumbent, so ties resolve to
    the smallest scale.
    """
    scales = sorted(float(s) for s in scales)
    if not scales:
        raise ValueError("scale grid must be nonempty")
    best_scale = None
    best_err = None
    for scale in scales:
        err = float(eval_fn(scale))
        if best_err is None or err < best_err:
            best_scale = scale
            best_err = err
    return best_scale
