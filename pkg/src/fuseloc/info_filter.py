"""Relative-pose fusion in information (canonical) form.

The filter state is a Gaussian over the *current relative pose* (motion since
the previous frame) kept as an information vector/matrix pair ``xi = Omega mu``,
``Omega = Sigma^-1``.  Each step re-expresses the previous posterior in the new
reference frame, predicts through additive odometry noise, and fuses one or
more pose measurements by adding their information.

Working in information form makes fusing several measurement sources a sum and
keeps a zero-information measurement (``Q = 0``) an exact no-op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .se2 import Pose2, rotation3

__all__ = [
    "SingularStateError",
    "InfoState",
    "StepDetail",
    "init_state",
    "info_to_moments",
    "rotate_information",
    "fuse_step",
    "fuse_step_multi",
    "fuse_step_recorded",
    "translation_scale",
    "eif_fuse_step",
]

# Inversion guard: below this eigenvalue a matrix is treated as numerically
# singular and regularized with _JITTER * I before inverting.
_EIG_FLOOR = 1e-12
_JITTER = 1e-10


class SingularStateError(ValueError):
    """An information matrix required by an operation is numerically singular."""


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _inv_guarded(m: np.ndarray) -> np.ndarray:
    """Invert a symmetric PSD 3x3 matrix, adding jitter if near-singular."""
    if np.linalg.eigvalsh(m)[0] < _EIG_FLOOR:
        m = m + _JITTER * np.eye(3)
    return _sym(np.linalg.inv(m))


def _solve_info(omega: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        out = np.linalg.solve(omega, rhs)
    except np.linalg.LinAlgError as err:
        raise SingularStateError("information matrix is singular") from err
    if not np.all(np.isfinite(out)):
        raise SingularStateError("information matrix solve produced non-finite values")
    return out


@dataclass(slots=True)
class InfoState:
    """Canonical-form Gaussian over a relative pose.

    Attributes
    ----------
    xi : np.ndarray
        Information vector, shape ``(3,)``.
    omega : np.ndarray
        Information matrix, shape ``(3, 3)``, kept exactly symmetric.
    """

    xi: np.ndarray
    omega: np.ndarray

    def __post_init__(self) -> None:
        self.xi = np.asarray(self.xi, dtype=float).reshape(3).copy()
        omega = np.asarray(self.omega, dtype=float).reshape(3, 3)
        if not (np.all(np.isfinite(self.xi)) and np.all(np.isfinite(omega))):
            raise ValueError("information state must be finite")
        asym = float(np.max(np.abs(omega - omega.T)))
        if asym > 1e-8 * (1.0 + float(np.max(np.abs(omega)))):
            raise ValueError(f"information matrix is not symmetric (asymmetry {asym:.3e})")
        self.omega = _sym(omega)


def init_state(sigma0: float = 1e-3) -> InfoState:
    """Near-certain zero relative pose: ``Omega = I / sigma0^2``, ``xi = 0``."""
    if sigma0 <= 0.0:
        raise ValueError("sigma0 must be positive")
    return InfoState(np.zeros(3), np.eye(3) / sigma0**2)


def info_to_moments(state: InfoState) -> tuple[Pose2, np.ndarray]:
    """Recover ``(mean, covariance)`` from canonical form.

    Raises
    ------
    SingularStateError
        If the information matrix has an eigenvalue at or below 1e-12.
    """
    if np.linalg.eigvalsh(state.omega)[0] <= _EIG_FLOOR:
        raise SingularStateError("information matrix has no well-defined moments")
    mu = _solve_info(state.omega, state.xi)
    cov = _sym(np.linalg.inv(state.omega))
    return Pose2.from_array(mu), cov


def rotate_information(state: InfoState, mu_prev: Pose2) -> InfoState:
    """Re-express the previous posterior in the frame it predicted.

    The translation block of the information matrix is rotated by the inverse
    of the previous mean heading (a similarity transform by an orthogonal
    matrix, so the eigenvalue spectrum is preserved) and the information
    vector is reset to zero: the new relative pose is a priori centered at
    the origin of the new frame.
    """
    rot = rotation3(-mu_prev.dtheta)
    return InfoState(np.zeros(3), _sym(rot @ state.omega @ rot.T))


@dataclass(slots=True)
class StepDetail:
    """Intermediate values of one fusion step, for replay and reverse sweeps.

    ``prior_cov`` is the inverse of the rotated prior information (after the
    jitter guard, if it fired), ``pred_info`` the post-prediction information
    matrix, and ``meas_info`` the total fused measurement information.
    ``z_vec`` is only recorded for single-measurement steps.
    """

    theta_prev: float
    omega_prev: np.ndarray
    rot: np.ndarray
    prior_cov: np.ndarray
    pred_info: np.ndarray
    xi_bar: np.ndarray
    meas_info: np.ndarray
    u_vec: np.ndarray
    z_vec: np.ndarray | None
    omega: np.ndarray
    mu_vec: np.ndarray


def _step_core(
    state: InfoState,
    mu_prev: Pose2,
    u: Pose2,
    odo_cov: np.ndarray,
    observations: list[tuple[Pose2, np.ndarray]],
) -> tuple[InfoState, Pose2, StepDetail]:
    rot = rotation3(-mu_prev.dtheta)
    omega_hat = _sym(rot @ state.omega @ rot.T)
    prior_cov = _inv_guarded(omega_hat)
    pred_info = _inv_guarded(prior_cov + np.asarray(odo_cov, dtype=float))
    u_vec = u.as_array()
    xi_bar = pred_info @ u_vec

    info_sum = np.zeros((3, 3))
    xi_meas = np.zeros(3)
    for z, q in observations:
        q = np.asarray(q, dtype=float)
        info_sum = info_sum + q
        xi_meas = xi_meas + q @ z.as_array()

    omega = _sym(pred_info + info_sum)
    xi = xi_meas + xi_bar
    if not info_sum.any():
        # Zero measurement information: the prediction mean passes through
        # exactly instead of via a redundant solve.
        mu_vec = u_vec.copy()
    else:
        mu_vec = _solve_info(omega, xi)

    detail = StepDetail(
        theta_prev=mu_prev.dtheta,
        omega_prev=state.omega,
        rot=rot,
        prior_cov=prior_cov,
        pred_info=pred_info,
        xi_bar=xi_bar,
        meas_info=info_sum,
        u_vec=u_vec,
        z_vec=observations[0][0].as_array() if len(observations) == 1 else None,
        omega=omega,
        mu_vec=mu_vec,
    )
    return InfoState(xi, omega), Pose2.from_array(mu_vec), detail


def fuse_step(
    state: InfoState,
    mu_prev: Pose2,
    u: Pose2,
    odo_cov: np.ndarray,
    z: Pose2,
    meas_info: np.ndarray,
) -> tuple[InfoState, Pose2]:
    """One predict-and-fuse cycle on the relative pose.

    Parameters
    ----------
    state : InfoState
        Posterior of the previous step.
    mu_prev : Pose2
        Previous posterior mean (its heading defines the frame change).
    u : Pose2
        Odometry (dead-reckoning) relative pose for this step.
    odo_cov : np.ndarray
        Additive odometry noise covariance, shape ``(3, 3)``.
    z : Pose2
        Pose measurement from the secondary source.
    meas_info : np.ndarray
        Information matrix of the measurement (inverse covariance); a zero
        matrix ignores the measurement exactly.
    """
    new_state, mu, _ = _step_core(state, mu_prev, u, odo_cov, [(z, meas_info)])
    return new_state, mu


def fuse_step_multi(
    state: InfoState,
    mu_prev: Pose2,
    u: Pose2,
    odo_cov: np.ndarray,
    observations: list[tuple[Pose2, np.ndarray]],
) -> tuple[InfoState, Pose2]:
    """Like :func:`fuse_step` but fusing any number of pose measurements.

    Each observation is a ``(pose, information)`` pair; their information is
    summed, so fusing one observation is bitwise identical to
    :func:`fuse_step` and fusing none returns the prediction mean exactly.
    """
    new_state, mu, _ = _step_core(state, mu_prev, u, odo_cov, list(observations))
    return new_state, mu


def fuse_step_recorded(
    state: InfoState,
    mu_prev: Pose2,
    u: Pose2,
    odo_cov: np.ndarray,
    z: Pose2,
    meas_info: np.ndarray,
) -> tuple[InfoState, Pose2, StepDetail]:
    """:func:`fuse_step` that also returns the step intermediates."""
    return _step_core(state, mu_prev, u, odo_cov, [(z, meas_info)])


def translation_scale(pose: Pose2) -> float:
    """Euclidean norm of the translation part, ``sqrt(dx^2 + dy^2)``."""
    return math.hypot(pose.dx, pose.dy)


def scale_jacobian(u_vec: np.ndarray, sz: float) -> np.ndarray:
    """Jacobian of ``g(x) = sz * x / s(x)`` at ``x = u_vec`` (``s`` = translation norm)."""
    su = math.hypot(u_vec[0], u_vec[1])
    grad_s = np.array([u_vec[0], u_vec[1], 0.0]) / su
    return (sz / su) * (np.eye(3) - np.outer(u_vec, grad_s) / su)


def eif_fuse_step(
    state: InfoState,
    mu_prev: Pose2,
    u: Pose2,
    odo_cov: np.ndarray,
    z: Pose2,
    meas_info: np.ndarray,
    scale_floor: float = 1e-3,
) -> tuple[InfoState, Pose2, bool]:
    """Fusion step for a measurement with unreliable translation scale.

    Models the measurement as ``z = g(x) + noise`` with
    ``g(x) = s(z) * x / s(x)``: the measured translation direction and heading
    are informative while its length is taken from the measurement itself, as
    produced by monocular visual odometry.  The update linearizes ``g`` at the
    prediction mean ``u``.

    Returns
    -------
    (InfoState, Pose2, bool)
        Posterior state, posterior mean, and a flag that is True when the
        prediction translation was at or below ``scale_floor`` meters and the
        measurement was skipped (prediction-only fallback).
    """
    rot = rotation3(-mu_prev.dtheta)
    omega_hat = _sym(rot @ state.omega @ rot.T)
    prior_cov = _inv_guarded(omega_hat)
    pred_info = _inv_guarded(prior_cov + np.asarray(odo_cov, dtype=float))
    u_vec = u.as_array()
    xi_bar = pred_info @ u_vec

    if translation_scale(u) <= scale_floor:
        # Linearization point too close to zero translation: the measurement
        # model direction is undefined, so fall back to prediction only.
        return InfoState(xi_bar, pred_info), Pose2.from_array(u_vec), True

    meas_info = np.asarray(meas_info, dtype=float)
    sz = translation_scale(z)
    su = translation_scale(u)
    z_vec = z.as_array()
    jac = scale_jacobian(u_vec, sz)
    g_u = (sz / su) * u_vec
    omega = _sym(jac.T @ meas_info @ jac + pred_info)
    xi = jac.T @ (meas_info @ (z_vec - g_u + jac @ u_vec)) + xi_bar
    mu_vec = _solve_info(omega, xi)
    return InfoState(xi, omega), Pose2.from_array(mu_vec), False
