"""Planar rigid-body pose algebra.

Poses are elements of SE(2) stored as ``(dx, dy, dtheta)`` with the heading
kept in ``(-pi, pi]``.  The same type serves for relative poses (frame-to-frame
motion) and for global poses (pose of a frame in a fixed world frame); which
one is meant is a matter of bookkeeping, the algebra is identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Pose2",
    "normalize_angle",
    "angle_difference",
    "to_matrix",
    "from_matrix",
    "compose",
    "inverse",
    "accumulate_global",
    "rotation3",
]

_TAU = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap an angle in radians to the interval ``(-pi, pi]``."""
    wrapped = math.remainder(theta, _TAU)
    # math.remainder returns values in [-pi, pi]; fold the open endpoint.
    if wrapped <= -math.pi:
        wrapped += _TAU
    return wrapped


def angle_difference(a: float, b: float) -> float:
    """Shortest signed angular distance ``a - b``, in ``(-pi, pi]``."""
    return normalize_angle(a - b)


@dataclass(frozen=True, slots=True)
class Pose2:
    """A planar pose ``(dx, dy, dtheta)``.

    Attributes
    ----------
    dx, dy : float
        Translation in meters.
    dtheta : float
        Heading in radians, normalized to ``(-pi, pi]`` on construction.
    """

    dx: float
    dy: float
    dtheta: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.dx) and math.isfinite(self.dy) and math.isfinite(self.dtheta)):
            raise ValueError(f"pose components must be finite, got {(self.dx, self.dy, self.dtheta)}")
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dy", float(self.dy))
        object.__setattr__(self, "dtheta", normalize_angle(float(self.dtheta)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, v: np.ndarray) -> "Pose2":
        v = np.asarray(v, dtype=float).reshape(3)
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta], dtype=float)


def to_matrix(pose: Pose2) -> np.ndarray:
    """Homogeneous 3x3 transform equivalent to ``pose``."""
    c = math.cos(pose.dtheta)
    s = math.sin(pose.dtheta)
    return np.array(
        [
            [c, -s, pose.dx],
            [s, c, pose.dy],
            [0.0, 0.0, 1.0],
        ]
    )


def from_matrix(matrix: np.ndarray, tol: float = 1e-9) -> Pose2:
    """Inverse of :func:`to_matrix`.

    Raises
    ------
    ValueError
        If the matrix is not a proper rigid transform: rotation block not
        orthonormal with determinant 1 within ``tol``, or bottom row not
        ``(0, 0, 1)``.
    """
    m = np.asarray(matrix, dtype=float)
    if m.shape != (3, 3):
        raise ValueError(f"expected 3x3 matrix, got shape {m.shape}")
    if not np.all(np.abs(m[2] - np.array([0.0, 0.0, 1.0])) <= tol):
        raise ValueError("bottom row must be (0, 0, 1)")
    rot = m[:2, :2]
    if not np.all(np.abs(rot.T @ rot - np.eye(2)) <= tol):
        raise ValueError("rotation block is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > tol:
        raise ValueError("rotation block must have determinant 1")
    return Pose2(float(m[0, 2]), float(m[1, 2]), math.atan2(m[1, 0], m[0, 0]))


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Pose composition ``a * b``: apply ``b`` in the frame reached by ``a``.

    Equivalent to the product of the homogeneous matrices of ``a`` and ``b``.
    """
    c = math.cos(a.dtheta)
    s = math.sin(a.dtheta)
    return Pose2(
        a.dx + c * b.dx - s * b.dy,
        a.dy + s * b.dx + c * b.dy,
        a.dtheta + b.dtheta,
    )


def inverse(pose: Pose2) -> Pose2:
    """The pose ``p^-1`` with ``compose(p, p^-1) == identity``."""
    c = math.cos(pose.dtheta)
    s = math.sin(pose.dtheta)
    return Pose2(
        -(c * pose.dx + s * pose.dy),
        -(-s * pose.dx + c * pose.dy),
        -pose.dtheta,
    )


def accumulate_global(global_prev: Pose2, rel: Pose2) -> Pose2:
    """Advance a global pose by one relative motion expressed in its frame."""
    return compose(global_prev, rel)


def rotation3(theta: float) -> np.ndarray:
    """Block-diagonal ``diag(R(theta), 1)`` acting on ``(dx, dy, dtheta)`` vectors.

    Rotates the translation components and leaves the heading component
    untouched; used to re-express distributions over relative poses when the
    reference heading changes.
    """
    c = math.cos(theta)
    s = math.sin(theta)
    return np.array(
        [
            [c, -s, 0.0],
            [s, c, 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
