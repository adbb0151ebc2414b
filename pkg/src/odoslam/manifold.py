"""Rotation-group primitives shared by the estimator and the simulator.

Conventions: rotation matrices are plain (3, 3) float arrays, tangent
vectors are (3,) arrays in radians.  Exp and Log are the Rodrigues forms
with explicit small-angle branches, so every map is safe at the identity
and Log is safe near half-turn rotations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-5


def hat(xi: np.ndarray) -> np.ndarray:
    """Skew matrix such that hat(xi) @ v == np.cross(xi, v)."""
    x, y, z = xi
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat` for a skew-symmetric matrix."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def exp_so3(xi: np.ndarray) -> np.ndarray:
    """Map a rotation vector to a rotation matrix (Rodrigues)."""
    xi = np.asarray(xi, dtype=float)
    theta2 = float(xi @ xi)
    k = hat(xi)
    if theta2 < _SMALL_ANGLE**2:
        # Taylor: sin(t)/t and (1 - cos t)/t^2 around t = 0.
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def exp_so3_many(xis: np.ndarray) -> np.ndarray:
    """Vectorised :func:`exp_so3` for an (N, 3) stack of rotation vectors."""
    xis = np.asarray(xis, dtype=float)
    n = xis.shape[0]
    theta2 = np.einsum("ni,ni->n", xis, xis)
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    k = np.zeros((n, 3, 3))
    k[:, 0, 1] = -xis[:, 2]
    k[:, 0, 2] = xis[:, 1]
    k[:, 1, 0] = xis[:, 2]
    k[:, 1, 2] = -xis[:, 0]
    k[:, 2, 0] = -xis[:, 1]
    k[:, 2, 1] = xis[:, 0]
    kk = np.einsum("nij,njk->nik", k, k)
    return np.eye(3)[None] + a[:, None, None] * k + b[:, None, None] * kk


def log_so3(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix, with norm in [0, pi].

    Near a half turn the skew part of ``rot`` vanishes, so the axis is
    recovered from the symmetric part instead.  At exactly pi the axis
    sign is ambiguous; ties are broken so the first nonzero component of
    the result is nonnegative.
    """
    rot = np.asarray(rot, dtype=float)
    cos_t = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    s = vee(rot - rot.T) / 2.0  # sin(theta) * axis
    if theta < _SMALL_ANGLE:
        # theta/sin(theta) ~ 1 + theta^2/6
        return s * (1.0 + theta * theta / 6.0)
    if theta < np.pi - 0.01:
        return s * (theta / np.sin(theta))
    # Near pi both arccos and the skew part are ill-conditioned for the
    # angle and axis respectively; recover the axis from the symmetric
    # part, (rot + rot.T)/2 = cos*I + (1 - cos) * outer(axis, axis), and
    # the angle from the well-conditioned sine carried by the skew part.
    sin_t = np.linalg.norm(s)
    theta = np.arctan2(sin_t, cos_t)
    outer = ((rot + rot.T) / 2.0 - cos_t * np.eye(3)) / (1.0 - cos_t)
    i = int(np.argmax(np.diag(outer)))
    axis = outer[:, i] / np.sqrt(outer[i, i])
    if sin_t > 1e-12:
        if s @ axis < 0.0:
            axis = -axis
    else:
        for c in axis:
            if abs(c) > 1e-12:
                if c < 0.0:
                    axis = -axis
                break
    return theta * axis


def right_jacobian(xi: np.ndarray) -> np.ndarray:
    """Right Jacobian of the exponential map at ``xi``.

    Satisfies exp(xi + d) ~ exp(xi) @ exp(right_jacobian(xi) @ d) to
    first order in d.
    """
    xi = np.asarray(xi, dtype=float)
    theta2 = float(xi @ xi)
    k = hat(xi)
    if theta2 < _SMALL_ANGLE**2:
        a = 0.5 - theta2 / 24.0
        b = 1.0 / 6.0 - theta2 / 120.0
    else:
        theta = np.sqrt(theta2)
        a = (1.0 - np.cos(theta)) / theta2
        b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) - a * k + b * (k @ k)


def right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse of :func:`right_jacobian`, valid for norms below pi."""
    xi = np.asarray(xi, dtype=float)
    theta2 = float(xi @ xi)
    k = hat(xi)
    if theta2 < _SMALL_ANGLE**2:
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        theta = np.sqrt(theta2)
        sin_t = np.sin(theta)
        if abs(sin_t) < 1e-9:
            # Limit of the closed form as theta approaches pi.
            c = 1.0 / theta2
        else:
            c = 1.0 / theta2 - (1.0 + np.cos(theta)) / (2.0 * theta * sin_t)
    return np.eye(3) + k / 2.0 + c * (k @ k)


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_defect(rot: np.ndarray) -> float:
    """Frobenius distance of rot @ rot.T from the identity."""
    rot = np.asarray(rot, dtype=float)
    return float(np.linalg.norm(rot @ rot.T - np.eye(3)))


def is_rotation(rot: np.ndarray, tol: float = 1e-9) -> bool:
    return rotation_defect(rot) < tol and abs(np.linalg.det(rot) - 1.0) < tol


@dataclass
class Pose:
    """Rigid transform mapping world points into a body frame.

    Stored as (rot, trans) with ``f_body = rot @ f_world + trans``.
    """

    rot: np.ndarray
    trans: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform world points (3,) or (N, 3) into the body frame."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rot.T + self.trans

    def inverse(self) -> "Pose":
        return Pose(self.rot.T, -self.rot.T @ self.trans)

    def compose(self, other: "Pose") -> "Pose":
        """Pose mapping other's world into self's body: self after other."""
        return Pose(self.rot @ other.rot, self.rot @ other.trans + self.trans)

    def position_in_world(self) -> np.ndarray:
        """Origin of the body frame expressed in world coordinates."""
        return -self.rot.T @ self.trans

    def copy(self) -> "Pose":
        return Pose(self.rot.copy(), self.trans.copy())


def retract_pose(pose: Pose, dphi: np.ndarray, dp: np.ndarray) -> Pose:
    """Right-multiplicative update on rotation, body-frame shift on position.

    rot <- rot @ exp(dphi); trans <- trans + rot_old @ dp.  The position
    increment is expressed in the pre-update body frame so the two halves
    of the update commute.
    """
    return Pose(pose.rot @ exp_so3(dphi), pose.trans + pose.rot @ dp)
