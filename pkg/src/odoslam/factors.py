"""Residuals, covariances, robust weighting, and analytic Jacobians.

Five factor types constrain frame states (pose + gyro bias) and
landmarks: the preintegrated odometer constraint between two frames, a
gyro-bias random walk, monocular reprojection, a soft planar-motion
constraint against an anchor frame, and a marginalization prior.

Tangent ordering per frame is (dphi, dp, db_g), matching the retraction
rot <- rot @ Exp(dphi), trans <- trans + rot @ dp, bias <- bias + db.
Landmarks retract additively.  All Jacobians are with respect to those
tangent coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Hashable, Optional, Tuple

import numpy as np

from .manifold import Pose, exp_so3, hat, log_so3, right_jacobian, right_jacobian_inv
from .preintegration import PreintegratedOdometer, correct_for_bias
from .sensors import DEPTH_EPSILON, BehindCamera, CameraModel, Extrinsics

# 95% quantile of chi2 with 2 dof is 5.991; Huber transitions at its root.
HUBER_DELTA_REPROJECTION = 2.447

Key = Hashable


@dataclass
class FrameState:
    """One estimated frame: world-to-odometer pose plus gyro bias."""

    pose: Pose
    bias_g: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self) -> "FrameState":
        return FrameState(self.pose.copy(), self.bias_g.copy())

    def retract(self, delta: np.ndarray) -> "FrameState":
        """Apply a 9-vector tangent step (dphi, dp, db_g)."""
        return FrameState(
            Pose(self.pose.rot @ exp_so3(delta[:3]), self.pose.trans + self.pose.rot @ delta[3:6]),
            self.bias_g + delta[6:9],
        )


@dataclass
class Landmark:
    id: int
    position: np.ndarray

    def copy(self) -> "Landmark":
        return Landmark(self.id, self.position.copy())


@dataclass
class PriorState:
    """Marginalized estimate of a frame kept from the previous solve."""

    R_tilde: np.ndarray
    p_tilde: np.ndarray
    b_tilde: np.ndarray
    cov: np.ndarray  # 9x9 over (dphi, dp, db_g)


@dataclass
class RobustKernel:
    huber_delta: float = HUBER_DELTA_REPROJECTION

    def __post_init__(self):
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")


def huber_weight(squared_norm: float, kernel: RobustKernel) -> float:
    """IRLS weight for a whitened squared residual norm."""
    if squared_norm < 0:
        raise ValueError("squared_norm must be nonnegative")
    root = np.sqrt(squared_norm)
    if root <= kernel.huber_delta:
        return 1.0
    return kernel.huber_delta / root


def huber_cost(squared_norm: float, kernel: Optional[RobustKernel]) -> float:
    """Robust cost of a whitened squared norm; quadratic inside delta."""
    if kernel is None:
        return float(squared_norm)
    d = kernel.huber_delta
    if squared_norm <= d * d:
        return float(squared_norm)
    return float(2.0 * d * np.sqrt(squared_norm) - d * d)


@lru_cache(maxsize=256)
def _sqrt_information_cached(cov_bytes: bytes, n: int) -> np.ndarray:
    cov = np.frombuffer(cov_bytes, dtype=np.float64).reshape(n, n)
    info = np.linalg.inv(cov)
    info = (info + info.T) / 2.0
    w = np.linalg.cholesky(info).T
    w.setflags(write=False)
    return w


def sqrt_information(cov: np.ndarray) -> np.ndarray:
    """Upper-triangular W with W^T W = cov^{-1}; whitens residuals.

    Many factors share one covariance (every reprojection in a problem,
    for instance), so results are memoized; the returned array is
    read-only.
    """
    cov = np.ascontiguousarray(cov, dtype=np.float64)
    return _sqrt_information_cached(cov.tobytes(), cov.shape[0])


# ---------------------------------------------------------------------------
# residual functions


def odometer_residual(xi: FrameState, xj: FrameState, p: PreintegratedOdometer) -> np.ndarray:
    """Mismatch between the preintegrated increment and the state pair.

    The measured increment is first re-targeted to frame i's current
    bias estimate through the stored bias Jacobians.
    """
    delta_R, delta_p = correct_for_bias(p, xi.bias_g)
    ri, pi = xi.pose.rot, xi.pose.trans
    rj, pj = xj.pose.rot, xj.pose.trans
    r_rot = log_so3(delta_R @ rj @ ri.T)
    r_pos = -ri @ rj.T @ pj + pi - delta_p
    return np.concatenate([r_rot, r_pos])


def bias_residual(xi: FrameState, xj: FrameState) -> np.ndarray:
    return xj.bias_g - xi.bias_g


def reprojection_residual(
    x: FrameState, l: Landmark, pixel: np.ndarray, ext: Extrinsics, cam: CameraModel
) -> np.ndarray:
    """Predicted-minus-measured pixel; raises BehindCamera on bad depth."""
    r, _, _, depth = reprojection_terms(
        x.pose.rot, x.pose.trans, l.position[None, :], np.asarray(pixel, dtype=float)[None, :], ext, cam
    )
    if depth[0] <= DEPTH_EPSILON:
        raise BehindCamera(f"landmark {l.id} at depth {depth[0]:.3g}")
    return r[0]


def plane_residual(xk: FrameState, x1: FrameState) -> np.ndarray:
    """Out-of-plane tilt and height of frame k relative to anchor frame 1.

    First two components read the anchor's plane normal in frame k's
    first two axes; the third is the height of frame k's origin over the
    anchor plane.  All three vanish for planar motion.
    """
    rk, pk = xk.pose.rot, xk.pose.trans
    r1, p1 = x1.pose.rot, x1.pose.trans
    tilt = (rk @ (r1.T @ _E3))[:2]
    height = _E3 @ (-r1 @ rk.T @ pk + p1)
    return np.array([tilt[0], tilt[1], height])


_E3 = np.array([0.0, 0.0, 1.0])


def prior_residual(x: FrameState, prior: PriorState) -> np.ndarray:
    r_rot = log_so3(prior.R_tilde.T @ x.pose.rot)
    r_pos = x.pose.trans - prior.p_tilde
    r_bias = x.bias_g - prior.b_tilde
    return np.concatenate([r_rot, r_pos, r_bias])


def reprojection_terms(
    rot: np.ndarray,
    trans: np.ndarray,
    points: np.ndarray,
    pixels: np.ndarray,
    ext: Extrinsics,
    cam: CameraModel,
    jacobians: bool = True,
) -> Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray], np.ndarray]:
    """Vectorised residuals and Jacobians for one frame's observations.

    points (N, 3) world landmarks, pixels (N, 2) measurements.  Returns
    (residual (N, 2), J_pose (N, 2, 9), J_point (N, 2, 3), depth (N,));
    the Jacobian pair is None when jacobians=False (cost-only passes).
    Rows with depth <= DEPTH_EPSILON contain garbage and must be masked
    by the caller; this is the single implementation the per-factor API
    and the batched optimizer path both use.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    f_o = points @ rot.T + trans
    f_c = f_o @ ext.R_C_O.T + ext.p_C_O
    z = f_c[:, 2]
    safe = np.where(z > DEPTH_EPSILON, z, 1.0)
    pred = np.empty((n, 2))
    pred[:, 0] = cam.fx * f_c[:, 0] / safe + cam.cx
    pred[:, 1] = cam.fy * f_c[:, 1] / safe + cam.cy
    residual = pred - pixels
    if not jacobians:
        return residual, None, None, z

    # d(pixel)/d(camera point)
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = cam.fx / safe
    dpi[:, 0, 2] = -cam.fx * f_c[:, 0] / safe**2
    dpi[:, 1, 1] = cam.fy / safe
    dpi[:, 1, 2] = -cam.fy * f_c[:, 1] / safe**2

    rco_r = ext.R_C_O @ rot
    # camera point depends on the world point through R_C_O @ rot
    j_point = np.matmul(dpi, rco_r)
    j_pose = np.zeros((n, 2, 9))
    # rotation: d f_o = -rot @ hat(f_w) dphi
    hat_pts = np.zeros((n, 3, 3))
    hat_pts[:, 0, 1] = -points[:, 2]
    hat_pts[:, 0, 2] = points[:, 1]
    hat_pts[:, 1, 0] = points[:, 2]
    hat_pts[:, 1, 2] = -points[:, 0]
    hat_pts[:, 2, 0] = -points[:, 1]
    hat_pts[:, 2, 1] = points[:, 0]
    j_pose[:, :, :3] = -np.matmul(j_point, hat_pts)
    # position: d f_o = rot @ dp, same chain as the point block
    j_pose[:, :, 3:6] = j_point
    return residual, j_pose, j_point, z


# ---------------------------------------------------------------------------
# factor classes


class Factor:
    """Base: residual dimension, connected variable keys, noise model."""

    dim: int
    keys: Tuple[Key, ...]
    robust: bool = False

    def residual(self, values: Dict[Key, object]) -> np.ndarray:
        raise NotImplementedError

    def linearize(self, values: Dict[Key, object]) -> Tuple[np.ndarray, Dict[Key, np.ndarray]]:
        """Raw residual and per-key Jacobian blocks at the current values."""
        raise NotImplementedError


class OdometerFactor(Factor):
    dim = 6

    def __init__(self, key_i: Key, key_j: Key, preint: PreintegratedOdometer):
        if preint.count < 1:
            raise ValueError("preintegration must cover at least one step")
        self.keys = (key_i, key_j)
        self.preint = preint
        self.sqrt_info = sqrt_information(preint.cov)

    def residual(self, values):
        xi, xj = values[self.keys[0]], values[self.keys[1]]
        return odometer_residual(xi, xj, self.preint)

    def linearize(self, values):
        xi, xj = values[self.keys[0]], values[self.keys[1]]
        p = self.preint
        db = xi.bias_g - p.bias_ref
        delta_R, delta_p = correct_for_bias(p, xi.bias_g)
        ri, pi = xi.pose.rot, xi.pose.trans
        rj, pj = xj.pose.rot, xj.pose.trans

        r_rot = log_so3(delta_R @ rj @ ri.T)
        r_pos = -ri @ rj.T @ pj + pi - delta_p
        r = np.concatenate([r_rot, r_pos])

        jr_inv = right_jacobian_inv(r_rot)
        ji = np.zeros((6, 9))
        jj = np.zeros((6, 9))
        # rotation rows
        ji[:3, :3] = -jr_inv @ ri
        jj[:3, :3] = jr_inv @ ri
        ji[:3, 6:9] = jr_inv @ ri @ rj.T @ right_jacobian(p.dR_dbg @ db) @ p.dR_dbg
        # position rows
        rj_pj = rj.T @ pj
        ji[3:, :3] = ri @ hat(rj_pj)
        jj[3:, :3] = -ri @ hat(rj_pj)
        ji[3:, 3:6] = ri
        jj[3:, 3:6] = -ri
        ji[3:, 6:9] = -p.dp_dbg
        return r, {self.keys[0]: ji, self.keys[1]: jj}


class BiasWalkFactor(Factor):
    """Random-walk constraint between consecutive bias estimates."""

    dim = 3

    def __init__(self, key_i: Key, key_j: Key, walk_cov: np.ndarray):
        self.keys = (key_i, key_j)
        self.sqrt_info = sqrt_information(walk_cov)

    def residual(self, values):
        return bias_residual(values[self.keys[0]], values[self.keys[1]])

    def linearize(self, values):
        r = self.residual(values)
        ji = np.zeros((3, 9))
        jj = np.zeros((3, 9))
        ji[:, 6:9] = -np.eye(3)
        jj[:, 6:9] = np.eye(3)
        return r, {self.keys[0]: ji, self.keys[1]: jj}


class ReprojectionFactor(Factor):
    dim = 2
    robust = True

    def __init__(self, frame_key: Key, landmark_key: Key, pixel: np.ndarray, ext: Extrinsics, cam: CameraModel, pixel_cov: np.ndarray):
        self.keys = (frame_key, landmark_key)
        self.pixel = np.asarray(pixel, dtype=float)
        self.ext = ext
        self.cam = cam
        self.sqrt_info = sqrt_information(pixel_cov)

    def residual(self, values):
        x, lm = values[self.keys[0]], values[self.keys[1]]
        return reprojection_residual(x, lm, self.pixel, self.ext, self.cam)

    def linearize(self, values):
        x, lm = values[self.keys[0]], values[self.keys[1]]
        r, j_pose, j_point, depth = reprojection_terms(
            x.pose.rot, x.pose.trans, lm.position[None, :], self.pixel[None, :], self.ext, self.cam
        )
        if depth[0] <= DEPTH_EPSILON:
            raise BehindCamera(f"landmark {lm.id} at depth {depth[0]:.3g}")
        return r[0], {self.keys[0]: j_pose[0], self.keys[1]: j_point[0]}


class PlaneFactor(Factor):
    """Soft planar-motion constraint of a frame against the anchor frame."""

    dim = 3

    def __init__(self, key_k: Key, key_anchor: Key, plane_cov: np.ndarray):
        self.keys = (key_k, key_anchor)
        self.sqrt_info = sqrt_information(plane_cov)

    def residual(self, values):
        return plane_residual(values[self.keys[0]], values[self.keys[1]])

    def linearize(self, values):
        xk, x1 = values[self.keys[0]], values[self.keys[1]]
        rk, pk = xk.pose.rot, xk.pose.trans
        r1, p1 = x1.pose.rot, x1.pose.trans
        r = plane_residual(xk, x1)

        jk = np.zeros((3, 9))
        j1 = np.zeros((3, 9))
        n1 = r1.T @ _E3  # anchor plane normal in world coordinates
        rk_pk = rk.T @ pk
        e3_r1 = _E3 @ r1
        jk[:2, :3] = (-rk @ hat(n1))[:2]
        j1[:2, :3] = (rk @ hat(n1))[:2]
        jk[2, :3] = -e3_r1 @ hat(rk_pk)
        jk[2, 3:6] = -e3_r1
        j1[2, :3] = e3_r1 @ hat(rk_pk)
        j1[2, 3:6] = e3_r1
        return r, {self.keys[0]: jk, self.keys[1]: j1}


class PriorFactor(Factor):
    dim = 9

    def __init__(self, key: Key, prior: PriorState):
        self.keys = (key,)
        self.prior = prior
        self.sqrt_info = sqrt_information(prior.cov)

    def residual(self, values):
        return prior_residual(values[self.keys[0]], self.prior)

    def linearize(self, values):
        x = values[self.keys[0]]
        r = self.residual(values)
        j = np.zeros((9, 9))
        j[:3, :3] = right_jacobian_inv(r[:3])
        j[3:6, 3:6] = x.pose.rot
        j[6:9, 6:9] = np.eye(3)
        return r, {self.keys[0]: j}


def analytic_jacobians(factor: Factor, values: Dict[Key, object]) -> Dict[Key, np.ndarray]:
    """Per-variable Jacobian blocks of a factor at the given values."""
    return factor.linearize(values)[1]
