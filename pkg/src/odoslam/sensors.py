"""Measurement records, noise parameters, calibration, and projection.

Frames: W is the world, O the odometer (body) frame, B the gyro frame,
C the camera frame.  A body pose stores the world-to-body transform, so
``f_body = rot @ f_world + trans``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .manifold import Pose, is_rotation

DEPTH_EPSILON = 1e-6


class BehindCamera(Exception):
    """Projected point has non-positive camera-frame depth."""


@dataclass
class GyroSample:
    timestamp: float
    omega: np.ndarray  # rad/s, gyro frame


@dataclass
class WheelSample:
    timestamp: float
    dist_left: float  # meters traveled since the previous sample
    dist_right: float


@dataclass
class FeatureObservation:
    frame_id: int
    landmark_id: int
    pixel: np.ndarray  # (u, v) pixels
    timestamp: float = 0.0


@dataclass
class NoiseParams:
    """Discrete-time noise covariances for every sensor channel.

    sigma_gyro is the per-sample rate-noise covariance (rad/s)^2,
    sigma_encoder the per-sample variance of each wheel's distance
    increment (m^2), sigma_bias_walk the bias random-walk intensity
    (rad/s)^2 per second, sigma_plane the planar-motion soft-constraint
    covariance, sigma_pixel the image-noise covariance (px^2).
    """

    sigma_gyro: np.ndarray
    sigma_encoder: float
    sigma_bias_walk: np.ndarray
    sigma_plane: np.ndarray
    sigma_pixel: np.ndarray

    @staticmethod
    def from_scalars(
        gyro_std: float = 1e-3,
        encoder_std: float = 1e-3,
        bias_walk_std: float = 1e-5,
        plane_std: float = 1e-3,
        pixel_std: float = 0.5,
    ) -> "NoiseParams":
        """Isotropic covariances from per-axis standard deviations."""
        return NoiseParams(
            sigma_gyro=np.eye(3) * gyro_std**2,
            sigma_encoder=encoder_std**2,
            sigma_bias_walk=np.eye(3) * bias_walk_std**2,
            sigma_plane=np.eye(3) * plane_std**2,
            sigma_pixel=np.eye(2) * pixel_std**2,
        )

    def validate(self) -> None:
        for name in ("sigma_gyro", "sigma_bias_walk", "sigma_plane", "sigma_pixel"):
            m = getattr(self, name)
            if not np.allclose(m, m.T):
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(m)) < -1e-12:
                raise ValueError(f"{name} must be positive semi-definite")
        if self.sigma_encoder < 0.0:
            raise ValueError("sigma_encoder must be nonnegative")


@dataclass
class Extrinsics:
    """Calibrated transforms: gyro->odometer rotation and odometer->camera."""

    R_C_O: np.ndarray = field(default_factory=lambda: np.eye(3))
    p_C_O: np.ndarray = field(default_factory=lambda: np.zeros(3))
    R_O_B: np.ndarray = field(default_factory=lambda: np.eye(3))

    def validate(self) -> None:
        for name in ("R_C_O", "R_O_B"):
            if not is_rotation(getattr(self, name), tol=1e-8):
                raise ValueError(f"{name} is not a rotation matrix")


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def contains(self, pix: np.ndarray) -> np.ndarray:
        """Boolean mask of pixels inside the image bounds; works on (2,) or (N, 2)."""
        pix = np.atleast_2d(pix)
        ok = (
            (pix[:, 0] >= 0.0)
            & (pix[:, 0] <= self.width - 1)
            & (pix[:, 1] >= 0.0)
            & (pix[:, 1] <= self.height - 1)
        )
        return ok if ok.size > 1 else bool(ok[0])


def wheel_displacement(sample: WheelSample) -> np.ndarray:
    """Body-frame translation increment implied by the two wheel distances.

    The body x-axis points forward, so the mean of the two wheel arc
    lengths rides on x and the other components are structurally zero.
    """
    return np.array([(sample.dist_left + sample.dist_right) / 2.0, 0.0, 0.0])


def camera_points(f_w: np.ndarray, pose: Pose, ext: Extrinsics) -> np.ndarray:
    """World points (N, 3) or (3,) expressed in the camera frame."""
    f_w = np.asarray(f_w, dtype=float)
    body = pose.apply(f_w)
    return body @ ext.R_C_O.T + ext.p_C_O


def project(f_w: np.ndarray, pose: Pose, ext: Extrinsics, cam: CameraModel) -> np.ndarray:
    """Pinhole projection of one world point into pixels.

    Raises BehindCamera when the camera-frame depth is at or below
    DEPTH_EPSILON; callers discard such observations.
    """
    pc = camera_points(f_w, pose, ext)
    if pc[2] <= DEPTH_EPSILON:
        raise BehindCamera(f"depth {pc[2]:.3g} <= {DEPTH_EPSILON}")
    return np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])


def project_many(
    f_w: np.ndarray, pose: Pose, ext: Extrinsics, cam: CameraModel
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised projection of (N, 3) world points.

    Returns (pixels (N, 2), depths (N,)); rows with depth <=
    DEPTH_EPSILON hold garbage pixels and must be masked by the caller.
    """
    pc = camera_points(np.atleast_2d(f_w), pose, ext)
    z = pc[:, 2]
    safe = np.where(z > DEPTH_EPSILON, z, 1.0)
    pix = np.empty((pc.shape[0], 2))
    pix[:, 0] = cam.fx * pc[:, 0] / safe + cam.cx
    pix[:, 1] = cam.fy * pc[:, 1] / safe + cam.cy
    return pix, z


def backproject(pix: np.ndarray, depth: float, pose: Pose, ext: Extrinsics, cam: CameraModel) -> np.ndarray:
    """World point at a given camera-frame depth along the pixel ray."""
    xc = (pix[0] - cam.cx) / cam.fx * depth
    yc = (pix[1] - cam.cy) / cam.fy * depth
    f_c = np.array([xc, yc, depth])
    f_o = ext.R_C_O.T @ (f_c - ext.p_C_O)
    return pose.inverse().apply(f_o)


@dataclass
class SensorLog:
    gyro: List[GyroSample]
    wheel: List[WheelSample]
    features: List[FeatureObservation]


_LOG_HEADER = [
    "# sensor log: one record per line, 'type,timestamp,fields...'",
    "# GYRO,t_seconds,omega_x,omega_y,omega_z     (rad/s, gyro frame)",
    "# WHEEL,t_seconds,dist_left,dist_right       (meters since previous sample)",
    "# FEAT,t_seconds,frame_id,landmark_id,u,v    (pixels)",
]


def write_sensor_log(
    path: str,
    gyro: Sequence[GyroSample] = (),
    wheel: Sequence[WheelSample] = (),
    features: Sequence[FeatureObservation] = (),
) -> None:
    rows: List[Tuple[float, int, List]] = []
    for g in gyro:
        rows.append((g.timestamp, 0, ["GYRO", f"{g.timestamp:.9f}"] + [f"{v:.12g}" for v in g.omega]))
    for w in wheel:
        rows.append((w.timestamp, 1, ["WHEEL", f"{w.timestamp:.9f}", f"{w.dist_left:.12g}", f"{w.dist_right:.12g}"]))
    for f in features:
        rows.append(
            (
                f.timestamp,
                2,
                ["FEAT", f"{f.timestamp:.9f}", str(f.frame_id), str(f.landmark_id), f"{f.pixel[0]:.6f}", f"{f.pixel[1]:.6f}"],
            )
        )
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="") as fh:
        for line in _LOG_HEADER:
            fh.write(line + "\n")
        writer = csv.writer(fh)
        for _, _, fields in rows:
            writer.writerow(fields)


def read_sensor_log(path: str) -> SensorLog:
    log = SensorLog(gyro=[], wheel=[], features=[])
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            kind, t = row[0], float(row[1])
            if kind == "GYRO":
                log.gyro.append(GyroSample(t, np.array([float(v) for v in row[2:5]])))
            elif kind == "WHEEL":
                log.wheel.append(WheelSample(t, float(row[2]), float(row[3])))
            elif kind == "FEAT":
                log.features.append(
                    FeatureObservation(int(row[2]), int(row[3]), np.array([float(row[4]), float(row[5])]), timestamp=t)
                )
            else:
                raise ValueError(f"unknown record type {kind!r} in {path}")
    return log


def merge_streams(
    gyro: Sequence[GyroSample], wheel: Sequence[WheelSample], start_time: float | None = None
) -> List[Tuple[np.ndarray, float, float, float]]:
    """Resample the gyro stream onto wheel-sample boundaries.

    Each wheel sample closes an integration interval; the effective rate
    over the interval is the time-weighted zero-order-hold average of the
    gyro samples that fall inside it.  Returns (omega, dist_left,
    dist_right, dt) tuples ready for preintegration.
    """
    if not wheel:
        return []
    t_prev = start_time if start_time is not None else wheel[0].timestamp - (
        wheel[1].timestamp - wheel[0].timestamp if len(wheel) > 1 else 0.0
    )
    times = np.array([g.timestamp for g in gyro])
    steps = []
    for w in wheel:
        dt = w.timestamp - t_prev
        if dt <= 0.0:
            raise ValueError("wheel timestamps must be strictly increasing")
        # Gyro value in effect at time t is the latest sample at or before t.
        lo = int(np.searchsorted(times, t_prev, side="right")) - 1
        hi = int(np.searchsorted(times, w.timestamp, side="right")) - 1
        if lo < 0 and hi < 0:
            omega = np.zeros(3)
        else:
            lo = max(lo, 0)
            acc = np.zeros(3)
            seg_start = t_prev
            for idx in range(lo, hi + 1):
                seg_end = times[idx + 1] if idx + 1 <= hi else w.timestamp
                seg_end = min(seg_end, w.timestamp)
                seg_begin = max(seg_start, times[idx]) if idx > lo else seg_start
                span = seg_end - seg_begin
                if span > 0:
                    acc += gyro[idx].omega * span
                seg_start = seg_end
            omega = acc / dt
        steps.append((omega, w.dist_left, w.dist_right, dt))
        t_prev = w.timestamp
    return steps


def iter_features_by_frame(features: Iterable[FeatureObservation]):
    """Group a feature stream into (frame_id, [observations]) in frame order."""
    current: List[FeatureObservation] = []
    last_id = None
    for f in features:
        if last_id is not None and f.frame_id != last_id:
            yield last_id, current
            current = []
        current.append(f)
        last_id = f.frame_id
    if last_id is not None:
        yield last_id, current
