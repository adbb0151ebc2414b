"""Deterministic synthetic world: planar trajectory, sensors, faults, oracle.

A Scenario describes a differential-drive robot following a piecewise
line/arc path on the z = 0 plane with a trapezoidal speed profile,
surrounded by point landmarks.  generate() rolls the scenario into a
SimTrace holding ground-truth poses, noisy gyro / wheel-encoder /
pixel-observation streams, and per-frame correspondence oracles.

Ground truth is defined as the discrete rollout of the per-wheel-sample
motion increments (translation applied with the pre-step heading, then
the heading update).  This is the same composition order the
preintegration module uses, so with all noise at zero, dead reckoning
through preintegration reproduces the ground truth to float rounding.

All randomness flows through numpy's PCG64 generator seeded from the
scenario seed, so a trace regenerates bit-identically.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .manifold import Pose
from .sensors import (
    DEPTH_EPSILON,
    CameraModel,
    Extrinsics,
    FeatureObservation,
    GyroSample,
    NoiseParams,
    WheelSample,
    camera_points,
    merge_streams,
    write_sensor_log,
)


class InvalidScenario(Exception):
    """Scenario fields violate an invariant (rates, faults, geometry)."""


class FaultKind(Enum):
    WHEEL_SLIP = "wheel_slip"  # encoders report distance, robot static
    CARRY = "carry"  # robot moves, encoders report nothing
    BLACKOUT = "blackout"  # no feature observations


@dataclass(frozen=True)
class FaultInterval:
    kind: FaultKind
    t_start: float
    t_end: float
    slip_distance: float = 0.0  # WHEEL_SLIP: total reported wheel distance
    displacement: Tuple[float, float] = (0.0, 0.0)  # CARRY: body frame at onset (m)

    def pauses_drive(self) -> bool:
        """Slip and carry hold the commanded path; blackout does not."""
        return self.kind in (FaultKind.WHEEL_SLIP, FaultKind.CARRY)


@dataclass(frozen=True)
class Segment:
    """One piece of the path: arc length and signed curvature (0 = line)."""

    length: float
    curvature: float = 0.0


def line(length: float) -> Segment:
    return Segment(float(length), 0.0)


def arc(radius: float, angle: float) -> Segment:
    """Circular arc of given radius turning through `angle` rad (ccw > 0)."""
    if radius <= 0.0:
        raise InvalidScenario(f"arc radius must be positive, got {radius}")
    if angle == 0.0:
        raise InvalidScenario("arc angle must be nonzero")
    return Segment(abs(angle) * radius, math.copysign(1.0 / radius, angle))


def loop_segments(straight: float, radius: float) -> List[Segment]:
    """Rounded square: four straights joined by quarter turns."""
    out: List[Segment] = []
    for _ in range(4):
        out.append(line(straight))
        out.append(arc(radius, math.pi / 2.0))
    return out


def out_and_back_segments(length: float, radius: float) -> List[Segment]:
    """Straight leg, half turn, straight leg back alongside the first."""
    return [line(length), arc(radius, math.pi), line(length)]


class PathShape:
    """Piecewise line/arc path starting at the origin with heading +x."""

    def __init__(self, segments: Sequence[Segment]):
        if not segments:
            raise InvalidScenario("trajectory needs at least one segment")
        xs, ys, ths, s0s, ks = [], [], [], [], []
        x = y = th = s = 0.0
        for seg in segments:
            if seg.length <= 0.0:
                raise InvalidScenario(f"segment length must be positive, got {seg.length}")
            xs.append(x)
            ys.append(y)
            ths.append(th)
            s0s.append(s)
            ks.append(seg.curvature)
            if seg.curvature == 0.0:
                x += seg.length * math.cos(th)
                y += seg.length * math.sin(th)
            else:
                th1 = th + seg.curvature * seg.length
                x += (math.sin(th1) - math.sin(th)) / seg.curvature
                y += (math.cos(th) - math.cos(th1)) / seg.curvature
                th = th1
            s += seg.length
        self._x0 = np.array(xs)
        self._y0 = np.array(ys)
        self._th0 = np.array(ths)
        self._s0 = np.array(s0s)
        self._kappa = np.array(ks)
        self.total_length = s

    def _locate(self, s: np.ndarray):
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.total_length)
        i = np.clip(np.searchsorted(self._s0, s, side="right") - 1, 0, self._s0.size - 1)
        return s, i, s - self._s0[i]

    def heading(self, s: np.ndarray) -> np.ndarray:
        _, i, ds = self._locate(s)
        return self._th0[i] + self._kappa[i] * ds

    def point(self, s: np.ndarray) -> np.ndarray:
        """Path position(s) on z = 0, returned as (N, 2)."""
        _, i, ds = self._locate(s)
        th0, k = self._th0[i], self._kappa[i]
        straight = k == 0.0
        k_safe = np.where(straight, 1.0, k)
        th = th0 + k * ds
        x = np.where(straight, self._x0[i] + ds * np.cos(th0), self._x0[i] + (np.sin(th) - np.sin(th0)) / k_safe)
        y = np.where(straight, self._y0[i] + ds * np.sin(th0), self._y0[i] + (np.cos(th0) - np.cos(th)) / k_safe)
        return np.stack([np.atleast_1d(x), np.atleast_1d(y)], axis=1)


class SpeedProfile:
    """Trapezoidal speed over a fixed arc length; triangular if too short."""

    def __init__(self, length: float, v_max: float, accel: float):
        if length <= 0.0 or v_max <= 0.0 or accel <= 0.0:
            raise InvalidScenario("length, speed, and accel must all be positive")
        self.length = length
        self.accel = accel
        s_ramp = v_max * v_max / (2.0 * accel)
        if 2.0 * s_ramp >= length:
            self.v_peak = math.sqrt(accel * length)
            self.t_acc = self.v_peak / accel
            self.t_cruise = 0.0
        else:
            self.v_peak = v_max
            self.t_acc = v_max / accel
            self.t_cruise = (length - 2.0 * s_ramp) / v_max
        self.total_time = 2.0 * self.t_acc + self.t_cruise

    def distance(self, t: np.ndarray) -> np.ndarray:
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.total_time)
        ramp = 0.5 * self.accel * self.t_acc**2
        return np.where(
            t < self.t_acc,
            0.5 * self.accel * t * t,
            np.where(
                t <= self.t_acc + self.t_cruise,
                ramp + self.v_peak * (t - self.t_acc),
                self.length - 0.5 * self.accel * (self.total_time - t) ** 2,
            ),
        )


@dataclass
class LandmarkField:
    """Point-landmark distribution: a corridor hugging the path or a box."""

    count: int = 600
    layout: str = "corridor"
    lateral_min: float = 1.0
    lateral_max: float = 6.0
    z_min: float = 0.0
    z_max: float = 2.5
    bounds: Optional[np.ndarray] = None  # (3, 2) min/max rows for "box"

    def validate(self) -> None:
        if self.count <= 0:
            raise InvalidScenario("landmark count must be positive")
        if self.layout not in ("corridor", "box"):
            raise InvalidScenario(f"unknown landmark layout {self.layout!r}")
        if self.layout == "box":
            b = np.asarray(self.bounds, dtype=float) if self.bounds is not None else None
            if b is None or b.shape != (3, 2) or np.any(b[:, 0] >= b[:, 1]):
                raise InvalidScenario("box layout needs (3, 2) bounds with min < max")
        elif not (0.0 <= self.lateral_min < self.lateral_max):
            raise InvalidScenario("corridor lateral band must satisfy 0 <= min < max")


def mount_extrinsics(
    orientation: str = "forward",
    position: Sequence[float] = (0.1, 0.0, 0.3),
    r_o_b: Optional[np.ndarray] = None,
) -> Extrinsics:
    """Camera mount on the body: optical axis forward or upward."""
    if orientation == "forward":
        r_c_o = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    elif orientation == "upward":
        r_c_o = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    else:
        raise InvalidScenario(f"unknown camera orientation {orientation!r}")
    p = np.asarray(position, dtype=float)
    return Extrinsics(R_C_O=r_c_o, p_C_O=-r_c_o @ p, R_O_B=np.eye(3) if r_o_b is None else np.asarray(r_o_b, dtype=float))


def _default_camera() -> CameraModel:
    return CameraModel(fx=300.0, fy=300.0, cx=320.0, cy=240.0, width=640, height=480)


@dataclass
class Scenario:
    segments: List[Segment]
    speed: float = 1.0
    accel: float = 0.5
    landmarks: LandmarkField = field(default_factory=LandmarkField)
    noise: NoiseParams = field(default_factory=NoiseParams.from_scalars)
    bias_initial: np.ndarray = field(default_factory=lambda: np.zeros(3))
    faults: List[FaultInterval] = field(default_factory=list)
    gyro_hz: int = 20
    wheel_hz: int = 20
    camera_hz: int = 4
    seed: int = 0
    camera: CameraModel = field(default_factory=_default_camera)
    extrinsics: Extrinsics = field(default_factory=mount_extrinsics)
    track_width: float = 0.4
    max_range: float = 15.0
    min_depth: float = 0.2

    def validate(self) -> None:
        for name in ("gyro_hz", "wheel_hz", "camera_hz"):
            v = getattr(self, name)
            if int(v) != v or v <= 0:
                raise InvalidScenario(f"{name} must be a positive integer, got {v}")
        if self.gyro_hz % self.wheel_hz != 0:
            raise InvalidScenario("gyro_hz must be an integer multiple of wheel_hz")
        if self.wheel_hz % self.camera_hz != 0:
            raise InvalidScenario("wheel_hz must be an integer multiple of camera_hz")
        if self.track_width <= 0.0:
            raise InvalidScenario("track_width must be positive")
        if self.min_depth <= 0.0 or self.max_range <= self.min_depth:
            raise InvalidScenario("need 0 < min_depth < max_range")
        PathShape(self.segments)  # validates segment geometry
        SpeedProfile(sum(s.length for s in self.segments), self.speed, self.accel)
        self.landmarks.validate()
        self.noise.validate()
        self.camera.validate()
        self.extrinsics.validate()
        last_end = -math.inf
        for f in sorted(self.faults, key=lambda f: f.t_start):
            if f.t_start < 0.0 or f.t_end <= f.t_start:
                raise InvalidScenario(f"bad fault interval [{f.t_start}, {f.t_end})")
            if f.t_start < last_end - 1e-12:
                raise InvalidScenario("fault intervals overlap")
            if f.kind == FaultKind.WHEEL_SLIP and f.slip_distance <= 0.0:
                raise InvalidScenario("wheel_slip fault needs slip_distance > 0")
            last_end = f.t_end


@dataclass
class Correspondences:
    """Oracle landmark-to-pixel matches for one frame."""

    ids: np.ndarray  # (N,) landmark ids
    pixels: np.ndarray  # (N, 2)

    def __len__(self) -> int:
        return int(self.ids.size)


@dataclass
class SimTrace:
    scenario: Scenario
    landmarks: np.ndarray  # (M, 3) true positions; landmark id = row index
    frame_times: np.ndarray  # (F,)
    truth_poses: List[Pose]  # world-to-odometer, per frame
    frame_landmark_ids: List[np.ndarray]
    frame_pixels: List[np.ndarray]  # noisy observations
    frame_depths: List[np.ndarray]  # true camera depths of the visible set
    frame_fault: np.ndarray  # (F,) index into scenario.faults, -1 outside
    step_fault: np.ndarray  # (n_wheel,) same, per wheel step
    gyro_times: np.ndarray
    gyro_meas: np.ndarray  # (n_gyro, 3)
    wheel_times: np.ndarray
    wheel_left: np.ndarray
    wheel_right: np.ndarray
    bias_true: np.ndarray  # (n_gyro, 3)
    measured_steps: List[Tuple[np.ndarray, float, float, float]]
    wheel_per_frame: int

    @property
    def n_frames(self) -> int:
        return int(self.frame_times.size)

    def observations(self, frame: int) -> Correspondences:
        """All truly visible landmarks with their noisy pixels."""
        return Correspondences(self.frame_landmark_ids[frame], self.frame_pixels[frame])

    def steps_between(self, frame_i: int, frame_j: int):
        """Measured (omega, dl, dr, dt) steps covering frames i..j."""
        return self.measured_steps[frame_i * self.wheel_per_frame : frame_j * self.wheel_per_frame]

    def in_blackout(self, frame: int) -> bool:
        fi = int(self.frame_fault[frame])
        return fi >= 0 and self.scenario.faults[fi].kind == FaultKind.BLACKOUT

    def truth_positions(self) -> np.ndarray:
        return np.stack([p.position_in_world() for p in self.truth_poses])

    def gyro_stream(self) -> List[GyroSample]:
        return [GyroSample(float(t), self.gyro_meas[k]) for k, t in enumerate(self.gyro_times)]

    def wheel_stream(self) -> List[WheelSample]:
        return [
            WheelSample(float(t), float(self.wheel_left[i]), float(self.wheel_right[i]))
            for i, t in enumerate(self.wheel_times)
        ]

    def feature_stream(self) -> List[FeatureObservation]:
        out: List[FeatureObservation] = []
        for f in range(self.n_frames):
            t = float(self.frame_times[f])
            for lid, pix in zip(self.frame_landmark_ids[f], self.frame_pixels[f]):
                out.append(FeatureObservation(f, int(lid), pix, timestamp=t))
        return out

    def save(self, out_dir: str) -> None:
        """Sensor CSV log, ground-truth TUM trajectory, landmark table."""
        os.makedirs(out_dir, exist_ok=True)
        write_sensor_log(
            os.path.join(out_dir, "sensors.csv"),
            self.gyro_stream(),
            self.wheel_stream(),
            self.feature_stream(),
        )
        from .evaluate import write_tum_trajectory

        write_tum_trajectory(os.path.join(out_dir, "groundtruth.tum"), self.frame_times, self.truth_poses)
        table = np.column_stack([np.arange(self.landmarks.shape[0]), self.landmarks])
        np.savetxt(
            os.path.join(out_dir, "landmarks.csv"),
            table,
            delimiter=",",
            header="id,x,y,z",
            fmt=["%d", "%.9f", "%.9f", "%.9f"],
            comments="# ",
        )


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Factor L with L @ L.T = m; tolerates singular PSD input."""
    w, v = np.linalg.eigh(np.asarray(m, dtype=float))
    return v * np.sqrt(np.clip(w, 0.0, None))


def _generate_landmarks(cfg: LandmarkField, path: PathShape, rng: np.random.Generator) -> np.ndarray:
    if cfg.layout == "box":
        b = np.asarray(cfg.bounds, dtype=float)
        return rng.uniform(b[:, 0], b[:, 1], size=(cfg.count, 3))
    s = rng.uniform(0.0, path.total_length, cfg.count)
    side = rng.integers(0, 2, cfg.count) * 2 - 1
    lat = rng.uniform(cfg.lateral_min, cfg.lateral_max, cfg.count) * side
    z = rng.uniform(cfg.z_min, cfg.z_max, cfg.count)
    base = path.point(s)
    th = path.heading(s)
    out = np.empty((cfg.count, 3))
    out[:, 0] = base[:, 0] - np.sin(th) * lat  # offset along the left normal
    out[:, 1] = base[:, 1] + np.cos(th) * lat
    out[:, 2] = z
    return out


def generate(scenario: Scenario) -> SimTrace:
    """Roll a Scenario into a SimTrace.  Deterministic given the seed."""
    scenario.validate()
    path = PathShape(scenario.segments)
    profile = SpeedProfile(path.total_length, scenario.speed, scenario.accel)

    wheel_hz, gyro_hz = scenario.wheel_hz, scenario.gyro_hz
    ng = gyro_hz // wheel_hz
    wpf = wheel_hz // scenario.camera_hz
    dt_w = 1.0 / wheel_hz
    dt_g = 1.0 / gyro_hz

    pause_total = sum(f.t_end - f.t_start for f in scenario.faults if f.pauses_drive())
    wall = profile.total_time + pause_total
    for f in scenario.faults:
        if f.t_end > wall + 1e-9:
            raise InvalidScenario(f"fault ending at {f.t_end} s lies outside the {wall:.3f} s trace")
    n_wheel = int(math.ceil(wall * wheel_hz - 1e-9))
    n_wheel = max(((n_wheel + wpf - 1) // wpf) * wpf, wpf)
    n_gyro = n_wheel * ng

    # Snap fault intervals to the wheel-sample grid.
    step_fault = np.full(n_wheel, -1, dtype=int)
    for fi, f in enumerate(scenario.faults):
        i0 = int(round(f.t_start * wheel_hz))
        i1 = min(int(round(f.t_end * wheel_hz)), n_wheel)
        if i1 <= i0:
            raise InvalidScenario("fault interval shorter than one wheel sample")
        if np.any(step_fault[i0:i1] >= 0):
            raise InvalidScenario("fault intervals overlap on the wheel-sample grid")
        step_fault[i0:i1] = fi
    paused = np.zeros(n_wheel, dtype=bool)
    for fi, f in enumerate(scenario.faults):
        if f.pauses_drive():
            paused |= step_fault == fi

    # Drive time advances only outside slip/carry faults; evaluating the
    # profile at drive time freezes the commanded motion during them.
    tau_w = np.concatenate([[0.0], np.cumsum(np.where(paused, 0.0, dt_w))])
    sub = np.arange(ng) * dt_g
    tau_g = (tau_w[:-1, None] + sub[None, :] * (~paused)[:, None]).reshape(-1)
    tau_g = np.concatenate([tau_g, tau_w[-1:]])

    s_g = profile.distance(tau_g)
    th_g = path.heading(s_g)
    dth_g = np.diff(th_g)
    omega_true = np.zeros((n_gyro, 3))
    omega_true[:, 2] = dth_g / dt_g

    s_w = s_g[::ng]
    th_w = th_g[::ng]
    ds_w = np.diff(s_w)
    dth_w = np.diff(th_w)

    # True encoder distances from differential-drive kinematics.
    half = scenario.track_width / 2.0
    dl_true = ds_w - half * dth_w
    dr_true = ds_w + half * dth_w
    carry_delta = np.zeros((n_wheel, 3))
    for fi, f in enumerate(scenario.faults):
        steps = np.flatnonzero(step_fault == fi)
        if f.kind == FaultKind.WHEEL_SLIP:
            per_step = f.slip_distance / steps.size
            dl_true[steps] += per_step
            dr_true[steps] += per_step
        elif f.kind == FaultKind.CARRY:
            th0 = th_w[steps[0]]
            c, s = math.cos(th0), math.sin(th0)
            world = np.array(
                [c * f.displacement[0] - s * f.displacement[1], s * f.displacement[0] + c * f.displacement[1], 0.0]
            )
            u = np.arange(1, steps.size + 1) / steps.size
            smooth = 3.0 * u**2 - 2.0 * u**3
            carry_delta[steps] = np.diff(np.concatenate([[0.0], smooth]))[:, None] * world[None, :]

    # Ground-truth rollout: translate with the pre-step heading, then turn.
    heading_pre = th_w[:-1]
    step_delta = carry_delta.copy()
    step_delta[:, 0] += ds_w * np.cos(heading_pre)
    step_delta[:, 1] += ds_w * np.sin(heading_pre)
    p_w = np.vstack([np.zeros(3), np.cumsum(step_delta, axis=0)])

    rng_land, rng_bias, rng_gyro, rng_enc, rng_pix = (np.random.default_rng(c) for c in np.random.SeedSequence(scenario.seed).spawn(5))
    landmarks = _generate_landmarks(scenario.landmarks, path, rng_land)

    walk = rng_bias.standard_normal((n_gyro, 3)) @ _psd_sqrt(scenario.noise.sigma_bias_walk * dt_g).T
    bias_true = np.asarray(scenario.bias_initial, dtype=float) + np.vstack([np.zeros(3), np.cumsum(walk[:-1], axis=0)])
    gyro_meas = omega_true + bias_true + rng_gyro.standard_normal((n_gyro, 3)) @ _psd_sqrt(scenario.noise.sigma_gyro).T
    enc_noise = rng_enc.standard_normal((n_wheel, 2)) * math.sqrt(scenario.noise.sigma_encoder)
    wheel_left = dl_true + enc_noise[:, 0]
    wheel_right = dr_true + enc_noise[:, 1]

    # Frames sit on wheel-sample boundaries (rates validated to divide).
    n_frames = n_wheel // wpf + 1
    bounds_idx = np.arange(n_frames) * wpf
    frame_times = bounds_idx / wheel_hz
    chol_pix = _psd_sqrt(scenario.noise.sigma_pixel)
    cam, ext = scenario.camera, scenario.extrinsics

    truth_poses: List[Pose] = []
    frame_ids: List[np.ndarray] = []
    frame_pixels: List[np.ndarray] = []
    frame_depths: List[np.ndarray] = []
    frame_fault = np.full(n_frames, -1, dtype=int)
    for fr in range(n_frames):
        b = int(bounds_idx[fr])
        if b < n_wheel:
            frame_fault[fr] = step_fault[b]
        yaw = th_w[b]
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world-to-odometer
        pose = Pose(rot=rot, trans=-rot @ p_w[b])
        truth_poses.append(pose)

        blacked = frame_fault[fr] >= 0 and scenario.faults[frame_fault[fr]].kind == FaultKind.BLACKOUT
        if blacked:
            frame_ids.append(np.empty(0, dtype=int))
            frame_pixels.append(np.empty((0, 2)))
            frame_depths.append(np.empty(0))
            continue
        f_c = camera_points(landmarks, pose, ext)
        z = f_c[:, 2]
        safe = np.where(z > DEPTH_EPSILON, z, 1.0)
        u = cam.fx * f_c[:, 0] / safe + cam.cx
        v = cam.fy * f_c[:, 1] / safe + cam.cy
        vis = (
            (z > scenario.min_depth)
            & (np.linalg.norm(f_c, axis=1) <= scenario.max_range)
            & (u >= 0.0)
            & (u <= cam.width - 1)
            & (v >= 0.0)
            & (v <= cam.height - 1)
        )
        ids = np.flatnonzero(vis)
        pix = np.stack([u[ids], v[ids]], axis=1) + rng_pix.standard_normal((ids.size, 2)) @ chol_pix.T
        frame_ids.append(ids)
        frame_pixels.append(pix)
        frame_depths.append(z[ids])

    gyro_times = np.arange(n_gyro) / gyro_hz
    wheel_times = np.arange(1, n_wheel + 1) / wheel_hz
    gyro_stream = [GyroSample(float(t), gyro_meas[k]) for k, t in enumerate(gyro_times)]
    wheel_stream = [
        WheelSample(float(t), float(wheel_left[i]), float(wheel_right[i])) for i, t in enumerate(wheel_times)
    ]
    steps = merge_streams(gyro_stream, wheel_stream, start_time=0.0)

    return SimTrace(
        scenario=scenario,
        landmarks=landmarks,
        frame_times=frame_times,
        truth_poses=truth_poses,
        frame_landmark_ids=frame_ids,
        frame_pixels=frame_pixels,
        frame_depths=frame_depths,
        frame_fault=frame_fault,
        step_fault=step_fault,
        gyro_times=gyro_times,
        gyro_meas=gyro_meas,
        wheel_times=wheel_times,
        wheel_left=wheel_left,
        wheel_right=wheel_right,
        bias_true=bias_true,
        measured_steps=steps,
        wheel_per_frame=wpf,
    )


def oracle_matches(
    trace: SimTrace,
    frame: int,
    map_landmark_ids: Optional[np.ndarray] = None,
    dropout: float = 0.0,
    seed: Optional[int] = None,
) -> Correspondences:
    """Visible-landmark correspondences, optionally restricted to a map.

    Stands in for descriptor matching and place recognition: every truly
    visible landmark (and nothing else) is paired with its noisy pixel.
    A nonzero dropout keeps a deterministic pseudo-random subset.
    """
    ids = trace.frame_landmark_ids[frame]
    pix = trace.frame_pixels[frame]
    if map_landmark_ids is not None:
        keep = np.isin(ids, np.asarray(list(map_landmark_ids), dtype=int))
        ids, pix = ids[keep], pix[keep]
    if dropout > 0.0 and ids.size:
        base = trace.scenario.seed if seed is None else seed
        rng = np.random.default_rng(np.random.SeedSequence([base, frame, 104729]))
        keep = rng.random(ids.size) >= dropout
        ids, pix = ids[keep], pix[keep]
    return Correspondences(ids=ids, pixels=pix)


def shared_observations(trace: SimTrace, frame_a: int, frame_b: int):
    """Landmarks seen in both frames: (ids, pixels_a, pixels_b)."""
    ids_a = trace.frame_landmark_ids[frame_a]
    ids_b = trace.frame_landmark_ids[frame_b]
    common, ia, ib = np.intersect1d(ids_a, ids_b, return_indices=True)
    return common, trace.frame_pixels[frame_a][ia], trace.frame_pixels[frame_b][ib]


def _fault_from_dict(item: dict) -> FaultInterval:
    try:
        kind = FaultKind(item["kind"])
    except (KeyError, ValueError):
        raise InvalidScenario(f"unknown fault kind in {item!r}")
    disp = item.get("displacement", (0.0, 0.0))
    return FaultInterval(
        kind=kind,
        t_start=float(item["t_start"]),
        t_end=float(item["t_end"]),
        slip_distance=float(item.get("slip_distance", 0.0)),
        displacement=(float(disp[0]), float(disp[1])),
    )


def scenario_from_dict(cfg: dict) -> Scenario:
    """Build a Scenario from a parsed TOML table; absent keys default."""
    traj = cfg.get("trajectory", {})
    segments: List[Segment] = []
    for item in traj.get("segments", []):
        kind = item.get("kind", "line")
        if kind == "line":
            segments.append(line(float(item["length"])))
        elif kind == "arc":
            angle = math.radians(float(item["angle_deg"])) if "angle_deg" in item else float(item["angle"])
            segments.append(arc(float(item["radius"]), angle))
        else:
            raise InvalidScenario(f"unknown segment kind {kind!r}")

    n = cfg.get("noise", {})
    noise = NoiseParams.from_scalars(
        gyro_std=float(n.get("gyro_std", 1e-3)),
        encoder_std=float(n.get("encoder_std", 1e-3)),
        bias_walk_std=float(n.get("bias_walk_std", 1e-5)),
        plane_std=float(n.get("plane_std", 1e-3)),
        pixel_std=float(n.get("pixel_std", 0.5)),
    )

    lm = cfg.get("landmarks", {})
    lateral = lm.get("lateral", (1.0, 6.0))
    z_range = lm.get("z", (0.0, 2.5))
    landmarks = LandmarkField(
        count=int(lm.get("count", 600)),
        layout=lm.get("layout", "corridor"),
        lateral_min=float(lateral[0]),
        lateral_max=float(lateral[1]),
        z_min=float(z_range[0]),
        z_max=float(z_range[1]),
        bounds=np.asarray(lm["bounds"], dtype=float) if "bounds" in lm else None,
    )

    c = cfg.get("camera", {})
    camera = CameraModel(
        fx=float(c.get("fx", 300.0)),
        fy=float(c.get("fy", 300.0)),
        cx=float(c.get("cx", 320.0)),
        cy=float(c.get("cy", 240.0)),
        width=int(c.get("width", 640)),
        height=int(c.get("height", 480)),
    )
    ext = mount_extrinsics(c.get("orientation", "forward"), c.get("position", (0.1, 0.0, 0.3)))

    rates = cfg.get("rates", {})
    sim_cfg = cfg.get("sim", {})
    platform = cfg.get("platform", {})
    return Scenario(
        segments=segments,
        speed=float(traj.get("speed", 1.0)),
        accel=float(traj.get("accel", 0.5)),
        landmarks=landmarks,
        noise=noise,
        bias_initial=np.asarray(cfg.get("bias", {}).get("initial", (0.0, 0.0, 0.0)), dtype=float),
        faults=[_fault_from_dict(f) for f in cfg.get("faults", [])],
        gyro_hz=int(rates.get("gyro_hz", 20)),
        wheel_hz=int(rates.get("wheel_hz", 20)),
        camera_hz=int(rates.get("camera_hz", 4)),
        seed=int(sim_cfg.get("seed", 0)),
        camera=camera,
        extrinsics=ext,
        track_width=float(platform.get("track_width", 0.4)),
        max_range=float(c.get("max_range", 15.0)),
        min_depth=float(c.get("min_depth", 0.2)),
    )


def load_scenario(path: str) -> Scenario:
    with open(path, "rb") as fh:
        return scenario_from_dict(tomllib.load(fh))
