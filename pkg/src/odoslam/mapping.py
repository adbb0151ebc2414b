"""Back-end map: initialization, storage, and windowed bundle adjustment.

A MapStore owns keyframes (pose + gyro bias + observations), landmark
positions, and a covisibility graph.  Maps are born from a two-frame
bootstrap whose baseline comes from wheel/gyro dead reckoning, so the
reconstruction is metric from the first triangulation.  Local BA
refines the last N keyframes and every landmark they see, holding
out-of-window observers fixed; each completed BA bumps the map version,
which is what the front-end polls to pick its per-frame mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import PipelineConfig
from .evaluate import write_tum_trajectory
from .factors import (
    BiasWalkFactor,
    FrameState,
    Landmark,
    OdometerFactor,
    PlaneFactor,
    ReprojectionFactor,
    RobustKernel,
    reprojection_terms,
)
from .manifold import Pose
from .optimizer import Problem, SolveOptions, SolveReport, solve
from .preintegration import PreintegratedOdometer, correct_for_bias, predict_pose
from .sensors import DEPTH_EPSILON, CameraModel, Extrinsics, NoiseParams


class NotReady(Exception):
    """Map initialization cannot proceed yet; reason says why."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


class Degenerate(Exception):
    """Triangulation geometry is unusable; reason says why."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


@dataclass
class KeyframeRecord:
    """One keyframe: estimated state plus the raw observations it carried."""

    id: int
    timestamp: float
    state: FrameState
    ids: np.ndarray  # observed feature ids (all, mapped or not)
    pixels: np.ndarray  # (N, 2) measured pixels, same order as ids
    slippage: bool = False
    preint_from_prev: Optional[PreintegratedOdometer] = None
    n_tracked: int = 0  # inlier count when the keyframe was created


def rays_world(pixels: np.ndarray, pose: Pose, ext: Extrinsics, cam: CameraModel) -> np.ndarray:
    """Unit viewing rays in world coordinates for (N, 2) pixels."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    d_c = np.column_stack(
        [
            (pixels[:, 0] - cam.cx) / cam.fx,
            (pixels[:, 1] - cam.cy) / cam.fy,
            np.ones(len(pixels)),
        ]
    )
    d_c /= np.linalg.norm(d_c, axis=1, keepdims=True)
    r_cw = ext.R_C_O @ pose.rot
    return d_c @ r_cw


def _camera_matrix(pose: Pose, ext: Extrinsics, cam: CameraModel) -> Tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation: f_c = R f_w + t."""
    r_cw = ext.R_C_O @ pose.rot
    t_cw = ext.R_C_O @ pose.trans + ext.p_C_O
    return r_cw, t_cw


def ray_parallax(
    pix_a: np.ndarray, pix_b: np.ndarray, pose_a: Pose, pose_b: Pose, ext: Extrinsics, cam: CameraModel
) -> np.ndarray:
    """Angle (rad) between the world-frame viewing rays of matched pixels."""
    da = rays_world(pix_a, pose_a, ext, cam)
    db = rays_world(pix_b, pose_b, ext, cam)
    cosang = np.clip(np.einsum("ni,ni->n", da, db), -1.0, 1.0)
    return np.arccos(cosang)


def triangulate(
    pix_a: np.ndarray,
    pix_b: np.ndarray,
    pose_a: Pose,
    pose_b: Pose,
    ext: Extrinsics,
    cam: CameraModel,
    min_parallax_rad: float = math.radians(1.0),
) -> np.ndarray:
    """Linear two-view triangulation of one correspondence.

    Works on normalized image coordinates, so pixel noise enters both
    rows with comparable scale.  Raises Degenerate when the rays are
    too parallel or the point lands behind either camera.
    """
    angle = ray_parallax(pix_a, pix_b, pose_a, pose_b, ext, cam)[0]
    if angle < min_parallax_rad:
        raise Degenerate("insufficient parallax")

    rows = []
    for pix, pose in ((pix_a, pose_a), (pix_b, pose_b)):
        r_cw, t_cw = _camera_matrix(pose, ext, cam)
        p34 = np.column_stack([r_cw, t_cw])
        x = (pix[0] - cam.cx) / cam.fx
        y = (pix[1] - cam.cy) / cam.fy
        rows.append(x * p34[2] - p34[0])
        rows.append(y * p34[2] - p34[1])
    _, _, vt = np.linalg.svd(np.stack(rows))
    hom = vt[-1]
    if abs(hom[3]) < 1e-12 * np.linalg.norm(hom[:3]):
        raise Degenerate("insufficient parallax")
    point = hom[:3] / hom[3]

    for pose in (pose_a, pose_b):
        r_cw, t_cw = _camera_matrix(pose, ext, cam)
        if (r_cw @ point + t_cw)[2] <= DEPTH_EPSILON:
            raise Degenerate("behind camera")
    return point


def reprojection_chi2(
    state: FrameState,
    points: np.ndarray,
    pixels: np.ndarray,
    ext: Extrinsics,
    cam: CameraModel,
    sigma_pixel: np.ndarray,
) -> np.ndarray:
    """Whitened squared reprojection residual per observation.

    Points behind the camera score infinity so callers can treat them
    as outliers without special-casing.
    """
    points = np.atleast_2d(points)
    pixels = np.atleast_2d(pixels)
    if points.shape[0] == 0:
        return np.zeros(0)
    r, _, _, depth = reprojection_terms(state.pose.rot, state.pose.trans, points, pixels, ext, cam, jacobians=False)
    info = np.linalg.inv(sigma_pixel)
    chi2 = np.einsum("ni,ij,nj->n", r, info, r)
    return np.where(depth > DEPTH_EPSILON, chi2, np.inf)


class MapStore:
    """Keyframes, landmarks, covisibility, and a monotone version counter."""

    def __init__(self, ext: Extrinsics, cam: CameraModel):
        self.ext = ext
        self.cam = cam
        self.keyframes: Dict[int, KeyframeRecord] = {}
        self._order: List[int] = []
        self.landmarks: Dict[int, np.ndarray] = {}
        self.observers: Dict[int, List[int]] = {}
        self._kf_landmarks: Dict[int, set] = {}
        self.covisibility: Dict[Tuple[int, int], int] = {}
        self.version: int = 0
        self.anchor_id: Optional[int] = None
        self.odometer_factor_log: List[Tuple[int, int]] = []

    @property
    def kf_ids(self) -> List[int]:
        return list(self._order)

    @property
    def last_keyframe(self) -> KeyframeRecord:
        return self.keyframes[self._order[-1]]

    def window(self, n: int) -> List[int]:
        return self._order[-n:]

    def add_keyframe(self, record: KeyframeRecord) -> None:
        if record.id in self.keyframes:
            raise ValueError(f"duplicate keyframe id {record.id}")
        if self._order and record.id <= self._order[-1]:
            raise ValueError("keyframe ids must be inserted in increasing order")
        self.keyframes[record.id] = record
        self._order.append(record.id)
        self._kf_landmarks[record.id] = set()
        if self.anchor_id is None:
            self.anchor_id = record.id
        for lid in record.ids:
            if int(lid) in self.landmarks:
                self.register_observation(record.id, int(lid))

    def register_observation(self, kf_id: int, lid: int) -> None:
        obs = self.observers.setdefault(lid, [])
        if kf_id not in obs:
            obs.append(kf_id)
        self._kf_landmarks[kf_id].add(lid)

    def add_landmark(self, lid: int, position: np.ndarray, observer_ids: Sequence[int]) -> None:
        if lid in self.landmarks:
            raise ValueError(f"duplicate landmark id {lid}")
        self.landmarks[lid] = np.asarray(position, dtype=float).copy()
        for kf_id in observer_ids:
            self.register_observation(kf_id, lid)

    def shared_landmarks(self, a: int, b: int) -> int:
        return len(self._kf_landmarks[a] & self._kf_landmarks[b])

    def refresh_covisibility(self, kf_id: int, min_covisibility: int) -> None:
        """Recompute this keyframe's edges; the temporal chain edge always exists."""
        idx = self._order.index(kf_id)
        prev_id = self._order[idx - 1] if idx > 0 else None
        for other in self._order:
            if other == kf_id:
                continue
            weight = self.shared_landmarks(kf_id, other)
            key = (min(kf_id, other), max(kf_id, other))
            if weight >= min_covisibility or other == prev_id:
                self.covisibility[key] = weight
            elif key in self.covisibility and other != prev_id:
                if weight < min_covisibility:
                    del self.covisibility[key]

    def covisibility_weight(self, a: int, b: int) -> int:
        return self.covisibility.get((min(a, b), max(a, b)), 0)

    def chain_connected(self) -> bool:
        """True when every consecutive keyframe pair shares an edge."""
        return all(
            (min(a, b), max(a, b)) in self.covisibility
            for a, b in zip(self._order, self._order[1:])
        )

    def landmark_points(self, ids: Sequence[int]) -> np.ndarray:
        if len(ids) == 0:
            return np.zeros((0, 3))
        return np.stack([self.landmarks[int(i)] for i in ids])

    def mapped_subset(self, ids: np.ndarray) -> np.ndarray:
        """Boolean mask over ids selecting those that are map landmarks."""
        return np.array([int(i) in self.landmarks for i in ids], dtype=bool)

    def observed_map_ids(self, kf_id: int) -> set:
        return set(self._kf_landmarks[kf_id])

    def dump_ply(self, path: str) -> None:
        """ASCII point cloud of landmarks; keyframe poses ride as comments."""
        from scipy.spatial.transform import Rotation

        lids = sorted(self.landmarks)
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            for kf_id in self._order:
                rec = self.keyframes[kf_id]
                rot, trans = rec.state.pose.rot, rec.state.pose.trans
                pos = -rot.T @ trans
                q = Rotation.from_matrix(rot.T).as_quat()
                fh.write(
                    "comment keyframe %d %.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n"
                    % (kf_id, rec.timestamp, pos[0], pos[1], pos[2], q[0], q[1], q[2], q[3])
                )
            fh.write(f"element vertex {len(lids)}\n")
            fh.write("property float x\nproperty float y\nproperty float z\n")
            fh.write("end_header\n")
            for lid in lids:
                p = self.landmarks[lid]
                fh.write("%.6f %.6f %.6f\n" % (p[0], p[1], p[2]))

    def write_keyframe_trajectory(self, path: str) -> None:
        times = np.array([self.keyframes[k].timestamp for k in self._order])
        poses = [self.keyframes[k].state.pose for k in self._order]
        write_tum_trajectory(path, times, poses)


def initialize_map(
    frame_a: int,
    t_a: float,
    state_a: FrameState,
    obs_a,
    frame_b: int,
    t_b: float,
    obs_b,
    preint_ab: PreintegratedOdometer,
    ext: Extrinsics,
    cam: CameraModel,
    noise: NoiseParams,
    cfg: PipelineConfig,
    opts: Optional[SolveOptions] = None,
) -> MapStore:
    """Two-frame metric bootstrap: dead-reckoned baseline, DLT, full BA.

    obs_a / obs_b carry .ids and .pixels for each frame's features.  The
    second frame's pose comes from the preintegrated wheel/gyro motion,
    which is what pins the map scale in meters.  Raises NotReady with a
    reason when matching, parallax, or triangulation support is thin.
    """
    ids_a = np.asarray(obs_a.ids)
    ids_b = np.asarray(obs_b.ids)
    common, idx_a, idx_b = np.intersect1d(ids_a, ids_b, return_indices=True)
    if common.size < cfg.init_min_matches:
        raise NotReady("insufficient matches")
    pix_a = np.asarray(obs_a.pixels)[idx_a]
    pix_b = np.asarray(obs_b.pixels)[idx_b]

    delta_R, delta_p = correct_for_bias(preint_ab, state_a.bias_g)
    rot_b, trans_b = predict_pose(state_a.pose.rot, state_a.pose.trans, delta_R, delta_p)
    state_b = FrameState(Pose(rot_b, trans_b), state_a.bias_g.copy())

    parallax = ray_parallax(pix_a, pix_b, state_a.pose, state_b.pose, ext, cam)
    if float(np.median(parallax)) < cfg.init_min_parallax_rad:
        raise NotReady("insufficient parallax")

    kept: List[int] = []
    points: List[np.ndarray] = []
    for i in range(common.size):
        if parallax[i] < cfg.init_min_parallax_rad:
            continue
        try:
            p = triangulate(
                pix_a[i], pix_b[i], state_a.pose, state_b.pose, ext, cam,
                min_parallax_rad=cfg.init_min_parallax_rad,
            )
        except Degenerate:
            continue
        kept.append(i)
        points.append(p)
    if len(kept) < cfg.init_min_triangulated:
        raise NotReady("too few triangulated points")

    key_a, key_b = ("kf", frame_a), ("kf", frame_b)
    problem = Problem()
    problem.add_frame(key_a, state_a.copy(), fixed=True)
    problem.add_frame(key_b, state_b.copy())
    for i, p in zip(kept, points):
        problem.add_landmark(("lm", int(common[i])), Landmark(int(common[i]), p.copy()))
    for i in kept:
        lm_key = ("lm", int(common[i]))
        problem.add_factor(ReprojectionFactor(key_a, lm_key, pix_a[i], ext, cam, noise.sigma_pixel))
        problem.add_factor(ReprojectionFactor(key_b, lm_key, pix_b[i], ext, cam, noise.sigma_pixel))
    problem.add_factor(OdometerFactor(key_a, key_b, preint_ab))
    problem.add_factor(BiasWalkFactor(key_a, key_b, noise.sigma_bias_walk * max(t_b - t_a, 1e-9)))
    if cfg.use_plane_factor:
        problem.add_factor(PlaneFactor(key_b, key_a, noise.sigma_plane))
    solve(problem, opts or SolveOptions(max_iterations=cfg.init_max_iterations, kernel=RobustKernel(cfg.huber_delta)))

    state_b = problem.value(key_b)
    surviving: List[Tuple[int, np.ndarray]] = []
    for i in kept:
        lid = int(common[i])
        pos = problem.value(("lm", lid)).position
        chi_a = reprojection_chi2(state_a, pos, pix_a[i], ext, cam, noise.sigma_pixel)[0]
        chi_b = reprojection_chi2(state_b, pos, pix_b[i], ext, cam, noise.sigma_pixel)[0]
        if max(chi_a, chi_b) <= cfg.outlier_chi2:
            surviving.append((lid, pos))
    if len(surviving) < cfg.init_min_triangulated:
        raise NotReady("too few triangulated points")

    store = MapStore(ext, cam)
    rec_a = KeyframeRecord(
        id=frame_a, timestamp=t_a, state=state_a.copy(),
        ids=ids_a.copy(), pixels=np.asarray(obs_a.pixels).copy(),
        preint_from_prev=None, n_tracked=len(surviving),
    )
    rec_b = KeyframeRecord(
        id=frame_b, timestamp=t_b, state=state_b.copy(),
        ids=ids_b.copy(), pixels=np.asarray(obs_b.pixels).copy(),
        preint_from_prev=preint_ab, n_tracked=len(surviving),
    )
    store.add_keyframe(rec_a)
    store.add_keyframe(rec_b)
    for lid, pos in surviving:
        store.add_landmark(lid, pos, [frame_a, frame_b])
    store.refresh_covisibility(frame_b, cfg.min_covisibility)
    store.version = 1
    return store


def build_window_problem(
    store: MapStore,
    noise: NoiseParams,
    cfg: PipelineConfig,
) -> Tuple[Problem, dict]:
    """Factor graph over the last N keyframes and everything they see.

    Out-of-window observers enter as fixed frames so their measurements
    constrain shared landmarks without moving.  Consecutive keyframes
    get an odometer factor unless either endpoint carries the slippage
    flag; the gyro-bias random walk is kept regardless since wheel slip
    does not corrupt the gyro.
    """
    order = store.kf_ids
    window = store.window(cfg.window_size)
    in_window = set(window)

    lm_ids = sorted(set().union(*(store.observed_map_ids(k) for k in window)) if window else set())
    fixed_ids = {obs for lid in lm_ids for obs in store.observers[lid]} - in_window
    first_idx = order.index(window[0])
    if first_idx > 0:
        fixed_ids.add(order[first_idx - 1])
    anchor = store.anchor_id
    if cfg.use_plane_factor and anchor not in in_window:
        fixed_ids.add(anchor)
    fixed_list = sorted(fixed_ids)
    gauge_fix_first = len(fixed_list) == 0

    problem = Problem()
    for k in fixed_list:
        problem.add_frame(("kf", k), store.keyframes[k].state.copy(), fixed=True)
    for i, k in enumerate(window):
        problem.add_frame(("kf", k), store.keyframes[k].state.copy(), fixed=(gauge_fix_first and i == 0))
    for lid in lm_ids:
        problem.add_landmark(("lm", lid), Landmark(lid, store.landmarks[lid].copy()))

    lm_set = set(lm_ids)
    for k in fixed_list + window:
        rec = store.keyframes[k]
        wanted = store.observed_map_ids(k) & lm_set
        if not wanted:
            continue
        for row, lid in enumerate(rec.ids):
            lid = int(lid)
            if lid in wanted:
                problem.add_factor(
                    ReprojectionFactor(("kf", k), ("lm", lid), rec.pixels[row], store.ext, store.cam, noise.sigma_pixel)
                )

    odometer_pairs: List[Tuple[int, int]] = []
    in_problem = set(fixed_list) | in_window
    for k in window:
        idx = order.index(k)
        if idx == 0:
            continue
        prev = order[idx - 1]
        if prev not in in_problem:
            continue
        rec, prev_rec = store.keyframes[k], store.keyframes[prev]
        dt = max(rec.timestamp - prev_rec.timestamp, 1e-9)
        problem.add_factor(BiasWalkFactor(("kf", prev), ("kf", k), noise.sigma_bias_walk * dt))
        if rec.preint_from_prev is not None and not rec.slippage and not prev_rec.slippage:
            problem.add_factor(OdometerFactor(("kf", prev), ("kf", k), rec.preint_from_prev))
            odometer_pairs.append((prev, k))

    if cfg.use_plane_factor:
        for k in window:
            if k != anchor:
                problem.add_factor(PlaneFactor(("kf", k), ("kf", anchor), noise.sigma_plane))

    meta = {
        "window": window,
        "fixed": fixed_list,
        "landmarks": lm_ids,
        "odometer_pairs": odometer_pairs,
        "gauge_fixed_first": gauge_fix_first,
    }
    return problem, meta


def local_ba(
    store: MapStore,
    noise: NoiseParams,
    cfg: PipelineConfig,
    opts: Optional[SolveOptions] = None,
) -> SolveReport:
    """Optimize the keyframe window in place and bump the map version."""
    if len(store.kf_ids) < 2:
        raise ValueError("local BA needs at least two keyframes")
    problem, meta = build_window_problem(store, noise, cfg)
    if opts is None:
        # the window re-enters refinement on every later insertion, so a
        # loose per-pass tolerance costs nothing while saving iterations
        opts = SolveOptions(
            max_iterations=cfg.ba_max_iterations,
            step_tol=1e-6,
            rel_cost_tol=1e-5,
            kernel=RobustKernel(cfg.huber_delta),
        )
    report = solve(problem, opts)
    for k in meta["window"]:
        if not problem.is_fixed(("kf", k)):
            store.keyframes[k].state = problem.value(("kf", k))
    for lid in meta["landmarks"]:
        store.landmarks[lid] = problem.value(("lm", lid)).position
    store.version += 1
    store.odometer_factor_log.extend(meta["odometer_pairs"])
    return report
