"""Per-frame tracking state machine.

Every camera frame gets exactly one mode:

  * ``map_updated``      single-frame solve right after a back-end map
                          refresh, predicted from the last keyframe.
  * ``no_map_update``     joint solve of the last two frames with the
                          previous frame's marginal as a prior.
  * ``slippage_recovery`` wheel slip detected; pose reset to the last
                          frame and re-estimated from vision alone.
  * ``reloc``             visual tracking regained against an existing
                          map after a loss.
  * ``new_map_local``     tracking against a freshly initialized map
                          segment in a previously unseen area.
  * ``odom_only``         dead reckoning; always available.

The tracker never moves landmarks: the map is read as a snapshot and
only frame states are optimized here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from .config import PipelineConfig
from .factors import (
    BiasWalkFactor,
    FrameState,
    Landmark,
    OdometerFactor,
    PlaneFactor,
    PriorFactor,
    PriorState,
    ReprojectionFactor,
    RobustKernel,
)
from .manifold import Pose, log_so3
from .mapping import MapStore, reprojection_chi2
from .optimizer import Problem, SolveOptions, marginal_hessian, solve
from .preintegration import PreintegratedOdometer, correct_for_bias, predict_pose
from .sensors import CameraModel, Extrinsics, NoiseParams


class TrackMode(Enum):
    MAP_UPDATED = "map_updated"
    NO_MAP_UPDATE = "no_map_update"
    SLIPPAGE_RECOVERY = "slippage_recovery"
    RELOC = "reloc"
    NEW_MAP_LOCAL = "new_map_local"
    ODOM_ONLY = "odom_only"


VISUAL_MODES = frozenset(
    {
        TrackMode.MAP_UPDATED,
        TrackMode.NO_MAP_UPDATE,
        TrackMode.SLIPPAGE_RECOVERY,
        TrackMode.RELOC,
        TrackMode.NEW_MAP_LOCAL,
    }
)


class InsufficientMatches(Exception):
    """Too few usable correspondences for the requested visual solve."""


@dataclass
class FrameResult:
    """Outcome of tracking one frame."""

    frame_id: int
    timestamp: float
    state: FrameState
    mode: TrackMode
    inliers: int
    n_matches: int
    slippage: bool = False
    keyframe: bool = False
    prior_in: Optional[PriorState] = None
    prior_out: Optional[PriorState] = None


@dataclass
class TrackingContext:
    """What the tracker carries from one frame to the next."""

    last_frame_id: int
    last_timestamp: float
    last_state: FrameState
    prior: Optional[PriorState] = None
    visual_lost: bool = False
    map_version_seen: int = 0
    last_keyframe_id: Optional[int] = None
    last_keyframe_tracked: int = 0
    bias_anchor_time: float = 0.0  # last time vision constrained the bias
    # snapshot of the previous commit, so a frame whose first solve was
    # already committed (and then rejected, e.g. by the slippage check)
    # can be re-solved against the frame before it
    prev_frame_id: Optional[int] = None
    prev_timestamp: float = 0.0
    prev_state: Optional[FrameState] = None
    prev_bias_anchor_time: float = 0.0


def detect_slippage(pre_opt_inliers: int, post_opt_inliers: int) -> bool:
    """True when more than half the original matches became outliers.

    Expects pre_opt_inliers >= 1; the boundary (exactly half surviving)
    does not trigger.
    """
    return post_opt_inliers < math.ceil(pre_opt_inliers / 2)


def keyframe_decision(
    result: FrameResult,
    cfg: PipelineConfig,
    last_kf_state: Optional[FrameState],
    last_kf_tracked: int,
    frames_since_kf: int,
    ba_finished: bool,
) -> bool:
    """Insert a keyframe per the tracked-ratio / motion / BA-done rules.

    The BA-finished rule is throttled by min_keyframe_gap; in the
    interleaved single-threaded schedule a local BA completes between
    every pair of frames, so an unthrottled rule would promote every
    frame.
    """
    if last_kf_state is None:
        return False
    ba_due = ba_finished and frames_since_kf >= cfg.min_keyframe_gap
    if result.mode in VISUAL_MODES:
        if last_kf_tracked > 0 and result.inliers < cfg.keyframe_tracked_ratio * last_kf_tracked:
            return True
        return ba_due
    dist = float(
        np.linalg.norm(result.state.pose.position_in_world() - last_kf_state.pose.position_in_world())
    )
    angle = float(np.linalg.norm(log_so3(result.state.pose.rot @ last_kf_state.pose.rot.T)))
    if dist > cfg.lost_distance_m or angle > cfg.lost_rotation_rad:
        return True
    return ba_due


def build_joint_problem(
    cfg: PipelineConfig,
    ext: Extrinsics,
    cam: CameraModel,
    noise: NoiseParams,
    store: MapStore,
    prev_id: int,
    prev_ts: float,
    prev_state: FrameState,
    frame_id: int,
    ts: float,
    preint_prev: PreintegratedOdometer,
    matches_prev: Tuple[np.ndarray, np.ndarray],
    matches_cur: Tuple[np.ndarray, np.ndarray],
    prior: Optional[PriorState],
) -> Tuple[Problem, Tuple, Tuple]:
    """Two-frame problem for the no-map-update mode.

    Landmarks are fixed at their map positions; passing prior=None
    omits the prior factor, which leaves the pair's gauge to whatever
    visual information the matches carry.
    """
    key_prev, key_cur = ("f", prev_id), ("f", frame_id)
    delta_R, delta_p = correct_for_bias(preint_prev, prev_state.bias_g)
    rot, trans = predict_pose(prev_state.pose.rot, prev_state.pose.trans, delta_R, delta_p)
    pred = FrameState(Pose(rot, trans), prev_state.bias_g.copy())
    pixel_cov = noise.sigma_pixel + np.eye(2) * cfg.map_pixel_std**2

    problem = Problem()
    problem.add_frame(key_prev, prev_state.copy())
    problem.add_frame(key_cur, pred)
    for fkey, (ids, pixels) in ((key_prev, matches_prev), (key_cur, matches_cur)):
        for lid, pix in zip(ids, pixels):
            lkey = ("lm", int(lid))
            if lkey not in problem.values:
                problem.add_landmark(lkey, Landmark(int(lid), store.landmarks[int(lid)].copy()), fixed=True)
            problem.add_factor(ReprojectionFactor(fkey, lkey, pix, ext, cam, pixel_cov))
    if prior is not None:
        problem.add_factor(PriorFactor(key_prev, prior))
    problem.add_factor(OdometerFactor(key_prev, key_cur, preint_prev))
    problem.add_factor(BiasWalkFactor(key_prev, key_cur, noise.sigma_bias_walk * max(ts - prev_ts, 1e-9)))
    if cfg.use_plane_factor and store.anchor_id is not None:
        akey = ("kf", store.anchor_id)
        problem.add_frame(akey, store.keyframes[store.anchor_id].state.copy(), fixed=True)
        problem.add_factor(PlaneFactor(key_prev, akey, noise.sigma_plane))
        problem.add_factor(PlaneFactor(key_cur, akey, noise.sigma_plane))
    return problem, key_prev, key_cur


class Tracker:
    """Sequential front end over a factor-graph pose solver."""

    def __init__(self, cfg: PipelineConfig, ext: Extrinsics, cam: CameraModel, noise: NoiseParams):
        self.cfg = cfg
        self.ext = ext
        self.cam = cam
        self.noise = noise
        # pixel noise plus the error budget for map landmark positions
        self.pixel_cov = noise.sigma_pixel + np.eye(2) * cfg.map_pixel_std**2
        self.ctx: Optional[TrackingContext] = None

    def begin(self, frame_id: int, timestamp: float, state: FrameState, prior: Optional[PriorState] = None) -> None:
        """Seed the context from the bootstrap frame."""
        self.ctx = TrackingContext(
            last_frame_id=frame_id,
            last_timestamp=timestamp,
            last_state=state.copy(),
            prior=prior,
            bias_anchor_time=timestamp,
        )

    def note_keyframe(self, kf_id: int, n_tracked: int) -> None:
        self.ctx.last_keyframe_id = kf_id
        self.ctx.last_keyframe_tracked = n_tracked

    # ------------------------------------------------------------------
    # shared pieces

    def _opts(self) -> SolveOptions:
        # per-frame solves start at the odometer prediction, so cost changes
        # below a millionth of the total are noise-floor polishing
        return SolveOptions(
            max_iterations=self.cfg.tracking_max_iterations,
            step_tol=1e-7,
            rel_cost_tol=1e-6,
            kernel=RobustKernel(self.cfg.huber_delta),
        )

    def map_matches(self, matches, store: MapStore) -> Tuple[np.ndarray, np.ndarray]:
        """Filter correspondences down to landmarks the map actually has."""
        ids = np.asarray(matches.ids, dtype=int)
        pixels = np.asarray(matches.pixels, dtype=float).reshape(-1, 2)
        if ids.size == 0:
            return ids, pixels
        mask = store.mapped_subset(ids)
        return ids[mask], pixels[mask]

    def _count_inliers(self, state: FrameState, ids: np.ndarray, pixels: np.ndarray, store: MapStore) -> int:
        if len(ids) == 0:
            return 0
        chi2 = reprojection_chi2(
            state, store.landmark_points(ids), pixels, self.ext, self.cam, self.pixel_cov
        )
        return int(np.sum(chi2 <= self.cfg.outlier_chi2))

    def _predict(self, preint: PreintegratedOdometer, frame_id: Optional[int] = None) -> FrameState:
        last = self.ctx.last_state
        if frame_id is not None:
            _, _, last, _ = self._rollback_anchor(frame_id)
        delta_R, delta_p = correct_for_bias(preint, last.bias_g)
        rot, trans = predict_pose(last.pose.rot, last.pose.trans, delta_R, delta_p)
        return FrameState(Pose(rot, trans), last.bias_g.copy())

    def _add_anchor(self, problem: Problem, store: MapStore):
        if not self.cfg.use_plane_factor or store.anchor_id is None:
            return None
        akey = ("kf", store.anchor_id)
        if akey not in problem.values:
            problem.add_frame(akey, store.keyframes[store.anchor_id].state.copy(), fixed=True)
        return akey

    def _add_visual(self, problem: Problem, fkey, ids: np.ndarray, pixels: np.ndarray, store: MapStore) -> None:
        for lid, pix in zip(ids, pixels):
            lkey = ("lm", int(lid))
            if lkey not in problem.values:
                problem.add_landmark(lkey, Landmark(int(lid), store.landmarks[int(lid)].copy()), fixed=True)
            problem.add_factor(ReprojectionFactor(fkey, lkey, pix, self.ext, self.cam, self.pixel_cov))

    def _marginal_prior(self, problem: Problem, key) -> PriorState:
        h = marginal_hessian(problem, key, RobustKernel(self.cfg.huber_delta))
        cov = np.linalg.inv(h)
        cov = (cov + cov.T) / 2.0
        st: FrameState = problem.value(key)
        return PriorState(
            R_tilde=st.pose.rot.copy(),
            p_tilde=st.pose.trans.copy(),
            b_tilde=st.bias_g.copy(),
            cov=cov,
        )

    def _rollback_anchor(self, frame_id: int) -> Tuple[int, float, FrameState, float]:
        """Previous-frame anchor, skipping a commit of frame_id itself."""
        ctx = self.ctx
        if ctx.last_frame_id == frame_id and ctx.prev_state is not None:
            return ctx.prev_frame_id, ctx.prev_timestamp, ctx.prev_state, ctx.prev_bias_anchor_time
        return ctx.last_frame_id, ctx.last_timestamp, ctx.last_state, ctx.bias_anchor_time

    def _commit(self, result: FrameResult) -> None:
        ctx = self.ctx
        ctx.prev_frame_id = ctx.last_frame_id
        ctx.prev_timestamp = ctx.last_timestamp
        ctx.prev_state = ctx.last_state
        ctx.prev_bias_anchor_time = ctx.bias_anchor_time
        ctx.last_frame_id = result.frame_id
        ctx.last_timestamp = result.timestamp
        ctx.last_state = result.state
        ctx.prior = result.prior_out
        ctx.visual_lost = result.mode not in VISUAL_MODES
        if result.mode in VISUAL_MODES:
            ctx.bias_anchor_time = result.timestamp

    def _solve_visual_only(
        self,
        frame_id: int,
        ts: float,
        init_state: FrameState,
        ids: np.ndarray,
        pixels: np.ndarray,
        store: MapStore,
        mode: TrackMode,
        slippage: bool = False,
    ) -> FrameResult:
        """Pose-only solve from reprojection + plane; no odometer factor.

        The gyro bias keeps a soft random-walk anchor to the last
        visually constrained estimate, since vision alone cannot see it.
        """
        anchor_id, _, anchor_state, anchor_time = self._rollback_anchor(frame_id)
        fkey = ("f", frame_id)
        prev_key = ("f", anchor_id)
        problem = Problem()
        problem.add_frame(fkey, init_state)
        problem.add_frame(prev_key, anchor_state.copy(), fixed=True)
        anchor_key = self._add_anchor(problem, store)
        self._add_visual(problem, fkey, ids, pixels, store)
        walk_dt = max(ts - anchor_time, 1e-9)
        problem.add_factor(BiasWalkFactor(prev_key, fkey, self.noise.sigma_bias_walk * walk_dt))
        if anchor_key is not None:
            problem.add_factor(PlaneFactor(fkey, anchor_key, self.noise.sigma_plane))
        solve(problem, self._opts())
        state = problem.value(fkey)
        inliers = self._count_inliers(state, ids, pixels, store)
        prior_out = self._marginal_prior(problem, fkey)
        return FrameResult(
            frame_id, ts, state, mode, inliers, len(ids), slippage=slippage, prior_out=prior_out
        )

    # ------------------------------------------------------------------
    # per-frame modes

    def track_map_updated(
        self,
        frame_id: int,
        ts: float,
        preint_from_kf: PreintegratedOdometer,
        matches,
        store: MapStore,
    ) -> FrameResult:
        """Single-frame solve predicted from the last (just refined) keyframe."""
        ctx = self.ctx
        kf = store.keyframes[ctx.last_keyframe_id]
        delta_R, delta_p = correct_for_bias(preint_from_kf, kf.state.bias_g)
        rot, trans = predict_pose(kf.state.pose.rot, kf.state.pose.trans, delta_R, delta_p)
        pred = FrameState(Pose(rot, trans), kf.state.bias_g.copy())
        ids, pixels = self.map_matches(matches, store)

        fkey, kfkey = ("f", frame_id), ("kf", kf.id)
        problem = Problem()
        problem.add_frame(fkey, pred)
        problem.add_frame(kfkey, kf.state.copy(), fixed=True)
        anchor_key = self._add_anchor(problem, store)
        self._add_visual(problem, fkey, ids, pixels, store)
        problem.add_factor(OdometerFactor(kfkey, fkey, preint_from_kf))
        problem.add_factor(
            BiasWalkFactor(kfkey, fkey, self.noise.sigma_bias_walk * max(ts - kf.timestamp, 1e-9))
        )
        if anchor_key is not None:
            problem.add_factor(PlaneFactor(fkey, anchor_key, self.noise.sigma_plane))
        solve(problem, self._opts())

        state = problem.value(fkey)
        inliers = self._count_inliers(state, ids, pixels, store)
        prior_out = self._marginal_prior(problem, fkey)
        result = FrameResult(frame_id, ts, state, TrackMode.MAP_UPDATED, inliers, len(ids), prior_out=prior_out)
        ctx.map_version_seen = store.version
        self._commit(result)
        return result

    def track_no_map_update(
        self,
        frame_id: int,
        ts: float,
        preint_prev: PreintegratedOdometer,
        matches_prev: Tuple[np.ndarray, np.ndarray],
        matches_cur,
        store: MapStore,
    ) -> FrameResult:
        """Joint solve of the last two frames chained through the prior.

        matches_prev is the (ids, pixels) pair the previous frame was
        tracked with; matches_cur is this frame's raw correspondences.
        """
        ctx = self.ctx
        if ctx.prior is None:
            raise ValueError("no-map-update tracking requires the previous frame's prior")
        ids, pixels = self.map_matches(matches_cur, store)
        prior_in = ctx.prior
        problem, key_prev, key_cur = build_joint_problem(
            self.cfg, self.ext, self.cam, self.noise, store,
            ctx.last_frame_id, ctx.last_timestamp, ctx.last_state,
            frame_id, ts, preint_prev, matches_prev, (ids, pixels), prior_in,
        )
        solve(problem, self._opts())
        state = problem.value(key_cur)
        inliers = self._count_inliers(state, ids, pixels, store)
        prior_out = self._marginal_prior(problem, key_cur)
        result = FrameResult(
            frame_id, ts, state, TrackMode.NO_MAP_UPDATE, inliers, len(ids),
            prior_in=prior_in, prior_out=prior_out,
        )
        self._commit(result)
        return result

    def recover_from_slippage(
        self,
        frame_id: int,
        ts: float,
        rematches,
        store: MapStore,
        preint_prev: Optional[PreintegratedOdometer] = None,
        confirm_distance: Optional[float] = None,
    ) -> Optional[FrameResult]:
        """Re-estimate from vision after the encoders reported phantom motion.

        The initial pose is reset to the last frame's pose and the
        odometer factor is dropped entirely; raises InsufficientMatches
        when the re-matching is too thin to support a visual solve.

        When preint_prev and confirm_distance are given, the slip must be
        confirmed: if the vision-only pose agrees with the odometer
        prediction to within confirm_distance, the wheels did not lie and
        None is returned with the context untouched.
        """
        ids, pixels = self.map_matches(rematches, store)
        if len(ids) < self.cfg.min_inliers:
            raise InsufficientMatches(f"{len(ids)} rematches, need {self.cfg.min_inliers}")
        _, _, base, _ = self._rollback_anchor(frame_id)
        init = FrameState(base.pose.copy(), base.bias_g.copy())
        result = self._solve_visual_only(
            frame_id, ts, init, ids, pixels, store, TrackMode.SLIPPAGE_RECOVERY, slippage=True
        )
        if preint_prev is not None and confirm_distance is not None:
            pred = self._predict(preint_prev, frame_id)
            moved = float(
                np.linalg.norm(result.state.pose.position_in_world() - pred.pose.position_in_world())
            )
            if moved <= confirm_distance:
                return None
        self._commit(result)
        return result

    def track_visual_lost(
        self,
        frame_id: int,
        ts: float,
        preint_prev: PreintegratedOdometer,
        reloc_matches=None,
        reloc_store: Optional[MapStore] = None,
        new_map_matches=None,
        new_map_store: Optional[MapStore] = None,
    ) -> FrameResult:
        """Resolve a lost frame: relocalize, use a new local map, or dead-reckon."""
        candidates = []
        if reloc_store is not None and reloc_matches is not None:
            candidates.append((reloc_matches, reloc_store, TrackMode.RELOC))
        if new_map_store is not None and new_map_matches is not None:
            candidates.append((new_map_matches, new_map_store, TrackMode.NEW_MAP_LOCAL))
        for matches, store, mode in candidates:
            ids, pixels = self.map_matches(matches, store)
            if len(ids) < self.cfg.min_inliers:
                continue
            pred = self._predict(preint_prev, frame_id)
            result = self._solve_visual_only(frame_id, ts, pred, ids, pixels, store, mode)
            if result.inliers >= self.cfg.min_inliers:
                self._commit(result)
                return result
        result = self.odom_only(frame_id, ts, preint_prev)
        return result

    def odom_only(self, frame_id: int, ts: float, preint_prev: PreintegratedOdometer, slippage: bool = False) -> FrameResult:
        """Dead reckoning: last pose composed with the preintegrated motion."""
        pred = self._predict(preint_prev, frame_id)
        result = FrameResult(frame_id, ts, pred, TrackMode.ODOM_ONLY, 0, 0, slippage=slippage)
        self._commit(result)
        return result


# ---------------------------------------------------------------------------
# per-frame JSON-lines log


def frame_log_entry(result: FrameResult) -> dict:
    from scipy.spatial.transform import Rotation

    rot, trans = result.state.pose.rot, result.state.pose.trans
    pos = -rot.T @ trans
    quat = Rotation.from_matrix(rot.T).as_quat()
    return {
        "frame": result.frame_id,
        "time": round(result.timestamp, 9),
        "mode": result.mode.value,
        "inliers": result.inliers,
        "slippage": result.slippage,
        "keyframe": result.keyframe,
        "position": [round(float(v), 9) for v in pos],
        "quaternion": [round(float(v), 9) for v in quat],
    }


def write_frame_log(path: str, results: List[FrameResult]) -> None:
    with open(path, "w") as fh:
        for result in results:
            fh.write(json.dumps(frame_log_entry(result)) + "\n")


def read_frame_log(path: str) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
