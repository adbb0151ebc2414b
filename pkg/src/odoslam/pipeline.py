"""End-to-end system: a simulated trace in, per-frame estimates out.

Single-threaded interleaved schedule: each camera frame is tracked,
then (if a keyframe was inserted) one local bundle adjustment runs
before the next frame is touched.  The run is a pure function of the
trace and configuration, so outputs are reproducible byte for byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import evaluate
from .config import PipelineConfig, estimator_noise
from .factors import FrameState
from .manifold import Pose
from .mapping import (
    Degenerate,
    KeyframeRecord,
    MapStore,
    NotReady,
    initialize_map,
    local_ba,
    triangulate,
)
from .preintegration import PreintegratedOdometer, integrate_step, integrate_steps, predict_pose
from .sim import SimTrace
from .tracking import (
    VISUAL_MODES,
    FrameResult,
    InsufficientMatches,
    TrackMode,
    Tracker,
    detect_slippage,
    keyframe_decision,
    write_frame_log,
)

RUN_MODES = ("full", "dead-reckoning-only", "no-plane-factor", "no-slippage-detector")


def _integrate_into(acc: PreintegratedOdometer, steps, ext, noise) -> PreintegratedOdometer:
    for omega, dl, dr, dt in steps:
        acc = integrate_step(acc, omega, dl, dr, dt, ext, noise)
    return acc


@dataclass
class _Reference:
    """Candidate first frame for a (re)initialization attempt."""

    id: int
    timestamp: float
    state: FrameState
    obs: object  # .ids / .pixels
    preint: PreintegratedOdometer


@dataclass
class PipelineResult:
    """Everything a run produced, ready for evaluation and dumping."""

    trace: SimTrace
    cfg: PipelineConfig
    mode: str
    results: List[FrameResult]
    segments: List[MapStore]

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self.trace.frame_times, dtype=float)

    def poses(self) -> List[Pose]:
        return [r.state.pose for r in self.results]

    def positions(self) -> np.ndarray:
        return np.stack([r.state.pose.position_in_world() for r in self.results])


def dead_reckoning(trace: SimTrace, noise=None, cfg: Optional[PipelineConfig] = None) -> List[FrameState]:
    """Odometer-only pose chain over the whole trace, bias held at zero."""
    cfg = cfg or PipelineConfig()
    noise = noise if noise is not None else estimator_noise(trace.scenario.noise, cfg)
    ext = trace.scenario.extrinsics
    state = FrameState(Pose.identity(), np.zeros(3))
    out = [state.copy()]
    for k in range(1, trace.n_frames):
        pre = integrate_steps(trace.steps_between(k - 1, k), ext, noise, bias_ref=state.bias_g)
        rot, trans = predict_pose(state.pose.rot, state.pose.trans, pre.delta_R, pre.delta_p)
        state = FrameState(Pose(rot, trans), state.bias_g.copy())
        out.append(state)
    return out


class SlamSystem:
    """Owns the tracker, the map segments, and the interleaved schedule."""

    def __init__(self, trace: SimTrace, cfg: Optional[PipelineConfig] = None, mode: str = "full"):
        if mode not in RUN_MODES:
            raise ValueError(f"unknown run mode {mode!r}; expected one of {RUN_MODES}")
        cfg = cfg or PipelineConfig()
        if mode == "no-plane-factor":
            cfg = cfg.replace(use_plane_factor=False)
        elif mode == "no-slippage-detector":
            cfg = cfg.replace(use_slippage_detector=False)
        self.trace = trace
        self.cfg = cfg
        self.mode = mode
        self.ext = trace.scenario.extrinsics
        self.cam = trace.scenario.camera
        self.noise = estimator_noise(trace.scenario.noise, cfg)
        self.tracker = Tracker(cfg, self.ext, self.cam, self.noise)
        self.segments: List[MapStore] = []
        self.active: Optional[MapStore] = None
        self.results: List[FrameResult] = []
        self._ref: Optional[_Reference] = None
        self._preint_kf: Optional[PreintegratedOdometer] = None
        self._preint_kf_from: Optional[Tuple[MapStore, int]] = None
        self._frames_since_kf = 0
        self._ba_finished = False
        self._slip_since_kf = False
        self._last_matches: Tuple[np.ndarray, np.ndarray] = (np.zeros(0, dtype=int), np.zeros((0, 2)))

    # ------------------------------------------------------------------

    def run(self) -> PipelineResult:
        trace = self.trace
        if self.mode == "dead-reckoning-only":
            return self._run_dead_reckoning()

        t0 = float(trace.frame_times[0])
        state0 = FrameState(Pose.identity(), np.zeros(3))
        self.tracker.begin(0, t0, state0)
        self.tracker.ctx.visual_lost = True  # no map yet
        self.results.append(FrameResult(0, t0, state0, TrackMode.ODOM_ONLY, 0, 0))
        self._ref = _Reference(0, t0, state0.copy(), trace.observations(0), PreintegratedOdometer.empty())

        for k in range(1, trace.n_frames):
            t = float(trace.frame_times[k])
            steps = trace.steps_between(k - 1, k)
            bias = self.tracker.ctx.last_state.bias_g
            preint_prev = integrate_steps(steps, self.ext, self.noise, bias_ref=bias)
            if self._preint_kf is not None:
                self._preint_kf = _integrate_into(self._preint_kf, steps, self.ext, self.noise)
            if self._ref is not None:
                self._ref.preint = _integrate_into(self._ref.preint, steps, self.ext, self.noise)
            obs = trace.observations(k)

            result = self._process(k, t, preint_prev, obs)
            self.results.append(result)
            if result.mode in VISUAL_MODES and self.active is not None:
                self._last_matches = self.tracker.map_matches(obs, self.active)
            else:
                self._last_matches = (np.zeros(0, dtype=int), np.zeros((0, 2)))

        return PipelineResult(trace, self.cfg, self.mode, self.results, self.segments)

    def _run_dead_reckoning(self) -> PipelineResult:
        states = dead_reckoning(self.trace, self.noise, self.cfg)
        results = [
            FrameResult(k, float(self.trace.frame_times[k]), st, TrackMode.ODOM_ONLY, 0, 0)
            for k, st in enumerate(states)
        ]
        return PipelineResult(self.trace, self.cfg, self.mode, results, [])

    # ------------------------------------------------------------------

    def _process(self, k: int, t: float, preint_prev, obs) -> FrameResult:
        ctx = self.tracker.ctx
        cfg = self.cfg
        if self.active is None or ctx.visual_lost:
            return self._handle_lost(k, t, preint_prev, obs)

        ids = np.asarray(obs.ids, dtype=int)
        n_map = int(np.sum(self.active.mapped_subset(ids))) if ids.size else 0
        if n_map < cfg.min_inliers:
            return self._handle_lost(k, t, preint_prev, obs)

        if self.active.version != ctx.map_version_seen:
            result = self.tracker.track_map_updated(k, t, self._preint_kf, obs, self.active)
        else:
            result = self.tracker.track_no_map_update(
                k, t, preint_prev, self._last_matches, obs, self.active
            )

        slipped = False
        if cfg.use_slippage_detector and detect_slippage(result.n_matches, result.inliers):
            try:
                recovered = self.tracker.recover_from_slippage(
                    k, t, obs, self.active, preint_prev, cfg.slip_confirm_distance_m
                )
            except InsufficientMatches:
                recovered = self.tracker.odom_only(k, t, preint_prev, slippage=True)
            if recovered is not None:
                result = recovered
                slipped = True
                self._slip_since_kf = True
        if result.mode in VISUAL_MODES and result.inliers < cfg.min_inliers:
            ctx.visual_lost = True
        self._maybe_keyframe(result, obs, force=slipped and result.mode is TrackMode.SLIPPAGE_RECOVERY)
        return result

    def _handle_lost(self, k: int, t: float, preint_prev, obs) -> FrameResult:
        cfg = self.cfg
        ids = np.asarray(obs.ids, dtype=int)

        best, best_n = None, 0
        for store in self.segments:
            n = int(np.sum(store.mapped_subset(ids))) if ids.size else 0
            if n > best_n:
                best, best_n = store, n
        if best is not None and best_n >= cfg.min_inliers:
            result = self.tracker.track_visual_lost(k, t, preint_prev, reloc_matches=obs, reloc_store=best)
            if result.mode is TrackMode.RELOC:
                self._adopt_segment(best)
                self._frames_since_kf += 1
                self._insert_keyframe(result, obs)
                return result
            self._maybe_keyframe(result, obs)
            return result

        new_result = self._try_new_map(k, t, obs)
        if new_result is not None:
            return new_result

        result = self.tracker.odom_only(k, t, preint_prev)
        if self._ref is None and len(obs) > 0:
            self._ref = _Reference(k, t, result.state.copy(), obs, PreintegratedOdometer.empty(result.state.bias_g))
        self._maybe_keyframe(result, obs)
        return result

    def _try_new_map(self, k: int, t: float, obs) -> Optional[FrameResult]:
        """Attempt a two-frame bootstrap against the stored reference frame."""
        cfg = self.cfg
        if self._ref is None or len(self._ref.obs) == 0 or len(obs) == 0:
            return None
        ref = self._ref
        try:
            store = initialize_map(
                ref.id, ref.timestamp, ref.state, ref.obs,
                k, t, obs, ref.preint,
                self.ext, self.cam, self.noise, cfg,
            )
        except NotReady as err:
            if err.reason == "insufficient matches":
                self._ref = None  # re-seed from the current frame next time
            return None

        label = TrackMode.NEW_MAP_LOCAL if self.segments else TrackMode.MAP_UPDATED
        self.segments.append(store)
        self.active = store
        state_b = store.keyframes[k].state.copy()
        n_tracked = store.keyframes[k].n_tracked
        result = FrameResult(k, t, state_b, label, n_tracked, n_tracked, keyframe=True)

        self.tracker.begin(k, t, state_b)
        self.tracker.note_keyframe(k, n_tracked)
        self.results[ref.id].keyframe = True
        self._preint_kf = PreintegratedOdometer.empty(state_b.bias_g)
        self._preint_kf_from = (store, k)
        self._frames_since_kf = 0
        self._ba_finished = True
        self._slip_since_kf = False
        self._ref = None
        return result

    # ------------------------------------------------------------------

    def _adopt_segment(self, store: MapStore) -> None:
        self.active = store
        self.tracker.ctx.map_version_seen = store.version

    def _maybe_keyframe(self, result: FrameResult, obs, force: bool = False) -> None:
        ctx, cfg = self.tracker.ctx, self.cfg
        store = self.active
        if store is None:
            return
        self._frames_since_kf += 1
        last_kf_state = None
        if ctx.last_keyframe_id is not None and ctx.last_keyframe_id in store.keyframes:
            last_kf_state = store.keyframes[ctx.last_keyframe_id].state
        if force or keyframe_decision(
            result, cfg, last_kf_state, ctx.last_keyframe_tracked, self._frames_since_kf, self._ba_finished
        ):
            self._insert_keyframe(result, obs)

    def _insert_keyframe(self, result: FrameResult, obs) -> None:
        store = self.active
        cfg = self.cfg
        prev_id = store.kf_ids[-1]
        linked = (
            self._preint_kf is not None
            and self._preint_kf_from is not None
            and self._preint_kf_from[0] is store
            and self._preint_kf_from[1] == prev_id
        )
        rec = KeyframeRecord(
            id=result.frame_id,
            timestamp=result.timestamp,
            state=result.state.copy(),
            ids=np.asarray(obs.ids, dtype=int).copy(),
            pixels=np.asarray(obs.pixels, dtype=float).reshape(-1, 2).copy(),
            slippage=self._slip_since_kf or result.slippage,
            preint_from_prev=self._preint_kf if linked else None,
            n_tracked=result.inliers,
        )
        store.add_keyframe(rec)

        # new landmarks: features this keyframe shares with the previous
        # one that the map does not know yet
        prev = store.keyframes[prev_id]
        if rec.ids.size and prev.ids.size:
            common, idx_prev, idx_new = np.intersect1d(prev.ids, rec.ids, return_indices=True)
            for lid, ip, io in zip(common, idx_prev, idx_new):
                lid = int(lid)
                if lid in store.landmarks:
                    continue
                try:
                    point = triangulate(
                        prev.pixels[ip], rec.pixels[io], prev.state.pose, rec.state.pose,
                        self.ext, self.cam, cfg.triangulation_min_parallax_rad,
                    )
                except Degenerate:
                    continue
                store.add_landmark(lid, point, [prev_id, rec.id])
        store.refresh_covisibility(rec.id, cfg.min_covisibility)

        result.keyframe = True
        self.tracker.note_keyframe(rec.id, result.inliers)
        self._slip_since_kf = False
        self._frames_since_kf = 0
        self._preint_kf = PreintegratedOdometer.empty(result.state.bias_g)
        self._preint_kf_from = (store, rec.id)

        if len(store.kf_ids) >= 2:
            local_ba(store, self.noise, cfg)
            self._ba_finished = True


def run_pipeline(trace: SimTrace, cfg: Optional[PipelineConfig] = None, mode: str = "full") -> PipelineResult:
    return SlamSystem(trace, cfg, mode).run()


def write_outputs(result: PipelineResult, out_dir: str, label: str = "scenario") -> dict:
    """Write every artifact of one run into out_dir; returns the metrics row."""
    os.makedirs(out_dir, exist_ok=True)
    times = result.times
    evaluate.write_tum_trajectory(os.path.join(out_dir, "estimated.tum"), times, result.poses())
    evaluate.write_tum_trajectory(os.path.join(out_dir, "groundtruth.tum"), times, result.trace.truth_poses)
    write_frame_log(os.path.join(out_dir, "frames.jsonl"), result.results)
    for i, store in enumerate(result.segments):
        suffix = "" if i == 0 else f"_{i}"
        store.dump_ply(os.path.join(out_dir, f"map{suffix}.ply"))
        store.write_keyframe_trajectory(os.path.join(out_dir, f"keyframes{suffix}.tum"))

    aligned = evaluate.align_horn(result.positions(), result.trace.truth_positions())
    row = evaluate.metrics_row(label, result.trace.scenario.seed, aligned)
    evaluate.write_metrics_csv(os.path.join(out_dir, "metrics.csv"), [row])
    evaluate.write_per_pose_errors(os.path.join(out_dir, "errors.csv"), times, aligned.errors)
    return row
