"""End-to-end pipeline tests on small simulated scenarios."""

import os

import numpy as np
import pytest

from odoslam import sim
from odoslam.config import PipelineConfig
from odoslam.evaluate import METRICS_FIELDS, align_horn, read_tum_trajectory
from odoslam.pipeline import (
    RUN_MODES,
    SlamSystem,
    dead_reckoning,
    run_pipeline,
    write_outputs,
)
from odoslam.tracking import VISUAL_MODES, TrackMode, read_frame_log


def make_trace(
    length=20.0,
    noise=None,
    n_landmarks=400,
    faults=None,
    seed=0,
    bias=(0.0, 0.0, 0.0),
    segments=None,
):
    cfg = {
        "trajectory": {
            "segments": segments or [{"kind": "line", "length": length}],
            "speed": 1.0,
        },
        "noise": noise or {},
        "landmarks": {"count": n_landmarks},
        "rates": {"camera_hz": 2},
        "sim": {"seed": seed},
        "bias": {"initial": list(bias)},
    }
    if faults:
        cfg["faults"] = faults
    return sim.generate(sim.scenario_from_dict(cfg))


NOISE_FREE = {
    "gyro_std": 0.0,
    "encoder_std": 0.0,
    "bias_walk_std": 0.0,
    "pixel_std": 0.0,
}


class TestDeadReckoning:
    def test_noise_free_matches_truth(self):
        trace = make_trace(
            length=10.0,
            noise=NOISE_FREE,
            segments=[
                {"kind": "line", "length": 6.0},
                {"kind": "arc", "radius": 3.0, "angle_deg": 90.0},
            ],
        )
        states = dead_reckoning(trace)
        est = np.stack([s.pose.position_in_world() for s in states])
        err = np.linalg.norm(est - trace.truth_positions(), axis=1)
        assert err.max() < 1e-6

    def test_one_state_per_frame(self):
        trace = make_trace(length=5.0, noise=NOISE_FREE)
        states = dead_reckoning(trace)
        assert len(states) == len(trace.frame_times)

    def test_noisy_encoder_drifts(self):
        trace = make_trace(length=20.0, noise={"gyro_std": 5e-3}, seed=3)
        states = dead_reckoning(trace)
        est = np.stack([s.pose.position_in_world() for s in states])
        err = np.linalg.norm(est - trace.truth_positions(), axis=1)
        assert err[-1] > 1e-3


class TestRunModes:
    def test_mode_names(self):
        assert RUN_MODES == (
            "full",
            "dead-reckoning-only",
            "no-plane-factor",
            "no-slippage-detector",
        )

    def test_unknown_mode_rejected(self):
        trace = make_trace(length=5.0, noise=NOISE_FREE)
        with pytest.raises(ValueError, match="mode"):
            SlamSystem(trace, mode="turbo")

    def test_ablations_remap_config(self):
        trace = make_trace(length=5.0, noise=NOISE_FREE)
        no_plane = SlamSystem(trace, mode="no-plane-factor")
        assert no_plane.cfg.use_plane_factor is False
        assert no_plane.cfg.use_slippage_detector is True
        no_slip = SlamSystem(trace, mode="no-slippage-detector")
        assert no_slip.cfg.use_slippage_detector is False
        assert no_slip.cfg.use_plane_factor is True

    def test_caller_config_not_mutated(self):
        trace = make_trace(length=5.0, noise=NOISE_FREE)
        cfg = PipelineConfig()
        SlamSystem(trace, cfg, mode="no-plane-factor")
        assert cfg.use_plane_factor is True

    def test_dead_reckoning_only(self):
        trace = make_trace(length=10.0, noise=NOISE_FREE)
        result = run_pipeline(trace, mode="dead-reckoning-only")
        assert all(r.mode is TrackMode.ODOM_ONLY for r in result.results)
        assert result.segments == []
        err = np.linalg.norm(
            result.positions() - trace.truth_positions(), axis=1
        )
        assert err.max() < 1e-6


@pytest.fixture(scope="module")
def nominal_run():
    trace = make_trace(length=20.0, noise=NOISE_FREE)
    return trace, run_pipeline(trace)


@pytest.fixture(scope="module")
def slip_run():
    faults = [
        {
            "kind": "wheel_slip",
            "t_start": 10.0,
            "t_end": 11.0,
            "slip_distance": 1.0,
        }
    ]
    trace = make_trace(length=25.0, faults=faults, seed=2)
    return trace, run_pipeline(trace)


@pytest.fixture(scope="module")
def blackout_run():
    faults = [{"kind": "blackout", "t_start": 8.0, "t_end": 14.0}]
    trace = make_trace(length=30.0, faults=faults, seed=4)
    return trace, run_pipeline(trace)


class TestNominalRun:

    def test_first_frame_is_odom_only(self, nominal_run):
        _, result = nominal_run
        assert result.results[0].mode is TrackMode.ODOM_ONLY

    def test_map_initializes_then_tracks(self, nominal_run):
        _, result = nominal_run
        modes = [r.mode for r in result.results]
        assert TrackMode.MAP_UPDATED in modes
        # tracking holds without dropouts while landmarks remain visible
        visual = [i for i, m in enumerate(modes) if m in VISUAL_MODES]
        assert all(m in VISUAL_MODES for m in modes[visual[0] : visual[-1] + 1])
        assert visual[-1] - visual[0] >= 20
        assert len(result.segments) == 1

    def test_noise_free_error_is_tiny(self, nominal_run):
        trace, result = nominal_run
        err = np.linalg.norm(result.positions() - trace.truth_positions(), axis=1)
        assert err.max() < 1e-4

    def test_keyframes_marked_and_stored(self, nominal_run):
        _, result = nominal_run
        kf_results = [r for r in result.results if r.keyframe]
        store = result.segments[0]
        assert len(kf_results) >= 2
        assert set(store.kf_ids) == {r.frame_id for r in kf_results}

    def test_result_accessors(self, nominal_run):
        trace, result = nominal_run
        n = len(trace.frame_times)
        assert result.times.shape == (n,)
        assert len(result.poses()) == n
        assert result.positions().shape == (n, 3)

    def test_no_slippage_flags_on_clean_run(self, nominal_run):
        _, result = nominal_run
        assert not any(r.slippage for r in result.results)

    def test_deterministic_rerun(self, nominal_run):
        trace, result = nominal_run
        again = run_pipeline(trace)
        assert np.array_equal(result.positions(), again.positions())
        assert [r.mode for r in result.results] == [r.mode for r in again.results]


class TestNoisyRun:
    def test_beats_dead_reckoning(self):
        trace = make_trace(length=30.0, seed=5, bias=(0.002, -0.001, 0.0015))
        result = run_pipeline(trace)
        truth = trace.truth_positions()
        slam_err = align_horn(result.positions(), truth).rmse
        dr = np.stack(
            [s.pose.position_in_world() for s in dead_reckoning(trace)]
        )
        dr_err = align_horn(dr, truth).rmse
        assert slam_err < dr_err
        assert slam_err < 0.05


class TestSlippageScenario:

    def test_slip_detected_and_flagged(self, slip_run):
        _, result = slip_run
        flagged = [r for r in result.results if r.slippage]
        assert flagged
        assert all(9.5 <= r.timestamp <= 12.5 for r in flagged)

    def test_recovery_mode_appears(self, slip_run):
        _, result = slip_run
        assert any(r.mode is TrackMode.SLIPPAGE_RECOVERY for r in result.results)

    def test_trajectory_survives_slip(self, slip_run):
        trace, result = slip_run
        err = np.linalg.norm(result.positions() - trace.truth_positions(), axis=1)
        assert err[-1] < 0.1

    def test_detector_off_swallows_the_slip(self, slip_run):
        trace, _ = slip_run
        blind = run_pipeline(trace, mode="no-slippage-detector")
        assert not any(r.slippage for r in blind.results)


class TestBlackoutScenario:

    def test_blackout_frames_run_on_odometry(self, blackout_run):
        trace, result = blackout_run
        for k, r in enumerate(result.results):
            if trace.in_blackout(k):
                assert r.mode is TrackMode.ODOM_ONLY

    def test_tracking_resumes_after_blackout(self, blackout_run):
        _, result = blackout_run
        post = [r.mode for r in result.results if r.timestamp >= 14.0]
        assert any(m in VISUAL_MODES for m in post)

    def test_pipeline_reaches_the_end(self, blackout_run):
        trace, result = blackout_run
        assert len(result.results) == len(trace.frame_times)
        err = np.linalg.norm(result.positions() - trace.truth_positions(), axis=1)
        assert err[-1] < 0.5


class TestWriteOutputs:
    def test_artifacts_and_metrics_row(self, tmp_path):
        trace = make_trace(length=12.0, noise=NOISE_FREE)
        result = run_pipeline(trace)
        out = str(tmp_path / "run")
        row = write_outputs(result, out, label="demo")

        for name in (
            "estimated.tum",
            "groundtruth.tum",
            "frames.jsonl",
            "map.ply",
            "keyframes.tum",
            "metrics.csv",
            "errors.csv",
        ):
            assert os.path.exists(os.path.join(out, name)), name

        assert list(row) == METRICS_FIELDS
        assert row["scenario"] == "demo"
        assert float(row["rmse_m"]) < 1e-4

        times, poses = read_tum_trajectory(os.path.join(out, "estimated.tum"))
        assert len(poses) == len(trace.frame_times)
        assert np.allclose(times, trace.frame_times)

        entries = read_frame_log(os.path.join(out, "frames.jsonl"))
        assert len(entries) == len(trace.frame_times)
