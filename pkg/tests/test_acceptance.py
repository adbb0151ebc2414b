"""End-to-end acceptance checks for the full estimator stack.

Each test covers one headline requirement, prints a single PASS/FAIL
line with the measured numbers, and asserts the stated tolerance.
"""

import time

import numpy as np
import pytest

from jacobian_check import ALL_CONFIG_MAKERS, assert_jacobians_match
from test_optimizer import three_frame_full_problem

from odoslam import sim
from odoslam.config import PipelineConfig
from odoslam.evaluate import align_horn
from odoslam.factors import FrameState
from odoslam.manifold import Pose, log_so3
from odoslam.mapping import initialize_map
from odoslam.optimizer import SolveOptions, gradient_infinity_norm, solve
from odoslam.pipeline import dead_reckoning, run_pipeline
from odoslam.preintegration import (
    correct_for_bias,
    integrate_steps,
    monte_carlo_covariance,
)
from odoslam.sensors import CameraModel, Extrinsics, NoiseParams, project_many
from odoslam.sim import Correspondences, mount_extrinsics
from odoslam.tracking import TrackMode


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {criterion} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def run_scenario(tree: dict):
    trace = sim.generate(sim.scenario_from_dict(tree))
    return trace, run_pipeline(trace)


def position_errors(trace, result) -> np.ndarray:
    return np.linalg.norm(result.positions() - trace.truth_positions(), axis=1)


NOMINAL_NOISE = {
    "gyro_std": 1e-3,
    "encoder_std": 1e-3,
    "bias_walk_std": 1e-5,
    "pixel_std": 0.5,
}

# 200 m rounded-rectangle loop: 4 x (42.146 m straight + quarter arc of r=5)
LOOP_TREE = {
    "trajectory": {
        "segments": [
            {"kind": "line", "length": 42.146},
            {"kind": "arc", "radius": 5.0, "angle_deg": 90.0},
        ]
        * 4,
        "speed": 1.0,
    },
    "noise": NOMINAL_NOISE,
    "landmarks": {"count": 1500},
    "rates": {"camera_hz": 2},
    "bias": {"initial": [0.002, -0.001, 0.0015]},
}


def test_1_loop_ate_beats_dead_reckoning_over_ten_seeds():
    t0 = time.perf_counter()
    worst_pct, worst_ratio = 0.0, 0.0
    for seed in range(10):
        tree = dict(LOOP_TREE)
        tree["sim"] = {"seed": seed}
        trace, result = run_scenario(tree)
        truth = trace.truth_positions()
        slam = align_horn(result.positions(), truth)
        dr_pos = np.stack(
            [s.pose.position_in_world() for s in dead_reckoning(trace)]
        )
        dr = align_horn(dr_pos, truth)
        worst_pct = max(worst_pct, slam.percent_of_distance)
        worst_ratio = max(worst_ratio, slam.rmse / dr.rmse)
    elapsed = time.perf_counter() - t0
    ok = worst_pct <= 0.3 and worst_ratio < 1.0 and elapsed <= 60.0
    report(
        1,
        ok,
        f"worst ATE {worst_pct:.4f}% of 200 m (limit 0.3), worst SLAM/DR rmse "
        f"ratio {worst_ratio:.4f} (limit <1), 10 seeds in {elapsed:.1f} s (limit 60)",
    )


def test_2_bias_correction_is_second_order():
    rng = np.random.default_rng(7)
    ext = Extrinsics()
    noise = NoiseParams.from_scalars()
    b0 = np.array([0.002, -0.001, 0.0015])
    steps = [
        (
            rng.normal(scale=0.3, size=3) + b0,
            0.04 + rng.uniform(0.0, 0.02),
            0.04 + rng.uniform(0.0, 0.02),
            0.05,
        )
        for _ in range(60)
    ]
    preint = integrate_steps(steps, ext, noise, bias_ref=b0)
    directions = rng.normal(size=(5, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    magnitudes = np.array([1e-4, 1e-3, 1e-2])
    errs = []
    for mag in magnitudes:
        per_dir = []
        for d in directions:
            b_new = b0 + mag * d
            corr_R, corr_p = correct_for_bias(preint, b_new)
            brute = integrate_steps(steps, ext, noise, bias_ref=b_new)
            per_dir.append(
                max(
                    np.linalg.norm(log_so3(corr_R.T @ brute.delta_R)),
                    np.linalg.norm(corr_p - brute.delta_p),
                )
            )
        errs.append(np.mean(per_dir))
    errs = np.array(errs)
    slope, intercept = np.polyfit(np.log10(magnitudes), np.log10(errs), 1)
    c_fit = float(np.max(errs / magnitudes**2))
    ok = 1.8 <= slope <= 2.2
    report(
        2,
        ok,
        f"log-log slope {slope:.3f} (required 2.0 +/- 0.2), fitted "
        f"C {c_fit:.3f}, errors {errs[0]:.2e}/{errs[1]:.2e}/{errs[2]:.2e}",
    )


def test_3_covariance_matches_monte_carlo():
    t0 = time.perf_counter()
    ext = Extrinsics()
    noise = NoiseParams.from_scalars()
    trajectories = {
        "straight": [(np.zeros(3), 0.05, 0.05, 0.05)] * 50,
        "arc": [(np.array([0.0, 0.0, 0.2]), 0.045, 0.055, 0.05)] * 50,
        "spin": [(np.array([0.0, 0.0, 0.5]), -0.012, 0.012, 0.05)] * 50,
    }
    worst = 0.0
    for name, steps in trajectories.items():
        prop = np.diag(integrate_steps(steps, ext, noise).cov)
        mc = np.diag(
            monte_carlo_covariance(steps, ext, noise, trials=10000, seed=29)
        )
        rel = float(np.max(np.abs(mc - prop) / prop))
        worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.15 and elapsed <= 30.0
    report(
        3,
        ok,
        f"worst diagonal mismatch {worst:.3f} (limit 0.15) over "
        f"straight/arc/spin, 10000 trials each in {elapsed:.1f} s (limit 30)",
    )


def test_4_jacobians_match_finite_differences():
    checked = {}
    for name, maker in sorted(ALL_CONFIG_MAKERS.items()):
        rng = np.random.default_rng(11)
        for _ in range(100):
            factor, values = maker(rng)
            assert_jacobians_match(factor, values, rtol=1e-5)
        checked[name] = 100
    ok = len(checked) == 5 and all(n == 100 for n in checked.values())
    report(
        4,
        ok,
        "analytic vs central differences within 1e-5 relative on 100 "
        f"configurations each of {', '.join(checked)}",
    )


def test_5_slippage_detected_recovered_and_audited():
    slip_tree = {
        "trajectory": {"segments": [{"kind": "line", "length": 30.0}], "speed": 1.0},
        "noise": NOMINAL_NOISE,
        "landmarks": {"count": 800},
        "rates": {"camera_hz": 2},
        "sim": {"seed": 0},
        "faults": [
            {"kind": "wheel_slip", "t_start": 10.0, "t_end": 11.0, "slip_distance": 1.0}
        ],
    }
    trace, result = run_scenario(slip_tree)
    err = position_errors(trace, result)

    flagged = [r for r in result.results if r.slippage]
    fired_in_interval = bool(flagged) and all(
        10.0 <= r.timestamp <= 11.5 for r in flagged
    )
    recovery = [
        (i, r)
        for i, r in enumerate(result.results)
        if r.mode is TrackMode.SLIPPAGE_RECOVERY
    ]
    recovery_err = max(err[i] for i, _ in recovery) if recovery else np.inf

    clean_audit = True
    for store in result.segments:
        slip_kfs = {kid for kid, kf in store.keyframes.items() if kf.slippage}
        for a, b in store.odometer_factor_log:
            if a in slip_kfs or b in slip_kfs:
                clean_audit = False

    nominal_tree = {
        "trajectory": {"segments": [{"kind": "line", "length": 260.0}], "speed": 1.0},
        "noise": NOMINAL_NOISE,
        "landmarks": {"count": 2000},
        "rates": {"camera_hz": 2},
        "sim": {"seed": 1},
    }
    nom_trace, nom_result = run_scenario(nominal_tree)
    n_nominal = len(nom_trace.frame_times)
    false_positives = sum(1 for r in nom_result.results if r.slippage)

    ok = (
        fired_in_interval
        and recovery_err <= 0.02
        and clean_audit
        and n_nominal >= 500
        and false_positives == 0
    )
    report(
        5,
        ok,
        f"detector fired inside the fault interval ({len(flagged)} flagged "
        f"frames), recovered pose error {recovery_err:.4f} m (limit 0.02), "
        f"odometer-factor audit clean={clean_audit}, "
        f"{false_positives} false positives over {n_nominal} nominal frames",
    )


def test_6_visual_loss_reloc_and_new_map():
    # out-and-back with a 30 s blackout ending inside the mapped corridor
    reloc_tree = {
        "trajectory": {
            "segments": [
                {"kind": "line", "length": 40.0},
                {"kind": "arc", "radius": 4.0, "angle_deg": 180.0},
                {"kind": "line", "length": 40.0},
            ],
            "speed": 1.0,
        },
        "noise": dict(NOMINAL_NOISE, bias_walk_std=1e-4),
        "landmarks": {"count": 1200},
        "rates": {"camera_hz": 2},
        "sim": {"seed": 0},
        "faults": [{"kind": "blackout", "t_start": 45.0, "t_end": 75.0}],
    }
    trace, result = run_scenario(reloc_tree)
    err = position_errors(trace, result)

    continuous = len(result.results) == len(trace.frame_times) and bool(
        np.all(np.isfinite(result.positions()))
    )
    blackout_on_odometry = all(
        r.mode is TrackMode.ODOM_ONLY
        for k, r in enumerate(result.results)
        if trace.in_blackout(k)
    )
    reloc_idx = [
        i for i, r in enumerate(result.results) if r.mode is TrackMode.RELOC
    ]
    if reloc_idx:
        k = reloc_idx[0]
        e_before = err[k - 1]
        e_after = float(np.min(err[k : k + 3]))
        reduction = 1.0 - e_after / e_before
    else:
        e_before = e_after = reduction = np.nan

    # straight run whose blackout ends in territory the map has never seen
    novel_tree = {
        "trajectory": {
            "segments": [
                {"kind": "line", "length": 30.0},
                {"kind": "arc", "radius": 3.0, "angle_deg": 90.0},
                {"kind": "line", "length": 40.0},
            ],
            "speed": 1.0,
        },
        "noise": dict(NOMINAL_NOISE, bias_walk_std=1e-4),
        "landmarks": {"count": 1200},
        "rates": {"camera_hz": 2},
        "sim": {"seed": 0},
        "faults": [{"kind": "blackout", "t_start": 28.0, "t_end": 58.0}],
    }
    novel_trace, novel_result = run_scenario(novel_tree)
    new_map = any(
        r.mode is TrackMode.NEW_MAP_LOCAL for r in novel_result.results
    )
    two_segments = len(novel_result.segments) >= 2

    # each segment aligns rigidly onto ground truth: the pair can be stitched
    seg_rmse = []
    truth = novel_trace.truth_positions()
    for store in novel_result.segments:
        kf_pos = np.stack(
            [store.keyframes[k].state.pose.position_in_world() for k in store.kf_ids]
        )
        seg_rmse.append(align_horn(kf_pos, truth[store.kf_ids]).rmse)
    aligned_ok = bool(seg_rmse) and max(seg_rmse) <= 0.5

    ok = (
        continuous
        and blackout_on_odometry
        and bool(reloc_idx)
        and reduction >= 0.8
        and new_map
        and two_segments
        and aligned_ok
    )
    report(
        6,
        ok,
        f"continuous output={continuous}, blackout frames odometer-only="
        f"{blackout_on_odometry}, RELOC cut error {e_before:.3f} m -> "
        f"{e_after:.3f} m ({100 * reduction:.1f}% reduction, limit 80), "
        f"new local map={new_map}, segment alignment rmse "
        f"{', '.join(f'{r:.3f}' for r in seg_rmse)} m (limit 0.5)",
    )


def test_7_noise_free_closure():
    tree = {
        "trajectory": {"segments": [{"kind": "line", "length": 250.0}], "speed": 1.0},
        "noise": {
            "gyro_std": 0.0,
            "encoder_std": 0.0,
            "bias_walk_std": 0.0,
            "pixel_std": 0.0,
        },
        "landmarks": {"count": 2000},
        "rates": {"camera_hz": 4},
        "sim": {"seed": 0},
    }
    trace, result = run_scenario(tree)
    n = len(trace.frame_times)
    worst = float(np.max(position_errors(trace, result)))
    ok = n >= 1000 and worst <= 1e-6
    report(
        7,
        ok,
        f"max trajectory error {worst:.2e} m (limit 1e-6) over {n} frames "
        "with every noise source at zero",
    )


def test_8_estimator_chi2_and_gradient_consistency():
    opts = SolveOptions(
        step_tol=1e-12, rel_cost_tol=1e-14, max_iterations=30, kernel=None
    )
    ratios, grad_ok = [], True
    for seed in range(50):
        problem, dof, _, _ = three_frame_full_problem(seed)
        rep = solve(problem, opts)
        ratios.append(rep.final_cost / dof)
        g = gradient_infinity_norm(problem, kernel=None)
        grad_ok = grad_ok and g <= 1e-6 * (1.0 + rep.final_cost)
    lo, hi = min(ratios), max(ratios)
    ok = grad_ok and 0.5 <= lo and hi <= 2.0
    report(
        8,
        ok,
        f"chi2/dof in [{lo:.3f}, {hi:.3f}] over 50 seeded problems "
        f"(required [0.5, 2.0]), gradient criterion holds={grad_ok}",
    )


def test_9_initialized_map_recovers_metric_scale():
    cam = CameraModel(fx=300.0, fy=300.0, cx=320.0, cy=240.0, width=640, height=480)
    # side-looking camera: motion perpendicular to the optical axis gives
    # every landmark the same stereo-like parallax, so the mean depth
    # ratio measures the map scale rather than triangulation noise
    r_c_o = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    mount = np.array([0.1, 0.0, 0.3])
    ext = Extrinsics(R_C_O=r_c_o, p_C_O=-r_c_o @ mount)
    noise = NoiseParams.from_scalars()
    cfg = PipelineConfig()

    def depth_ratio(seed: int) -> float:
        rng = np.random.default_rng(seed)
        n_lm = 120
        pts = np.column_stack(
            [
                rng.uniform(-2.5, 3.5, n_lm),
                rng.uniform(4.0, 12.0, n_lm),
                rng.uniform(0.0, 2.0, n_lm),
            ]
        )
        state_a = FrameState(Pose.identity())
        pose_b = Pose(np.eye(3), np.array([-1.0, 0.0, 0.0]))

        true_steps = [(np.zeros(3), 0.05, 0.05, 0.05)] * 20
        noisy = [
            (
                omega + rng.multivariate_normal(np.zeros(3), noise.sigma_gyro),
                dl + rng.normal() * np.sqrt(noise.sigma_encoder),
                dr + rng.normal() * np.sqrt(noise.sigma_encoder),
                dt,
            )
            for omega, dl, dr, dt in true_steps
        ]
        preint = integrate_steps(noisy, ext, noise, bias_ref=np.zeros(3))

        pix_a, true_depth = project_many(pts, state_a.pose, ext, cam)
        pix_b, _ = project_many(pts, pose_b, ext, cam)
        pix_a = pix_a + rng.normal(scale=0.5, size=pix_a.shape)
        pix_b = pix_b + rng.normal(scale=0.5, size=pix_b.shape)
        ids = np.arange(n_lm)
        store = initialize_map(
            0, 0.0, state_a, Correspondences(ids=ids, pixels=pix_a),
            1, 1.0, Correspondences(ids=ids.copy(), pixels=pix_b),
            preint, ext, cam, noise, cfg,
        )
        lids = sorted(store.landmarks)
        est = np.stack([store.landmarks[lid] for lid in lids])
        _, est_depth = project_many(est, store.keyframes[0].state.pose, ext, cam)
        return float(np.mean(est_depth / true_depth[lids]))

    ratios = [depth_ratio(seed) for seed in range(5)]
    worst = max(abs(r - 1.0) for r in ratios)
    ok = worst <= 0.01
    report(
        9,
        ok,
        f"mean landmark depth ratio off truth by at most {100 * worst:.3f}% "
        "(limit 1%) across 5 nominal-noise initializations",
    )
