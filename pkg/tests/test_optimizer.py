import numpy as np
import pytest

from odoslam.factors import (
    BiasWalkFactor,
    FrameState,
    Landmark,
    OdometerFactor,
    PlaneFactor,
    PriorFactor,
    PriorState,
    ReprojectionFactor,
)
from odoslam.manifold import Pose, exp_so3
from odoslam.optimizer import (
    NonFiniteResidual,
    Problem,
    SingularSystem,
    SolveOptions,
    SolveReport,
    gradient_infinity_norm,
    marginal_hessian,
    solve,
)
from odoslam.preintegration import integrate_steps, predict_pose
from odoslam.sensors import CameraModel, Extrinsics, NoiseParams, project

CAM = CameraModel(fx=300.0, fy=300.0, cx=320.0, cy=240.0, width=640, height=480)
# camera optical axis along the body forward (x) axis
R_C_O = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
EXT = Extrinsics(R_C_O=R_C_O)


def forward_motion_preint(n_steps=10, turn=0.05):
    noise = NoiseParams.from_scalars()
    steps = [(np.array([0.0, 0.0, turn]), 0.02, 0.022, 0.1) for _ in range(n_steps)]
    return integrate_steps(steps, Extrinsics(), noise)


def two_frame_problem(perturb=0.1, fix_first=True, seed=0):
    rng = np.random.default_rng(seed)
    p = forward_motion_preint()
    x0 = FrameState(Pose.identity(), np.zeros(3))
    rot1, trans1 = predict_pose(x0.pose.rot, x0.pose.trans, p.delta_R, p.delta_p)
    truth = FrameState(Pose(rot1, trans1), np.zeros(3))
    init = FrameState(
        Pose(rot1 @ exp_so3(rng.normal(size=3) * perturb), trans1 + rng.normal(size=3) * perturb),
        rng.normal(size=3) * 1e-3,
    )
    problem = Problem()
    problem.add_frame("f0", x0, fixed=fix_first)
    problem.add_frame("f1", init)
    problem.add_factor(OdometerFactor("f0", "f1", p))
    problem.add_factor(BiasWalkFactor("f0", "f1", np.eye(3) * 1e-8))
    return problem, truth


def test_zero_residual_problem_is_immediate():
    problem, truth = two_frame_problem(perturb=0.0)
    problem.values["f1"] = truth.copy()
    report = solve(problem)
    assert report.converged
    assert report.iterations <= 1
    assert report.final_cost <= 1e-16


def test_two_frame_recovery():
    problem, truth = two_frame_problem(perturb=0.1)
    report = solve(problem)
    assert report.converged, report.reason
    got = problem.value("f1")
    assert np.max(np.abs(got.pose.rot - truth.pose.rot)) < 1e-8
    assert np.max(np.abs(got.pose.trans - truth.pose.trans)) < 1e-8


def test_monotone_cost_and_report_shape():
    problem, _ = two_frame_problem(perturb=0.3)
    report = solve(problem)
    assert isinstance(report, SolveReport)
    assert report.final_cost <= report.initial_cost
    hist = report.cost_history
    assert all(hist[i + 1] <= hist[i] + 1e-12 for i in range(len(hist) - 1))


def test_quadratic_convergence_tail():
    problem, _ = two_frame_problem(perturb=0.2)
    report = solve(problem, SolveOptions(step_tol=1e-12, rel_cost_tol=0.0))
    assert report.converged
    hist = [c for c in report.cost_history if c > 0]
    if len(hist) >= 2 and hist[-2] > 1e-20:
        assert report.cost_history[-1] <= 1e-2 * hist[-2]


def test_singular_without_gauge():
    problem, _ = two_frame_problem(fix_first=False)
    with pytest.raises(SingularSystem):
        solve(problem)


def test_nonfinite_residual_raises():
    problem, _ = two_frame_problem()
    problem.value("f1").bias_g[0] = np.nan
    with pytest.raises(NonFiniteResidual):
        solve(problem)


def test_validate_rejects_unknown_keys_and_all_fixed():
    problem = Problem()
    problem.add_frame("a", FrameState(Pose.identity()), fixed=True)
    problem.add_factor(BiasWalkFactor("a", "missing", np.eye(3)))
    with pytest.raises(ValueError):
        problem.validate()
    problem2 = Problem()
    problem2.add_frame("a", FrameState(Pose.identity()), fixed=True)
    with pytest.raises(ValueError):
        problem2.validate()


def landmark_world_positions(rng, n):
    pts = np.empty((n, 3))
    pts[:, 0] = rng.uniform(3.0, 9.0, n)
    pts[:, 1] = rng.uniform(-3.0, 3.0, n)
    pts[:, 2] = rng.uniform(-1.0, 2.0, n)
    return pts


def three_frame_full_problem(seed, n_landmarks=20, pixel_std=0.5):
    """Three frames, landmarks, all five factor types, consistent noise."""
    rng = np.random.default_rng(seed)
    noise = NoiseParams.from_scalars(pixel_std=pixel_std)
    ext = EXT
    walk_cov = noise.sigma_bias_walk * 1.0  # 1 s between frames

    # ground truth: forward arc, exactly planar
    true_states = [FrameState(Pose.identity(), np.zeros(3))]
    preints = []
    step_seq = []
    for k in range(2):
        steps = [(np.array([0.0, 0.0, 0.08]) + np.array([0, 0, 1]) * rng.normal() * 0.0, 0.05, 0.052, 0.1) for _ in range(10)]
        step_seq.append(steps)
        prev = true_states[-1]
        clean = integrate_steps(steps, ext, NoiseParams.from_scalars())
        rot, trans = predict_pose(prev.pose.rot, prev.pose.trans, clean.delta_R, clean.delta_p)
        bias = prev.bias_g + rng.multivariate_normal(np.zeros(3), walk_cov)
        true_states.append(FrameState(Pose(rot, trans), bias))

    # noisy preintegrations using the frame-entry bias as reference
    for k, steps in enumerate(step_seq):
        noisy = [
            (
                omega + true_states[k].bias_g + rng.multivariate_normal(np.zeros(3), noise.sigma_gyro),
                dl + rng.normal() * np.sqrt(noise.sigma_encoder),
                dr + rng.normal() * np.sqrt(noise.sigma_encoder),
                dt,
            )
            for omega, dl, dr, dt in steps
        ]
        preints.append(integrate_steps(noisy, ext, noise, bias_ref=true_states[k].bias_g.copy()))

    pts = landmark_world_positions(rng, n_landmarks)
    problem = Problem()
    prior_cov = np.diag([1e-6] * 3 + [1e-4] * 3 + [1e-8] * 3)
    prior_noise = rng.multivariate_normal(np.zeros(9), prior_cov)
    x0 = true_states[0]
    prior = PriorState(
        R_tilde=x0.pose.rot @ exp_so3(-prior_noise[:3]),
        p_tilde=x0.pose.trans - x0.pose.rot @ prior_noise[3:6],
        b_tilde=x0.bias_g - prior_noise[6:9],
        cov=prior_cov,
    )

    for k, x in enumerate(true_states):
        init = FrameState(
            Pose(x.pose.rot @ exp_so3(rng.normal(size=3) * 2e-3), x.pose.trans + rng.normal(size=3) * 5e-3),
            x.bias_g + rng.normal(size=3) * 2e-5,
        )
        problem.add_frame(f"f{k}", init)
    problem.add_factor(PriorFactor("f0", prior))
    for k in range(2):
        problem.add_factor(OdometerFactor(f"f{k}", f"f{k+1}", preints[k]))
        problem.add_factor(BiasWalkFactor(f"f{k}", f"f{k+1}", walk_cov))
        problem.add_factor(PlaneFactor(f"f{k+1}", "f0", noise.sigma_plane))

    n_obs = 0
    for li, pt in enumerate(pts):
        problem.add_landmark(f"l{li}", Landmark(li, pt + rng.normal(size=3) * 0.02))
        for k, x in enumerate(true_states):
            z = project(pt, x.pose, ext, CAM)
            z_noisy = z + rng.multivariate_normal(np.zeros(2), noise.sigma_pixel)
            problem.add_factor(ReprojectionFactor(f"f{k}", f"l{li}", z_noisy, ext, CAM, noise.sigma_pixel))
            n_obs += 1
    dof = (9 + 12 + 6 + 6 + 2 * n_obs) - (9 * 3 + 3 * n_landmarks)
    return problem, dof, true_states, pts


def test_full_problem_chi2_consistency_small():
    # plain least-squares objective: chi^2 statistics and the gradient
    # criterion are both defined on the unweighted residuals
    opts = SolveOptions(step_tol=1e-12, rel_cost_tol=1e-14, max_iterations=30, kernel=None)
    ratios = []
    for seed in range(5):
        problem, dof, _, _ = three_frame_full_problem(seed)
        report = solve(problem, opts)
        assert report.final_cost <= report.initial_cost
        ratios.append(report.final_cost / dof)
        g = gradient_infinity_norm(problem, kernel=None)
        assert g <= 1e-6 * (1.0 + report.final_cost), f"gradient {g:.2e} too large"
    assert all(0.5 <= r <= 2.0 for r in ratios), ratios


def test_factor_order_permutation_invariance():
    results = []
    for order_seed in (0, 1, 2):
        problem, _, _, _ = three_frame_full_problem(seed=7)
        rng = np.random.default_rng(order_seed)
        if order_seed:
            rng.shuffle(problem.factors)
        solve(problem, SolveOptions(step_tol=1e-12, rel_cost_tol=1e-14, max_iterations=30))
        results.append(np.concatenate([problem.value(f"f{k}").pose.trans for k in range(3)]))
    assert np.max(np.abs(results[1] - results[0])) < 1e-9
    assert np.max(np.abs(results[2] - results[0])) < 1e-9


def test_fixed_equals_infinite_prior():
    problem_fixed, _ = two_frame_problem(perturb=0.1)
    solve(problem_fixed)

    problem_soft, _ = two_frame_problem(perturb=0.1)
    problem_soft.set_fixed("f0", False)
    x0 = problem_soft.value("f0")
    prior = PriorState(x0.pose.rot.copy(), x0.pose.trans.copy(), x0.bias_g.copy(), np.eye(9) * 1e-12)
    problem_soft.add_factor(PriorFactor("f0", prior))
    solve(problem_soft)

    a, b = problem_fixed.value("f1"), problem_soft.value("f1")
    assert np.max(np.abs(a.pose.rot - b.pose.rot)) < 1e-5
    assert np.max(np.abs(a.pose.trans - b.pose.trans)) < 1e-5


def test_gradient_small_at_optimum():
    problem, _ = two_frame_problem(perturb=0.2)
    report = solve(problem, SolveOptions(step_tol=1e-12))
    assert report.converged
    g = gradient_infinity_norm(problem)
    assert g <= 1e-6 * (1.0 + report.final_cost)


def test_behind_camera_factor_dropped_not_fatal():
    problem, truth = two_frame_problem(perturb=0.05)
    # a landmark behind the camera: its observation must be ignored
    problem.add_landmark("bad", Landmark(99, np.array([-5.0, 0.0, 0.0])), fixed=True)
    problem.add_factor(ReprojectionFactor("f1", "bad", np.array([320.0, 240.0]), EXT, CAM, np.eye(2) * 0.25))
    report = solve(problem)
    assert report.converged
    assert report.dropped_factors >= 1
    got = problem.value("f1")
    assert np.max(np.abs(got.pose.trans - truth.pose.trans)) < 1e-7


def test_debug_dump_written(tmp_path):
    path = str(tmp_path / "normal_eq.txt")
    problem, _ = two_frame_problem(perturb=0.1)
    solve(problem, SolveOptions(debug_dump_path=path))
    with open(path) as fh:
        text = fh.read()
    assert "# normal equations dump" in text
    assert "# H (9 x 9)" in text
    assert "# whitened residual vector" in text


# ---------------------------------------------------------------------------
# marginal Hessian


def test_marginal_single_variable_is_full_block():
    x = FrameState(Pose.identity(), np.zeros(3))
    prior = PriorState(np.eye(3), np.zeros(3), np.zeros(3), np.diag([1e-4] * 9))
    problem = Problem()
    problem.add_frame("x", x)
    f = PriorFactor("x", prior)
    problem.add_factor(f)
    solve(problem)
    marg = marginal_hessian(problem, "x")
    _, jacs = f.linearize(problem.values)
    jw = f.sqrt_info @ jacs["x"]
    assert np.allclose(marg, jw.T @ jw, rtol=1e-9, atol=1e-9)


def test_marginal_matches_dense_inverse():
    problem, _ = two_frame_problem(perturb=0.05, fix_first=False)
    x0 = problem.value("f0")
    prior = PriorState(x0.pose.rot.copy(), x0.pose.trans.copy(), x0.bias_g.copy(), np.eye(9) * 1e-6)
    problem.add_factor(PriorFactor("f0", prior))
    solve(problem, SolveOptions(step_tol=1e-12))

    # dense-oracle: assemble the full 18x18 whitened system by hand
    values = problem.values
    h = np.zeros((18, 18))
    offsets = {"f0": 0, "f1": 9}
    for f in problem.factors:
        _, jacs = f.linearize(values)
        for ka, ja in jacs.items():
            for kb, jb in jacs.items():
                wa = f.sqrt_info @ ja
                wb = f.sqrt_info @ jb
                h[offsets[ka] : offsets[ka] + 9, offsets[kb] : offsets[kb] + 9] += wa.T @ wb
    cov_f1_dense = np.linalg.inv(h)[9:, 9:]
    marg = marginal_hessian(problem, "f1")
    assert np.allclose(np.linalg.inv(marg), cov_f1_dense, rtol=1e-8, atol=1e-12)


def test_marginal_unaffected_by_unconnected_variable():
    problem, _ = two_frame_problem(perturb=0.05)
    solve(problem)
    before = marginal_hessian(problem, "f1")
    x2 = FrameState(Pose.identity(), np.zeros(3))
    problem.add_frame("f2", x2)
    problem.add_factor(PriorFactor("f2", PriorState(np.eye(3), np.zeros(3), np.zeros(3), np.eye(9) * 1e-4)))
    after = marginal_hessian(problem, "f1")
    assert np.allclose(before, after, rtol=1e-12, atol=1e-12)


def test_marginal_requires_free_frame():
    problem, _ = two_frame_problem()
    solve(problem)
    with pytest.raises(ValueError):
        marginal_hessian(problem, "f0")
