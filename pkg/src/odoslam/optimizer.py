"""On-manifold Gauss-Newton over a factor graph.

Variables are frame states (9-dof tangent) and landmarks (3-dof),
each free or fixed.  Reprojection factors are grouped by frame and
evaluated in batch; landmarks are eliminated from the normal equations
by their Schur complement, the reduced pose system is solved densely,
and landmark updates are back-substituted.  A step-halving backtrack
keeps the accepted robust cost monotone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .factors import (
    Factor,
    FrameState,
    Landmark,
    ReprojectionFactor,
    RobustKernel,
    huber_cost,
    huber_weight,
    reprojection_terms,
)
from .sensors import DEPTH_EPSILON

Key = Hashable


class SingularSystem(Exception):
    """Normal equations are rank deficient; fix the gauge or add a prior."""


class NonFiniteResidual(Exception):
    """A factor produced NaN or infinity at the current states."""


@dataclass
class SolveOptions:
    max_iterations: int = 20
    step_tol: float = 1e-8
    rel_cost_tol: float = 1e-9
    max_backtracks: int = 8
    kernel: Optional[RobustKernel] = field(default_factory=RobustKernel)
    debug_dump_path: Optional[str] = None


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    reason: str = ""
    cost_history: List[float] = field(default_factory=list)
    step_norms: List[float] = field(default_factory=list)
    updates: Dict[Key, np.ndarray] = field(default_factory=dict)
    dropped_factors: int = 0


class Problem:
    """Ordered variables (frames, landmarks), factors, and fixed flags."""

    def __init__(self):
        self._values: Dict[Key, object] = {}
        self._fixed: Dict[Key, bool] = {}
        self._kind: Dict[Key, str] = {}
        self.factors: List[Factor] = []
        self._group_cache = None  # factor grouping, rebuilt on any structure change

    def add_frame(self, key: Key, state: FrameState, fixed: bool = False) -> None:
        if key in self._values:
            raise ValueError(f"duplicate variable key {key!r}")
        self._values[key] = state
        self._fixed[key] = fixed
        self._kind[key] = "frame"

    def add_landmark(self, key: Key, lm: Landmark, fixed: bool = False) -> None:
        if key in self._values:
            raise ValueError(f"duplicate variable key {key!r}")
        self._values[key] = lm
        self._fixed[key] = fixed
        self._kind[key] = "landmark"

    def add_factor(self, factor: Factor) -> None:
        self.factors.append(factor)
        self._group_cache = None

    def value(self, key: Key):
        return self._values[key]

    @property
    def values(self) -> Dict[Key, object]:
        return self._values

    def is_fixed(self, key: Key) -> bool:
        return self._fixed[key]

    def set_fixed(self, key: Key, fixed: bool) -> None:
        self._fixed[key] = fixed
        self._group_cache = None

    def kind(self, key: Key) -> str:
        return self._kind[key]

    def free_keys(self, kind: str) -> List[Key]:
        return [k for k in self._values if self._kind[k] == kind and not self._fixed[k]]

    def validate(self) -> None:
        for f in self.factors:
            for k in f.keys:
                if k not in self._values:
                    raise ValueError(f"factor references unknown variable {k!r}")
        if not any(not fx for fx in self._fixed.values()):
            raise ValueError("problem has no free variable")


@dataclass
class _ReprojGroup:
    """All reprojection factors sharing one frame (and calibration)."""

    frame_key: Key
    frame_free: bool
    lm_keys: List[Key]
    lm_free: np.ndarray  # bool (N,)
    lm_slots: np.ndarray  # int (N,), -1 when fixed
    pixels: np.ndarray  # (N, 2)
    sqrt_infos: np.ndarray  # (N, 2, 2)
    ext: object
    cam: object
    base_pts: Optional[np.ndarray] = None  # stacked positions; free rows refreshed per eval
    slots_valid: bool = False


class _Linearization:
    def __init__(self):
        self.pose_index: Dict[Key, int] = {}
        self.lm_index: Dict[Key, int] = {}
        self.hpp: np.ndarray = np.zeros((0, 0))
        self.gp: np.ndarray = np.zeros(0)
        self.hll: np.ndarray = np.zeros((0, 3, 3))
        self.gl: np.ndarray = np.zeros((0, 3))
        self.w: np.ndarray = np.zeros((0, 0))
        self.cost: float = 0.0
        self.dropped: int = 0
        self.groups: List[_ReprojGroup] = []
        self.plain_factors: List[Factor] = []
        self.active_masks: List[np.ndarray] = []
        self.residual_chunks: List[np.ndarray] = []


def _build_groups(problem: Problem) -> Tuple[List[_ReprojGroup], List[Factor]]:
    if problem._group_cache is not None:
        return problem._group_cache
    grouped: Dict[Tuple, List[ReprojectionFactor]] = {}
    plain: List[Factor] = []
    for f in problem.factors:
        if isinstance(f, ReprojectionFactor):
            grouped.setdefault((f.keys[0], id(f.ext), id(f.cam)), []).append(f)
        else:
            plain.append(f)
    groups = []
    for (fkey, _, _), fs in grouped.items():
        lm_keys = [f.keys[1] for f in fs]
        groups.append(
            _ReprojGroup(
                frame_key=fkey,
                frame_free=not problem.is_fixed(fkey),
                lm_keys=lm_keys,
                lm_free=np.array([not problem.is_fixed(k) for k in lm_keys]),
                lm_slots=np.zeros(len(lm_keys), dtype=int),
                pixels=np.stack([f.pixel for f in fs]),
                sqrt_infos=np.stack([f.sqrt_info for f in fs]),
                ext=fs[0].ext,
                cam=fs[0].cam,
            )
        )
    problem._group_cache = (groups, plain)
    return groups, plain


def _gather_pts(group: _ReprojGroup, values: Dict[Key, object], lm_pos: Optional[np.ndarray]) -> np.ndarray:
    """Landmark positions for one group, refreshed from the packed free array."""
    if lm_pos is None and group.lm_free.any():
        return np.stack([values[k].position for k in group.lm_keys])
    if group.base_pts is None:
        group.base_pts = np.stack([values[k].position for k in group.lm_keys])
    if lm_pos is not None and group.lm_free.any():
        m = group.lm_free
        group.base_pts[m] = lm_pos[group.lm_slots[m]]
    return group.base_pts


def _group_eval(group: _ReprojGroup, values: Dict[Key, object], jacobians: bool = True, lm_pos: Optional[np.ndarray] = None):
    """Whitened residuals, Jacobians, depths for one frame's observations."""
    frame: FrameState = values[group.frame_key]
    pts = _gather_pts(group, values, lm_pos)
    r, j_pose, j_point, depth = reprojection_terms(
        frame.pose.rot, frame.pose.trans, pts, group.pixels, group.ext, group.cam, jacobians
    )
    rw = np.matmul(group.sqrt_infos, r[:, :, None])[:, :, 0]
    if not jacobians:
        return rw, None, None, depth
    jpw = np.matmul(group.sqrt_infos, j_pose)
    jlw = np.matmul(group.sqrt_infos, j_point)
    return rw, jpw, jlw, depth


def _linearize(problem: Problem, kernel: Optional[RobustKernel]) -> _Linearization:
    lin = _Linearization()
    groups, plain = _build_groups(problem)
    lin.groups = groups
    lin.plain_factors = plain
    values = problem.values

    free_frames = problem.free_keys("frame")
    free_lms = problem.free_keys("landmark")
    lin.pose_index = {k: i for i, k in enumerate(free_frames)}
    lin.lm_index = {k: i for i, k in enumerate(free_lms)}
    np_, nl = len(free_frames), len(free_lms)
    lin.hpp = np.zeros((9 * np_, 9 * np_))
    lin.gp = np.zeros(9 * np_)
    lin.hll = np.zeros((nl, 3, 3))
    lin.gl = np.zeros((nl, 3))
    lin.w = np.zeros((9 * np_, 3 * nl))
    w_view = lin.w.reshape(9 * np_, nl, 3) if np_ and nl else None
    lm_pos = np.stack([values[k].position for k in free_lms]) if free_lms else None

    for g in groups:
        if not g.slots_valid:
            g.lm_slots = np.array([lin.lm_index.get(k, -1) for k in g.lm_keys])
            g.slots_valid = True
        rw, jpw, jlw, depth = _group_eval(g, values, lm_pos=lm_pos)
        if not np.all(np.isfinite(rw)):
            raise NonFiniteResidual(f"reprojection residuals at frame {g.frame_key!r}")
        active = depth > DEPTH_EPSILON
        lin.dropped += int(np.sum(~active))
        lin.active_masks.append(active)
        s = np.sum(rw * rw, axis=1)
        if kernel is not None:
            weights = np.where(
                np.sqrt(np.maximum(s, 0.0)) <= kernel.huber_delta,
                1.0,
                kernel.huber_delta / np.sqrt(np.maximum(s, 1e-300)),
            )
            costs = np.where(
                s <= kernel.huber_delta**2,
                s,
                2.0 * kernel.huber_delta * np.sqrt(np.maximum(s, 0.0)) - kernel.huber_delta**2,
            )
        else:
            weights = np.ones_like(s)
            costs = s
        weights = np.where(active, weights, 0.0)
        lin.cost += float(np.sum(costs[active]))
        lin.residual_chunks.append((rw * np.sqrt(weights)[:, None])[active])

        jpw_w = jpw * weights[:, None, None]
        if g.frame_free:
            p = lin.pose_index[g.frame_key]
            sl = slice(9 * p, 9 * p + 9)
            lin.hpp[sl, sl] += np.tensordot(jpw_w, jpw, axes=([0, 1], [0, 1]))
            lin.gp[sl] += np.tensordot(jpw_w, rw, axes=([0, 1], [0, 1]))
        sel = g.lm_free & active
        if np.any(sel):
            slots = g.lm_slots[sel]
            jlw_sel = jlw[sel]
            jlw_w = jlw_sel * weights[sel, None, None]
            blocks_h = np.matmul(jlw_w.transpose(0, 2, 1), jlw_sel)
            np.add.at(lin.hll, slots, blocks_h)
            blocks_g = np.matmul(jlw_w.transpose(0, 2, 1), rw[sel][:, :, None])[:, :, 0]
            np.add.at(lin.gl, slots, blocks_g)
            if g.frame_free:
                p = lin.pose_index[g.frame_key]
                blocks_w = np.matmul(jpw_w[sel].transpose(0, 2, 1), jlw_sel)
                np.add.at(w_view[9 * p : 9 * p + 9], (slice(None), slots), blocks_w.transpose(1, 0, 2))

    for f in plain:
        r, jacs = f.linearize(values)
        if not np.all(np.isfinite(r)):
            raise NonFiniteResidual(f"{type(f).__name__} residual is not finite")
        rw = f.sqrt_info @ r
        lin.cost += float(rw @ rw)
        lin.residual_chunks.append(rw[None, :])
        for key, jac in jacs.items():
            if problem.is_fixed(key):
                continue
            jw = f.sqrt_info @ jac
            p = lin.pose_index[key]
            sl = slice(9 * p, 9 * p + 9)
            lin.gp[sl] += jw.T @ rw
            for key2, jac2 in jacs.items():
                if problem.is_fixed(key2):
                    continue
                q = lin.pose_index[key2]
                lin.hpp[sl, slice(9 * q, 9 * q + 9)] += jw.T @ (f.sqrt_info @ jac2)
    return lin


def _evaluate_cost(
    problem: Problem, lin: _Linearization, kernel: Optional[RobustKernel], lm_pos: Optional[np.ndarray] = None
) -> float:
    """Robust cost at the current values over the linearization's active set.

    A reprojection observation that was active at linearization but has
    moved behind the camera makes the trial infinitely bad.
    """
    values = problem.values
    cost = 0.0
    for g, active in zip(lin.groups, lin.active_masks):
        rw, _, _, depth = _group_eval(g, values, jacobians=False, lm_pos=lm_pos)
        if np.any(active & (depth <= DEPTH_EPSILON)):
            return np.inf
        ra = rw[active]
        s = np.sum(ra * ra, axis=1)
        if kernel is not None:
            d = kernel.huber_delta
            cost += float(np.sum(np.where(s <= d * d, s, 2.0 * d * np.sqrt(np.maximum(s, 0.0)) - d * d)))
        else:
            cost += float(np.sum(s))
    for f in lin.plain_factors:
        rw = f.sqrt_info @ f.residual(values)
        if not np.all(np.isfinite(rw)):
            return np.inf
        cost += float(rw @ rw)
    return cost


def _solve_normal_equations(lin: _Linearization) -> Tuple[np.ndarray, np.ndarray]:
    """Schur-eliminate landmarks, solve poses, back-substitute landmarks."""
    np9 = lin.gp.shape[0]
    nl = lin.hll.shape[0]
    if nl:
        try:
            hll_inv = np.linalg.inv(lin.hll)
        except np.linalg.LinAlgError as e:
            dets = np.linalg.det(lin.hll)
            bad = [k for k, i in lin.lm_index.items() if abs(dets[i]) < 1e-300]
            raise SingularSystem(f"underconstrained landmarks {bad[:5]}") from e
        if not np.all(np.isfinite(hll_inv)):
            raise SingularSystem("landmark Hessian block inversion overflowed")
    else:
        hll_inv = np.zeros((0, 3, 3))

    if np9:
        if nl:
            w_view = lin.w.reshape(np9, nl, 3)
            y = np.matmul(w_view.transpose(1, 0, 2), hll_inv).transpose(1, 0, 2)
            y_flat = np.ascontiguousarray(y.reshape(np9, nl * 3))
            s = lin.hpp - y_flat @ lin.w.T
            rhs = -lin.gp + y_flat @ lin.gl.ravel()
        else:
            s = lin.hpp
            rhs = -lin.gp
        s = (s + s.T) / 2.0
        try:
            cho = cho_factor(s, lower=True, check_finite=False)
        except LinAlgError as e:
            raise SingularSystem(f"pose system not positive definite: {e}") from e
        pivots = np.abs(np.diag(cho[0]))
        if pivots.size and (pivots.min() / pivots.max()) ** 2 < 1e-14:
            raise SingularSystem("pose system is rank deficient (gauge not fixed?)")
        dp = cho_solve(cho, rhs, check_finite=False)
    else:
        dp = np.zeros(0)

    if nl:
        wt_dp = (dp @ lin.w).reshape(nl, 3) if np9 else np.zeros((nl, 3))
        dl = np.matmul(hll_inv, (-lin.gl - wt_dp)[:, :, None])[:, :, 0]
    else:
        dl = np.zeros((0, 3))
    return dp, dl


def _apply_pose_step(problem: Problem, lin: _Linearization, snapshot: Dict[Key, FrameState], dp: np.ndarray, alpha: float) -> None:
    for key, idx in lin.pose_index.items():
        problem.values[key] = snapshot[key].retract(alpha * dp[9 * idx : 9 * idx + 9])


def _dump_normal_equations(path: str, lin: _Linearization, iteration: int) -> None:
    np9 = lin.gp.shape[0]
    nl = lin.hll.shape[0]
    dim = np9 + 3 * nl
    h = np.zeros((dim, dim))
    g = np.zeros(dim)
    h[:np9, :np9] = lin.hpp
    g[:np9] = lin.gp
    for i in range(nl):
        sl = slice(np9 + 3 * i, np9 + 3 * i + 3)
        h[sl, sl] = lin.hll[i]
        g[sl] = lin.gl[i]
    if np9 and nl:
        h[:np9, np9:] = lin.w
        h[np9:, :np9] = lin.w.T
    resid = np.concatenate([c.ravel() for c in lin.residual_chunks]) if lin.residual_chunks else np.zeros(0)
    with open(path, "w") as fh:
        fh.write(f"# normal equations dump, iteration {iteration}, cost {lin.cost:.12e}\n")
        fh.write("# variable order: " + " ".join(f"{k!r}:9" for k in lin.pose_index) + " | " + " ".join(f"{k!r}:3" for k in lin.lm_index) + "\n")
        fh.write(f"# H ({dim} x {dim})\n")
        np.savetxt(fh, h)
        fh.write(f"# g = J^T Sigma^-1 r ({dim})\n")
        np.savetxt(fh, g)
        fh.write(f"# whitened residual vector ({resid.shape[0]})\n")
        np.savetxt(fh, resid)


def solve(problem: Problem, opts: Optional[SolveOptions] = None) -> SolveReport:
    """Iterate linearize / solve / retract until convergence.

    Mutates the problem's variable states in place and returns a report.
    The accepted cost sequence is non-increasing; if no improving step
    exists the report says so instead of accepting a worse state.
    """
    opts = opts or SolveOptions()
    problem.validate()
    report = SolveReport()
    lin = None

    for it in range(opts.max_iterations):
        lin = _linearize(problem, opts.kernel)
        if it == 0:
            report.initial_cost = lin.cost
            report.cost_history.append(lin.cost)
        report.iterations = it + 1

        dp, dl = _solve_normal_equations(lin)
        step_inf = max(
            np.max(np.abs(dp)) if dp.size else 0.0,
            np.max(np.abs(dl)) if dl.size else 0.0,
        )
        report.step_norms.append(step_inf)
        if step_inf < opts.step_tol:
            report.converged = True
            report.reason = "step_tol"
            report.final_cost = lin.cost
            break

        snapshot = {k: problem.values[k].copy() for k in lin.pose_index}
        base_lm = np.stack([problem.values[k].position for k in lin.lm_index]) if lin.lm_index else None
        cost_prev = lin.cost
        predicted = -(float(lin.gp @ dp) + float(np.sum(lin.gl * dl)))
        alpha = 1.0
        accepted = False
        lm_trial = None
        for _ in range(opts.max_backtracks + 1):
            _apply_pose_step(problem, lin, snapshot, dp, alpha)
            lm_trial = base_lm + alpha * dl if base_lm is not None else None
            cost_new = _evaluate_cost(problem, lin, opts.kernel, lm_trial)
            if cost_new <= cost_prev + 1e-12 * (1.0 + abs(cost_prev)):
                accepted = True
                break
            alpha /= 2.0
        if not accepted:
            for key in snapshot:
                problem.values[key] = snapshot[key]
            # a step whose whole predicted decrease sits at the cost's
            # floating-point noise floor is a numerical optimum, not a
            # line-search failure
            report.converged = predicted <= 1e-10 * (1.0 + abs(cost_prev))
            report.reason = "cost_plateau" if report.converged else "line_search_failed"
            report.final_cost = cost_prev
            break
        for key, idx in lin.lm_index.items():
            problem.values[key] = Landmark(problem.values[key].id, lm_trial[idx].copy())

        for key, idx in lin.pose_index.items():
            step9 = alpha * dp[9 * idx : 9 * idx + 9]
            report.updates[key] = report.updates.get(key, np.zeros(9)) + step9
        for key, idx in lin.lm_index.items():
            step3 = alpha * dl[idx]
            report.updates[key] = report.updates.get(key, np.zeros(3)) + step3

        report.cost_history.append(cost_new)
        report.final_cost = cost_new
        if alpha * step_inf < opts.step_tol:
            report.converged = True
            report.reason = "step_tol"
            break
        if cost_prev > 0 and (cost_prev - cost_new) < opts.rel_cost_tol * cost_prev:
            report.converged = True
            report.reason = "cost_tol"
            break
    else:
        report.reason = "max_iterations"
        if report.cost_history:
            report.final_cost = report.cost_history[-1]

    report.dropped_factors = lin.dropped if lin is not None else 0
    if opts.debug_dump_path and lin is not None:
        final = _linearize(problem, opts.kernel)
        _dump_normal_equations(opts.debug_dump_path, final, report.iterations)
    return report


def gradient_infinity_norm(problem: Problem, kernel: Optional[RobustKernel] = None) -> float:
    """Max-abs entry of the (robust) cost gradient at the current states."""
    lin = _linearize(problem, kernel)
    out = 0.0
    if lin.gp.size:
        out = max(out, float(np.max(np.abs(lin.gp))))
    if lin.gl.size:
        out = max(out, float(np.max(np.abs(lin.gl))))
    return out


def marginal_hessian(problem: Problem, key: Key, kernel: Optional[RobustKernel] = None) -> np.ndarray:
    """Information on one variable after eliminating all other free ones.

    Landmarks are Schur-eliminated first, then the remaining free frames
    other than `key`; the result is the marginal information block whose
    inverse is the variable's covariance under the current linearization.
    """
    if problem.is_fixed(key):
        raise ValueError(f"variable {key!r} is fixed; no marginal exists")
    if problem.kind(key) == "landmark":
        raise ValueError("marginal_hessian is defined for frame variables")
    lin = _linearize(problem, kernel if kernel is not None else RobustKernel())

    np9 = lin.gp.shape[0]
    nl = lin.hll.shape[0]
    if nl:
        try:
            hll_inv = np.linalg.inv(lin.hll)
        except np.linalg.LinAlgError as e:
            raise SingularSystem(f"underconstrained landmark block: {e}") from e
        w_view = lin.w.reshape(np9, nl, 3)
        y = np.einsum("plk,lkm->plm", w_view, hll_inv)
        s = lin.hpp - np.einsum("plk,qlk->pq", y, w_view)
    else:
        s = lin.hpp.copy()
    s = (s + s.T) / 2.0

    idx = lin.pose_index[key]
    own = np.arange(9 * idx, 9 * idx + 9)
    others = np.array([i for i in range(np9) if i < 9 * idx or i >= 9 * idx + 9], dtype=int)
    s_aa = s[np.ix_(own, own)]
    if others.size == 0:
        return s_aa
    s_ab = s[np.ix_(own, others)]
    s_bb = s[np.ix_(others, others)]
    try:
        cho = cho_factor(s_bb, lower=True, check_finite=False)
    except LinAlgError as e:
        raise SingularSystem(f"cannot marginalize: remaining system singular: {e}") from e
    marg = s_aa - s_ab @ cho_solve(cho, s_ab.T, check_finite=False)
    return (marg + marg.T) / 2.0
