"""Trajectory alignment and error metrics.

Estimates are aligned to ground truth with Horn's closed-form solution
(rigid by default; similarity with `with_scale=True` for diagnostics,
since wheel odometry makes metric scale observable and the rigid fit is
the honest default).  Errors are reported as absolute trajectory error:
RMSE of position residuals after alignment, optionally as a percentage
of the traveled distance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Mapping, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .manifold import Pose


class DegenerateGeometry(Exception):
    """Point sets too thin to support the requested alignment."""


@dataclass
class AlignedResult:
    rotation: np.ndarray  # (3, 3), maps estimate positions into truth frame
    translation: np.ndarray  # (3,)
    scale: float  # 1.0 in rigid mode
    est_aligned: np.ndarray  # (N, 3)
    truth: np.ndarray  # (N, 3)
    errors: np.ndarray  # (N,) per-pose position error (m)
    rmse: float  # meters
    percent_of_distance: float  # 100 * rmse / truth path length


def _positions(seq) -> np.ndarray:
    """Accept (N, 3) arrays or sequences of Pose."""
    if len(seq) and isinstance(seq[0], Pose):
        return np.stack([p.position_in_world() for p in seq])
    return np.atleast_2d(np.asarray(seq, dtype=float))


def trajectory_length(positions: np.ndarray) -> float:
    positions = _positions(positions)
    if positions.shape[0] < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(positions, axis=0), axis=1)))


def align_horn(est, truth, with_scale: bool = False) -> AlignedResult:
    """Closed-form least-squares rigid (or similarity) alignment.

    Finds R, t (and optionally s) minimizing sum ||s R p_est + t -
    p_truth||^2 over all rigid transforms, via the SVD of the centered
    cross-covariance.
    """
    est_p = _positions(est)
    truth_p = _positions(truth)
    if est_p.shape != truth_p.shape or est_p.shape[0] < 3:
        raise ValueError("need two equally long position sequences of length >= 3")

    mu_e = est_p.mean(axis=0)
    mu_t = truth_p.mean(axis=0)
    ec = est_p - mu_e
    tc = truth_p - mu_t
    cross = tc.T @ ec / est_p.shape[0]
    u, sv, vt = np.linalg.svd(cross)
    d = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        d[2, 2] = -1.0
    rot = u @ d @ vt

    scale = 1.0
    if with_scale:
        var_e = float(np.mean(np.sum(ec**2, axis=1)))
        if var_e <= 0.0 or sv[1] <= 1e-12 * max(sv[0], 1e-300):
            raise DegenerateGeometry("point set too thin to estimate scale")
        scale = float(np.sum(sv * np.diag(d)) / var_e)
    trans = mu_t - scale * rot @ mu_e

    aligned = est_p @ (scale * rot).T + trans
    errors = np.linalg.norm(aligned - truth_p, axis=1)
    rmse = float(np.sqrt(np.mean(errors**2)))
    length = trajectory_length(truth_p)
    percent = 100.0 * rmse / length if length > 0.0 else float("inf")
    return AlignedResult(
        rotation=rot,
        translation=trans,
        scale=scale,
        est_aligned=aligned,
        truth=truth_p,
        errors=errors,
        rmse=rmse,
        percent_of_distance=percent,
    )


def ate_rmse(aligned: AlignedResult) -> float:
    """Root-mean-square position error of an aligned trajectory pair."""
    return aligned.rmse


def associate_nearest(
    times_est: np.ndarray, times_truth: np.ndarray, max_dt: float
) -> Tuple[np.ndarray, np.ndarray, int]:
    """Nearest-neighbor timestamp association within max_dt.

    Returns index arrays (into est and truth) for the matched pairs plus
    the number of estimate poses dropped for lack of a close neighbor.
    Each truth pose is used at most once (closest claimant wins).
    """
    times_est = np.asarray(times_est, dtype=float)
    times_truth = np.asarray(times_truth, dtype=float)
    right = np.searchsorted(times_truth, times_est)
    best = np.empty(times_est.size, dtype=int)
    gap = np.empty(times_est.size)
    for k, (t, r) in enumerate(zip(times_est, right)):
        cands = [c for c in (r - 1, r) if 0 <= c < times_truth.size]
        c = min(cands, key=lambda c: abs(times_truth[c] - t))
        best[k] = c
        gap[k] = abs(times_truth[c] - t)
    ok = gap <= max_dt
    # Deduplicate truth indices, keeping the estimate with the smallest gap.
    order = np.lexsort((gap, best))
    keep = np.zeros(times_est.size, dtype=bool)
    seen = -1
    for k in order:
        if ok[k] and best[k] != seen:
            keep[k] = True
            seen = best[k]
    idx_e = np.flatnonzero(keep)
    return idx_e, best[idx_e], int(times_est.size - idx_e.size)


def write_tum_trajectory(path: str, times: np.ndarray, poses: Sequence[Pose]) -> None:
    """One `t x y z qx qy qz qw` line per pose (body position in world)."""
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in zip(times, poses):
            p = pose.position_in_world()
            q = Rotation.from_matrix(pose.rot.T).as_quat()
            fh.write(
                f"{float(t):.9f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
            )


def read_tum_trajectory(path: str) -> Tuple[np.ndarray, List[Pose]]:
    times: List[float] = []
    poses: List[Pose] = []
    with open(path) as fh:
        for raw in fh:
            row = raw.strip()
            if not row or row.startswith("#"):
                continue
            vals = [float(v) for v in row.split()]
            if len(vals) != 8:
                raise ValueError(f"TUM line needs 8 fields, got {len(vals)} in {path}")
            times.append(vals[0])
            rot = Rotation.from_quat(vals[4:8]).as_matrix().T  # world-to-body
            poses.append(Pose(rot=rot, trans=-rot @ np.array(vals[1:4])))
    return np.array(times), poses


METRICS_FIELDS = ["scenario", "seed", "rmse_m", "percent_of_distance", "mean_error_m", "max_error_m"]


def metrics_row(scenario: str, seed, aligned: AlignedResult) -> dict:
    return {
        "scenario": scenario,
        "seed": seed,
        "rmse_m": f"{aligned.rmse:.6f}",
        "percent_of_distance": f"{aligned.percent_of_distance:.6f}",
        "mean_error_m": f"{float(np.mean(aligned.errors)):.6f}",
        "max_error_m": f"{float(np.max(aligned.errors)):.6f}",
    }


def write_metrics_csv(path: str, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_per_pose_errors(path: str, times: np.ndarray, errors: np.ndarray) -> None:
    """Plot-ready CSV of per-pose position errors."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "error_m"])
        for t, e in zip(times, errors):
            writer.writerow([f"{float(t):.9f}", f"{float(e):.9f}"])
