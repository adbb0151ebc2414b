"""Wheel + gyro preintegration between two frames.

A PreintegratedOdometer accumulates the relative rotation and body-frame
translation implied by a stream of (gyro rate, wheel distances) steps,
together with a 6x6 covariance over the (rotation, position) tangent
error and the Jacobians of both quantities with respect to the gyro
bias, so the constraint can be re-targeted to a new bias estimate
without re-integration.

Error convention: the noisy accumulation relates to the noise-free one
by delta_R_noisy = delta_R_true @ Exp(dphi) and delta_p_noisy =
delta_p_true + dp, and cov is over (dphi, dp) in that order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np

from .manifold import exp_so3, exp_so3_many, hat, log_so3, project_to_rotation, right_jacobian, rotation_defect
from .sensors import Extrinsics, NoiseParams

PSI_EPSILON = 1e-8  # variance floor on the structurally-zero y/z displacement axes


class NonPositiveDt(Exception):
    """Integration step received dt <= 0."""


@dataclass(frozen=True)
class PreintegratedOdometer:
    delta_R: np.ndarray  # accumulated relative rotation
    delta_p: np.ndarray  # accumulated translation in the start frame (m)
    cov: np.ndarray  # 6x6 over (dphi, dp)
    dR_dbg: np.ndarray  # d(delta_R tangent)/d(gyro bias)
    dp_dbg: np.ndarray  # d(delta_p)/d(gyro bias)
    bias_ref: np.ndarray  # gyro bias the stream was integrated with
    dt_total: float
    count: int

    @staticmethod
    def empty(bias_ref: np.ndarray | None = None) -> "PreintegratedOdometer":
        return PreintegratedOdometer(
            delta_R=np.eye(3),
            delta_p=np.zeros(3),
            cov=np.zeros((6, 6)),
            dR_dbg=np.zeros((3, 3)),
            dp_dbg=np.zeros((3, 3)),
            bias_ref=np.zeros(3) if bias_ref is None else np.asarray(bias_ref, dtype=float).copy(),
            dt_total=0.0,
            count=0,
        )


def step_noise_cov(noise: NoiseParams) -> np.ndarray:
    """Per-step noise covariance: block diag of gyro rate and displacement.

    Both wheels carry independent noise of variance sigma_encoder, so
    their mean has variance sigma_encoder / 2 on the forward axis; the
    lateral/vertical axes get a tiny floor to keep the block invertible.
    """
    out = np.zeros((6, 6))
    out[:3, :3] = noise.sigma_gyro
    out[3, 3] = noise.sigma_encoder / 2.0
    out[4, 4] = PSI_EPSILON
    out[5, 5] = PSI_EPSILON
    return out


def integrate_step(
    acc: PreintegratedOdometer,
    omega: np.ndarray,
    dl: float,
    dr: float,
    dt: float,
    ext: Extrinsics,
    noise: NoiseParams,
) -> PreintegratedOdometer:
    """Append one wheel interval (with its effective gyro rate) to acc."""
    if dt <= 0.0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    omega = np.asarray(omega, dtype=float)
    psi = np.array([(dl + dr) / 2.0, 0.0, 0.0])

    phi = ext.R_O_B @ (omega - acc.bias_ref) * dt
    dR_step = exp_so3(phi)
    jr = right_jacobian(phi)

    # Position first: it uses the rotation accumulated before this step.
    delta_p = acc.delta_p + acc.delta_R @ psi
    delta_R = acc.delta_R @ dR_step
    if rotation_defect(delta_R) > 1e-9:
        delta_R = project_to_rotation(delta_R)

    # Error-state transition and noise injection for (dphi, dp).
    a = np.eye(6)
    a[:3, :3] = dR_step.T
    a[3:, :3] = -acc.delta_R @ hat(psi)
    b = np.zeros((6, 6))
    b[:3, :3] = jr @ ext.R_O_B * dt
    b[3:, 3:] = acc.delta_R
    cov = a @ acc.cov @ a.T + b @ step_noise_cov(noise) @ b.T
    cov = (cov + cov.T) / 2.0

    # Bias Jacobians: position term consumes the pre-step rotation
    # Jacobian, then the rotation Jacobian absorbs this step.
    dp_dbg = acc.dp_dbg - acc.delta_R @ hat(psi) @ acc.dR_dbg
    dR_dbg = dR_step.T @ acc.dR_dbg - jr @ ext.R_O_B * dt

    return replace(
        acc,
        delta_R=delta_R,
        delta_p=delta_p,
        cov=cov,
        dR_dbg=dR_dbg,
        dp_dbg=dp_dbg,
        dt_total=acc.dt_total + dt,
        count=acc.count + 1,
    )


def integrate_steps(
    steps: Sequence[Tuple[np.ndarray, float, float, float]],
    ext: Extrinsics,
    noise: NoiseParams,
    bias_ref: np.ndarray | None = None,
) -> PreintegratedOdometer:
    """Integrate a whole (omega, dl, dr, dt) sequence from scratch."""
    acc = PreintegratedOdometer.empty(bias_ref)
    for omega, dl, dr, dt in steps:
        acc = integrate_step(acc, omega, dl, dr, dt, ext, noise)
    return acc


def correct_for_bias(p: PreintegratedOdometer, b_new: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """First-order re-targeting of (delta_R, delta_p) to a new gyro bias."""
    db = np.asarray(b_new, dtype=float) - p.bias_ref
    delta_R = p.delta_R @ exp_so3(p.dR_dbg @ db)
    delta_p = p.delta_p + p.dp_dbg @ db
    return delta_R, delta_p


def predict_pose(
    rot_i: np.ndarray, trans_i: np.ndarray, delta_R: np.ndarray, delta_p: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Propagate a world-to-body pose through a preintegrated increment.

    With poses storing f_body = R f_world + p, the increment satisfies
    delta_R = R_i R_j^T and delta_p = p_i - delta_R p_j, which inverts to
    the expressions below.
    """
    rot_j = delta_R.T @ rot_i
    trans_j = delta_R.T @ (trans_i - delta_p)
    return rot_j, trans_j


def monte_carlo_covariance(
    steps: Sequence[Tuple[np.ndarray, float, float, float]],
    ext: Extrinsics,
    noise: NoiseParams,
    trials: int,
    bias_ref: np.ndarray | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Sample covariance of the preintegration error, for validating cov.

    Runs `trials` noisy re-integrations of the given noise-free step
    sequence (vectorised across trials) and returns the 6x6 sample
    covariance of (Log(delta_R_true^T delta_R_noisy), delta_p_true -
    delta_p_noisy).
    """
    if trials < 1000:
        raise ValueError("trials must be >= 1000 for a stable estimate")
    bias = np.zeros(3) if bias_ref is None else np.asarray(bias_ref, dtype=float)
    truth = integrate_steps(steps, ext, noise, bias)

    rng = np.random.default_rng(seed)
    n_steps = len(steps)
    omegas = np.stack([np.asarray(s[0], dtype=float) for s in steps])
    psis = np.array([[(s[1] + s[2]) / 2.0, 0.0, 0.0] for s in steps])
    dts = np.array([s[3] for s in steps])

    chol_g = np.linalg.cholesky(noise.sigma_gyro + 1e-30 * np.eye(3))
    enc_std = np.sqrt(noise.sigma_encoder)
    floor_std = np.sqrt(PSI_EPSILON)

    rots = np.tile(np.eye(3), (trials, 1, 1))
    ps = np.zeros((trials, 3))
    for k in range(n_steps):
        eta_g = rng.standard_normal((trials, 3)) @ chol_g.T
        eta_l = rng.standard_normal(trials) * enc_std
        eta_r = rng.standard_normal(trials) * enc_std
        # same per-step model the propagation assumes, floor included
        psi_noisy = rng.standard_normal((trials, 3)) * floor_std
        psi_noisy[:, 0] = psis[k, 0] + (eta_l + eta_r) / 2.0
        phi = ((omegas[k] - bias) + eta_g) @ ext.R_O_B.T * dts[k]
        ps = ps + np.einsum("nij,nj->ni", rots, psi_noisy)
        rots = np.einsum("nij,njk->nik", rots, exp_so3_many(phi))

    dphi = np.empty((trials, 3))
    rel = np.einsum("ij,njk->nik", truth.delta_R.T, rots)
    for n in range(trials):
        dphi[n] = log_so3(rel[n])
    dp = truth.delta_p[None, :] - ps
    err = np.hstack([dphi, dp])
    err -= err.mean(axis=0)
    return err.T @ err / (trials - 1)
