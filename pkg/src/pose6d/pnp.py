"""Pose from 2D-3D control point correspondences.

A linear DLT estimate on normalized image coordinates seeds a damped
Gauss-Newton (Levenberg-Marquardt) refinement of the pixel reprojection
residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose

MIN_POINTS = 6
MAX_ITERATIONS = 50
STEP_TOL = 1e-12
REDUCTION_TOL = 1e-14
INITIAL_DAMPING = 1e-3
MAX_DAMPING = 1e16


class DegenerateConfigurationError(ValueError):
    def __init__(self, msg="degenerate configuration"):
        super().__init__(msg)


@dataclass(frozen=True)
class Correspondences:
    points2d: np.ndarray
    points3d: np.ndarray

    def __post_init__(self):
        p2 = np.array(self.points2d, dtype=np.float64)
        p3 = np.array(self.points3d, dtype=np.float64)
        if p2.ndim != 2 or p2.shape[1] != 2 or p3.ndim != 2 or p3.shape[1] != 3:
            raise ValueError("points2d must be (n, 2) and points3d (n, 3)")
        if len(p2) != len(p3):
            raise ValueError("points2d and points3d differ in length")
        if len(p2) < MIN_POINTS:
            raise ValueError(f"need at least {MIN_POINTS} correspondences, got {len(p2)}")
        if not (np.all(np.isfinite(p2)) and np.all(np.isfinite(p3))):
            raise ValueError("correspondences must be finite")
        sv = np.linalg.svd(p3 - p3.mean(axis=0), compute_uv=False)
        if sv[-1] <= 1e-9 * sv[0]:
            raise DegenerateConfigurationError(
                "degenerate configuration: 3D points do not span three dimensions"
            )
        object.__setattr__(self, "points2d", p2)
        object.__setattr__(self, "points3d", p3)

    @property
    def n(self) -> int:
        return len(self.points2d)


@dataclass(frozen=True)
class PnPResult:
    pose: Pose
    reprojection_rms: float
    iterations: int
    converged: bool


def _rotation_step(w) -> np.ndarray:
    theta = np.sqrt(w @ w)
    W = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * (W @ W)
    return np.eye(3) + (np.sin(theta) / theta) * W + ((1.0 - np.cos(theta)) / theta**2) * (W @ W)


def _residuals(R, t, corr: Correspondences, K: CameraIntrinsics):
    cam = corr.points3d @ R.T + t
    z = cam[:, 2]
    if np.any(z <= 0):
        return None, cam
    r = np.empty_like(corr.points2d)
    r[:, 0] = K.fx * cam[:, 0] / z + K.cx
    r[:, 1] = K.fy * cam[:, 1] / z + K.cy
    r -= corr.points2d
    return r.ravel(), cam


def _jacobian(R, cam, corr: Correspondences, K: CameraIntrinsics) -> np.ndarray:
    # parameters: left-multiplied rotation increment w, then translation
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    n = len(z)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = K.fx / z
    dproj[:, 0, 2] = -K.fx * x / z**2
    dproj[:, 1, 1] = K.fy / z
    dproj[:, 1, 2] = -K.fy * y / z**2
    a, b, c = (corr.points3d @ R.T).T
    dcam = np.zeros((n, 3, 6))
    # -[Rp]_x, the derivative of exp(w) R p at w = 0
    dcam[:, 0, 1], dcam[:, 0, 2] = c, -b
    dcam[:, 1, 0], dcam[:, 1, 2] = -c, a
    dcam[:, 2, 0], dcam[:, 2, 1] = b, -a
    dcam[:, :, 3:] = np.eye(3)
    return np.einsum("nij,njk->nik", dproj, dcam).reshape(2 * n, 6)


def rms(r: np.ndarray) -> float:
    """RMS of per-point pixel distances for a stacked residual vector."""
    return float(np.sqrt(np.mean((r.reshape(-1, 2) ** 2).sum(axis=1))))


def reprojection_rms(pose: Pose, corr: Correspondences, K: CameraIntrinsics) -> float:
    r, _ = _residuals(pose.rotation, pose.translation, corr, K)
    if r is None:
        return float("inf")
    return rms(r)


def pnp_dlt(corr: Correspondences, K: CameraIntrinsics) -> Pose:
    """Linear pose estimate from the 2n x 12 homogeneous projection system."""
    X = corr.points3d
    mu = X.mean(axis=0)
    scale = np.sqrt(np.mean(np.sum((X - mu) ** 2, axis=1)))
    Xn = (X - mu) / scale
    xn = (corr.points2d - [K.cx, K.cy]) / [K.fx, K.fy]

    n = corr.n
    Xh = np.hstack([Xn, np.ones((n, 1))])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:] * Xh
    _, sv, Vt = np.linalg.svd(A)
    if sv[-2] <= 1e-8 * sv[0]:
        raise DegenerateConfigurationError()
    Pn = Vt[-1].reshape(3, 4)
    # undo the 3D normalization: Pn @ [(X - mu)/s; 1] == P @ [X; 1]
    P = np.hstack([Pn[:, :3] / scale, (Pn[:, 3] - Pn[:, :3] @ mu / scale)[:, None]])

    depths = X @ P[2, :3] + P[2, 3]
    if np.count_nonzero(depths > 0) * 2 < n:
        P = -P
    M = P[:, :3]
    U, S, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    lam = S.mean()
    t = P[:, 3] / lam
    return Pose(R, t)


def pnp_refine(initial: Pose, corr: Correspondences, K: CameraIntrinsics) -> PnPResult:
    """Levenberg-Marquardt over a rotation increment and translation.

    Steps that raise the residual or put a point behind the camera are
    rejected, so the returned RMS never exceeds the initial one.
    """
    R, t = initial.rotation.copy(), initial.translation.copy()
    r, cam = _residuals(R, t, corr, K)
    if r is None:
        raise ValueError("initial pose puts a point behind the camera")
    cost = float(r @ r)
    damping = INITIAL_DAMPING
    iterations = 0
    stopped = cost == 0.0
    J = _jacobian(R, cam, corr, K)

    while not stopped and iterations < MAX_ITERATIONS:
        g = J.T @ r
        H = J.T @ J
        Hdiag = np.diag(H) + 1e-12
        idx = np.diag_indices(6)
        while True:
            A = H.copy()
            A[idx] += damping * Hdiag
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and (
                np.sqrt(step @ step) < STEP_TOL
                # the linearized model promises no relative reduction either
                or -(g @ step) - 0.5 * step @ H @ step < REDUCTION_TOL * cost
            ):
                stopped = True
                break
            if step is not None:
                R_new = _rotation_step(step[:3]) @ R
                t_new = t + step[3:]
                r_new, cam_new = _residuals(R_new, t_new, corr, K)
                if r_new is not None:
                    cost_new = float(r_new @ r_new)
                    if cost_new < cost:
                        break
            damping *= 10.0
            if damping > MAX_DAMPING:
                stopped = True
                break
        if stopped:
            break
        iterations += 1
        damping = max(damping * 0.1, 1e-15)
        reduction = cost - cost_new
        R, t, r, cam, cost = R_new, t_new, r_new, cam_new, cost_new
        J = _jacobian(R, cam, corr, K)
        if reduction < REDUCTION_TOL * (cost + reduction) or cost == 0.0:
            stopped = True

    grad_norm = float(np.linalg.norm(J.T @ r))
    gtol = 1e-6 * max(1.0, float(np.linalg.norm(J) * np.sqrt(cost)))
    converged = bool(stopped and grad_norm <= gtol)
    # remove the rounding drift accumulated over the multiplicative updates
    U, _, Vt = np.linalg.svd(R)
    return PnPResult(Pose(U @ Vt, t), rms(r), iterations, converged)


def solve_pnp(corr: Correspondences, K: CameraIntrinsics) -> PnPResult:
    initial = pnp_dlt(corr, K)
    cam_z = corr.points3d @ initial.rotation[2] + initial.translation[2]
    if np.any(cam_z <= 0):
        # linear estimate too poor for the refiner's depth precondition;
        # push the object forward along the optical axis
        shift = 1e-3 - cam_z.min()
        initial = Pose(initial.rotation, initial.translation + [0.0, 0.0, shift])
    return pnp_refine(initial, corr, K)
