"""Relative pose verification under the cylindrical image model.

Poses map points from a source sensor frame into a target sensor frame:
``p_target = R @ p_source + t``. Reprojection uses the same continuous
azimuth/elevation map as :func:`lidarplace.projection.project`, so a pixel
``(c, r)`` covers ``[c, c+1) x [r, r+1)``.

Refinement is Gauss-Newton on a left-multiplied se(3) increment
``T <- [Exp(w) | tau] T`` with an IRLS Huber kernel; when a step raises the
robust cost, diagonal damping is added until it does not.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit
from scipy.spatial.transform import Rotation

HUBER_PX = 2.0


@dataclass(frozen=True)
class Pose:
    """Rigid transform stored as unit quaternion (x, y, z, w) plus translation in meters."""

    quaternion: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {np.linalg.norm(q)!r} is not 1")
        if not np.isfinite(t).all():
            raise ValueError("translation must be finite")
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_quaternion(cls, q, t, tol=1e-9):
        q = np.asarray(q, dtype=np.float64)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > tol:
            raise ValueError(f"quaternion norm {n!r} differs from 1 by more than {tol}")
        return cls(q / n, t)

    @classmethod
    def from_matrix(cls, R, t):
        q = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
        return cls(q / np.linalg.norm(q), t)

    @classmethod
    def from_rotvec(cls, rotvec, t):
        return cls.from_matrix(Rotation.from_rotvec(rotvec).as_matrix(), t)

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.quaternion).as_matrix()

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def inverse(self):
        R = self.rotation
        return Pose.from_matrix(R.T, -R.T @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        R1, R2 = self.rotation, other.rotation
        return Pose.from_matrix(R1 @ R2, R1 @ other.translation + self.translation)

    def rotation_angle(self) -> float:
        """Angle of the rotation part in radians, in [0, pi]."""
        return float(Rotation.from_quat(self.quaternion).magnitude())


@dataclass(frozen=True)
class CylindricalModel:
    W: int = 1024
    H: int = 128
    vfov: float = 45.0


@dataclass
class PnpResult:
    pose: Pose
    inliers: np.ndarray
    mean_error: float


# -- numba kernels -----------------------------------------------------------

@njit(cache=True)
def _uv(p, W, H, vfov):
    x, y, z = p[0], p[1], p[2]
    rho = math.sqrt(x * x + y * y)
    u = W * (math.atan2(y, x) + math.pi) / (2.0 * math.pi)
    u = u % W
    elev = math.degrees(math.atan2(z, rho))
    v = H * (0.5 * vfov - elev) / vfov
    return u, v


@njit(cache=True)
def _wrap(du, W):
    half = 0.5 * W
    du = (du + half) % W - half
    return du


@njit(cache=True)
def _residuals_jacobian(R, t, P, uv, W, H, vfov, want_jac):
    """Wrapped residuals (n, 2) and d(residual)/d(w, tau) (n, 2, 6) for T = [R | t]."""
    n = P.shape[0]
    res = np.empty((n, 2))
    jac = np.zeros((n, 2, 6))
    ku = W / (2.0 * math.pi)
    kv = -H / vfov * 180.0 / math.pi
    for k in range(n):
        q = R @ P[k] + t
        x, y, z = q[0], q[1], q[2]
        u, v = _uv(q, W, H, vfov)
        res[k, 0] = _wrap(u - uv[k, 0], W)
        res[k, 1] = v - uv[k, 1]
        if want_jac:
            r2 = x * x + y * y
            rho = math.sqrt(r2)
            d2 = r2 + z * z
            # d(u, v)/d(q)
            du = np.array([-ku * y / r2, ku * x / r2, 0.0])
            dv = np.array([kv * (-z * x / (rho * d2)), kv * (-z * y / (rho * d2)), kv * rho / d2])
            # dq/dw = -[q]x, dq/dtau = I
            for row in range(2):
                g = du if row == 0 else dv
                jac[k, row, 0] = -g[1] * z + g[2] * y
                jac[k, row, 1] = g[0] * z - g[2] * x
                jac[k, row, 2] = -g[0] * y + g[1] * x
                jac[k, row, 3] = g[0]
                jac[k, row, 4] = g[1]
                jac[k, row, 5] = g[2]
    return res, jac


@njit(cache=True)
def _robust_cost(res, delta):
    c = 0.0
    d2 = delta * delta
    for k in range(res.shape[0]):
        s = res[k, 0] ** 2 + res[k, 1] ** 2
        if s <= d2:
            c += s
        else:
            c += 2.0 * delta * math.sqrt(s) - d2
    return c


@njit(cache=True)
def _exp_so3(w):
    th = math.sqrt(w[0] ** 2 + w[1] ** 2 + w[2] ** 2)
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if th < 1e-12:
        return np.eye(3) + K
    a = math.sin(th) / th
    b = (1.0 - math.cos(th)) / (th * th)
    return np.eye(3) + a * K + b * (K @ K)


@njit(cache=True)
def _refine_kernel(R, t, P, uv, W, H, vfov, iters, delta):
    """Returns (R, t, cost, status); status 1 when the cost became non-finite."""
    res, jac = _residuals_jacobian(R, t, P, uv, W, H, vfov, True)
    cost = _robust_cost(res, delta)
    if not math.isfinite(cost):
        return R, t, cost, 1
    lam = 0.0
    n = P.shape[0]
    for _ in range(iters):
        A = np.zeros((6, 6))
        g = np.zeros(6)
        for k in range(n):
            r = math.sqrt(res[k, 0] ** 2 + res[k, 1] ** 2)
            wk = 1.0 if r <= delta else delta / r
            for row in range(2):
                Jr = jac[k, row]
                A += wk * np.outer(Jr, Jr)
                g += wk * Jr * res[k, row]
        accepted = False
        step_norm = 0.0
        for _attempt in range(12):
            M = A.copy()
            for d in range(6):
                M[d, d] += lam
            try:
                step = -np.linalg.solve(M, g)
            except Exception:
                step = np.zeros(6)
            step_norm = math.sqrt(np.sum(step * step))
            if not math.isfinite(step_norm):
                lam = max(lam * 10.0, 1e-6)
                continue
            dR = _exp_so3(step[:3])
            R_new = dR @ R
            t_new = dR @ t + step[3:]
            res_new, jac_new = _residuals_jacobian(R_new, t_new, P, uv, W, H, vfov, True)
            c_new = _robust_cost(res_new, delta)
            if math.isfinite(c_new) and c_new <= cost:
                R, t, res, jac, cost = R_new, t_new, res_new, jac_new, c_new
                lam = lam / 10.0 if lam > 1e-9 else 0.0
                accepted = True
                break
            lam = max(lam * 10.0, 1e-6 * (np.trace(A) / 6.0 + 1e-12))
        if not accepted or step_norm < 1e-8:
            break
    return R, t, cost, 0


@njit(cache=True)
def _kabsch_kernel(P, Q):
    """Least-squares R, t with Q ~ R P + t. status 1 on (near) collinear input."""
    n = P.shape[0]
    cp = np.zeros(3)
    cq = np.zeros(3)
    for k in range(n):
        cp += P[k]
        cq += Q[k]
    cp /= n
    cq /= n
    A = P - cp
    B = Q - cq
    sp = np.linalg.svd(A)[1]
    scale = sp[0] if sp[0] > 0 else 1.0
    if n < 3 or sp[1] <= 1e-9 * scale + 1e-12:
        return np.eye(3), np.zeros(3), 1
    C = A.T @ B
    U, S, Vt = np.linalg.svd(C)
    d = np.linalg.det(Vt.T @ U.T)
    D = np.eye(3)
    if d < 0:
        D[2, 2] = -1.0
    R = Vt.T @ D @ U.T
    t = cq - R @ cp
    return R, t, 0


@njit(cache=True)
def _errors(R, t, P, uv, W, H, vfov):
    res, _ = _residuals_jacobian(R, t, P, uv, W, H, vfov, False)
    out = np.empty(P.shape[0])
    for k in range(P.shape[0]):
        out[k] = math.sqrt(res[k, 0] ** 2 + res[k, 1] ** 2)
    return out


# -- public API --------------------------------------------------------------

def reproject(model: CylindricalModel, pose: Pose, p) -> tuple:
    """Continuous pixel (u, v) of point ``p`` after transforming it by ``pose``."""
    q = pose.apply(np.asarray(p, dtype=np.float64))
    if not np.any(q[:2] != 0.0):
        raise ValueError("transformed point lies on the sensor axis; projection undefined")
    return _uv(q, float(model.W), float(model.H), float(model.vfov))


def reproject_many(model: CylindricalModel, pose: Pose, points) -> np.ndarray:
    q = pose.apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    u = model.W * (np.arctan2(q[:, 1], q[:, 0]) + np.pi) / (2 * np.pi) % model.W
    elev = np.degrees(np.arctan2(q[:, 2], np.hypot(q[:, 0], q[:, 1])))
    v = model.H * (0.5 * model.vfov - elev) / model.vfov
    return np.stack([u, v], axis=1)


def residuals(model: CylindricalModel, pose: Pose, points, uv, jacobian=False):
    """Azimuth-wrapped reprojection residuals, optionally with the (n, 2, 6) Jacobian
    with respect to a left increment ``(w, tau)``."""
    P = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    UV = np.ascontiguousarray(uv, dtype=np.float64).reshape(-1, 2)
    res, jac = _residuals_jacobian(pose.rotation, pose.translation, P, UV,
                                   float(model.W), float(model.H), float(model.vfov), jacobian)
    return (res, jac) if jacobian else res


def robust_cost(model, pose, points, uv, delta=HUBER_PX) -> float:
    return float(_robust_cost(residuals(model, pose, points, uv), delta))


def kabsch_init(src, dst) -> Pose:
    """Rigid transform mapping ``src`` points onto ``dst`` in the least-squares sense."""
    P = np.ascontiguousarray(src, dtype=np.float64).reshape(-1, 3)
    Q = np.ascontiguousarray(dst, dtype=np.float64).reshape(-1, 3)
    if P.shape != Q.shape:
        raise ValueError("src and dst must have the same shape")
    if len(P) < 3:
        raise ValueError(f"need at least 3 correspondences, got {len(P)}")
    R, t, status = _kabsch_kernel(P, Q)
    if status:
        raise ValueError("degenerate (collinear) correspondences")
    return Pose.from_matrix(R, t)


def refine(model: CylindricalModel, points, uv, init: Pose, iters: int = 10,
           delta: float = HUBER_PX) -> Pose:
    """Minimize the Huber-weighted reprojection error of ``points`` against ``uv``."""
    P = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    UV = np.ascontiguousarray(uv, dtype=np.float64).reshape(-1, 2)
    if len(P) < 4:
        raise ValueError(f"refine needs at least 4 correspondences, got {len(P)}")
    R, t, cost, status = _refine_kernel(init.rotation, init.translation, P, UV, float(model.W),
                                        float(model.H), float(model.vfov), iters, delta)
    if status:
        raise ValueError("non-finite reprojection cost (a point crosses the sensor origin)")
    return Pose.from_matrix(R, t)


def ransac_consensus(model: CylindricalModel, pts_i, uv_j, pts_j, inlier_px=5.0,
                     max_iters=200, seed=0, confidence=0.99) -> Optional[PnpResult]:
    """Best RANSAC consensus without the inlier-count gate (None if no hypothesis)."""
    P = np.ascontiguousarray(pts_i, dtype=np.float64).reshape(-1, 3)
    UV = np.ascontiguousarray(uv_j, dtype=np.float64).reshape(-1, 2)
    Q = np.ascontiguousarray(pts_j, dtype=np.float64).reshape(-1, 3)
    n = len(P)
    if n < 4:
        raise ValueError(f"PnP RANSAC needs at least 4 matches, got {n}")
    W, H, vf = float(model.W), float(model.H), float(model.vfov)
    rng = np.random.default_rng(seed)
    best_count, best_R, best_t = -1, None, None
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n, 4, replace=False)
        R, t, status = _kabsch_kernel(P[idx], Q[idx])
        if status:
            continue
        R, t, cost, status = _refine_kernel(R, t, P[idx], UV[idx], W, H, vf, 10, HUBER_PX)
        if status:
            continue
        count = int(np.count_nonzero(_errors(R, t, P, UV, W, H, vf) < inlier_px))
        if count > best_count:
            best_count, best_R, best_t = count, R, t
            ratio = count / n
            if ratio >= 1.0:
                needed = 0
            elif ratio > 0:
                needed = math.ceil(math.log(1 - confidence) / math.log(1 - ratio ** 4))
    if best_R is None:
        return None
    R, t = best_R, best_t
    inl = np.flatnonzero(_errors(R, t, P, UV, W, H, vf) < inlier_px)
    for _ in range(3):
        if len(inl) < 4:
            break
        R2, t2, _, status = _refine_kernel(R, t, P[inl], UV[inl], W, H, vf, 10, HUBER_PX)
        if status:
            break
        inl2 = np.flatnonzero(_errors(R2, t2, P, UV, W, H, vf) < inlier_px)
        if len(inl2) < len(inl):
            break
        R, t, same, inl = R2, t2, np.array_equal(inl2, inl), inl2
        if same:
            break
    err = _errors(R, t, P, UV, W, H, vf)
    mean_err = float(err[inl].mean()) if len(inl) else float("nan")
    return PnpResult(Pose.from_matrix(R, t), inl, mean_err)


def pnp_ransac(model: CylindricalModel, pts_i, uv_j, pts_j, n_p=15, inlier_px=5.0,
               max_iters=200, seed=0) -> Optional[PnpResult]:
    """Verify a candidate: returns the consensus only if it has more than ``n_p`` inliers.

    ``pts_i`` are 3D points of the query features, ``uv_j`` the level-0 keypoint
    positions of their matches in the candidate image and ``pts_j`` the candidate's
    3D points (used to seed hypotheses by 3D-3D alignment).
    """
    result = ransac_consensus(model, pts_i, uv_j, pts_j, inlier_px, max_iters, seed)
    if result is None or len(result.inliers) <= n_p:
        return None
    return result
