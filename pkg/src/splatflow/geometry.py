"""Rigid-transform and covariance math: quaternions, 3D covariance composition,
pinhole projection, and the EWA projection of a world covariance to screen space.

Conventions used throughout the package:

* quaternions are stored ``(qx, qy, qz, qw)``, identity is ``(0, 0, 0, 1)``;
* extrinsics are 4x4 world-to-camera rigid transforms, ``mu_cam = R @ mu + t``;
* intrinsics are ``(fx, fy, cx, cy)`` in pixels, camera looks down +z;
* all ops are vectorized over a leading batch axis and are pure functions.

Every differentiable op has a ``*_vjp`` companion returning input gradients
given output gradients; these are the building blocks of the analytic backward
pass and are each validated against finite differences in the test suite.
"""

import numpy as np

from .errors import BehindCameraError, ValidationError

Z_NEAR = 0.2
"""Near-plane cull distance in meters; closer Gaussians blow up the Jacobian."""

LOWPASS_FLOOR = 0.3
"""px^2 added to the projected covariance diagonal (anti-aliasing floor)."""


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def normalize_quat(q):
    """Return q / ||q||. Raises if any norm is ~0."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValidationError("cannot normalize a zero quaternion")
    return q / n


def normalize_quat_vjp(q, d_qhat):
    """Backward of normalize_quat: projects d_qhat onto the tangent space at qhat."""
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    qhat = q / n
    inner = np.sum(d_qhat * qhat, axis=-1, keepdims=True)
    return (d_qhat - inner * qhat) / n


def quat_to_rotmat(q):
    """Unit quaternion(s) (..., 4) -> rotation matrix (..., 3, 3).

    The input is normalized internally so the output is always orthonormal
    with determinant +1.
    """
    q = normalize_quat(q)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotmat_vjp_wrt_unit_quat(qhat, dR):
    """d(loss)/d(qhat) given d(loss)/dR, for the formula above at unit qhat."""
    x, y, z, w = qhat[..., 0], qhat[..., 1], qhat[..., 2], qhat[..., 3]
    g = dR  # (..., 3, 3)
    dx = (2 * y * (g[..., 0, 1] + g[..., 1, 0])
          + 2 * z * (g[..., 0, 2] + g[..., 2, 0])
          - 4 * x * (g[..., 1, 1] + g[..., 2, 2])
          - 2 * w * (g[..., 1, 2] - g[..., 2, 1]))
    dy = (2 * x * (g[..., 0, 1] + g[..., 1, 0])
          + 2 * z * (g[..., 1, 2] + g[..., 2, 1])
          - 4 * y * (g[..., 0, 0] + g[..., 2, 2])
          + 2 * w * (g[..., 0, 2] - g[..., 2, 0]))
    dz = (2 * x * (g[..., 0, 2] + g[..., 2, 0])
          + 2 * y * (g[..., 1, 2] + g[..., 2, 1])
          - 4 * z * (g[..., 0, 0] + g[..., 1, 1])
          - 2 * w * (g[..., 0, 1] - g[..., 1, 0]))
    dw = (2 * x * (g[..., 2, 1] - g[..., 1, 2])
          + 2 * y * (g[..., 0, 2] - g[..., 2, 0])
          + 2 * z * (g[..., 1, 0] - g[..., 0, 1]))
    return np.stack([dx, dy, dz, dw], axis=-1)


def quat_to_rotmat_vjp(q, dR):
    """Backward of quat_to_rotmat w.r.t. the *raw* (possibly unnormalized) q."""
    qhat = normalize_quat(q)
    d_qhat = _rotmat_vjp_wrt_unit_quat(qhat, dR)
    return normalize_quat_vjp(q, d_qhat)


def quat_multiply(a, b):
    """Hamilton product a (x) b with (x, y, z, w) layout; R(a (x) b) = R(a) R(b)."""
    ax, ay, az, aw = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bx, by, bz, bw = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ], axis=-1)


def quat_multiply_vjp(a, b, dq):
    """Backward of the Hamilton product: returns (da, db)."""
    dx, dy, dz, dw = dq[..., 0], dq[..., 1], dq[..., 2], dq[..., 3]
    ax, ay, az, aw = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bx, by, bz, bw = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    da = np.stack([
        bw * dx - bz * dy + by * dz - bx * dw,
        bz * dx + bw * dy - bx * dz - by * dw,
        -by * dx + bx * dy + bw * dz - bz * dw,
        bx * dx + by * dy + bz * dz + bw * dw,
    ], axis=-1)
    db = np.stack([
        aw * dx + az * dy - ay * dz - ax * dw,
        -az * dx + aw * dy + ax * dz - ay * dw,
        ay * dx - ax * dy + aw * dz - az * dw,
        ax * dx + ay * dy + az * dz + aw * dw,
    ], axis=-1)
    return da, db


def quat_conjugate(q):
    out = np.array(q, dtype=np.float64, copy=True)
    out[..., :3] *= -1.0
    return out


_AA_EPS = 1e-4  # below this angle the series expansions are exact to ~1e-17


def quat_from_axis_angle(w):
    """Axis-angle vector(s) (..., 3) -> unit quaternion, smooth at ||w|| = 0."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    t2 = theta * theta
    k = np.where(theta < _AA_EPS,
                 0.5 - t2 / 48.0 + t2 * t2 / 3840.0,
                 np.sin(0.5 * theta) / np.where(theta == 0.0, 1.0, theta))
    qw = np.cos(0.5 * theta)
    return np.concatenate([k[..., None] * w, qw[..., None]], axis=-1)


def quat_from_axis_angle_vjp(w, dq):
    """Backward of quat_from_axis_angle; series-matched so it is smooth at 0."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    t2 = theta * theta
    safe = np.where(theta == 0.0, 1.0, theta)
    k = np.where(theta < _AA_EPS,
                 0.5 - t2 / 48.0 + t2 * t2 / 3840.0,
                 np.sin(0.5 * theta) / safe)
    # g = (dk/dtheta)/theta, series: -1/24 + theta^2/960
    dk = np.where(theta < _AA_EPS,
                  -theta / 24.0 + t2 * theta / 960.0,
                  0.5 * np.cos(0.5 * theta) / safe - np.sin(0.5 * theta) / (safe * safe))
    g = np.where(theta < _AA_EPS, -1.0 / 24.0 + t2 / 960.0, dk / safe)
    dvec = dq[..., :3]
    dw_scalar = dq[..., 3]
    inner = np.sum(dvec * w, axis=-1)
    return (k[..., None] * dvec
            + (g * inner)[..., None] * w
            - 0.5 * (k * dw_scalar)[..., None] * w)


# ---------------------------------------------------------------------------
# covariances
# ---------------------------------------------------------------------------

def build_covariance(q, s):
    """Compose Sigma = R diag(s^2) R^T from rotation q and positive scales s."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValidationError("scales must be strictly positive")
    R = quat_to_rotmat(q)
    M = R * (s[..., None, :] ** 2)          # R @ diag(s^2)
    return M @ np.swapaxes(R, -1, -2)


def build_covariance_vjp(q, s, dSigma):
    """Backward of build_covariance; returns (dq, ds)."""
    s = np.asarray(s, dtype=np.float64)
    R = quat_to_rotmat(q)
    G = dSigma + np.swapaxes(dSigma, -1, -2)          # symmetrize upstream grad
    D = s ** 2
    dR = G @ (R * D[..., None, :])                    # (G + G^T) R diag(s^2)
    dq = quat_to_rotmat_vjp(q, dR)
    RtGR = np.swapaxes(R, -1, -2) @ (dSigma @ R)
    diag = np.diagonal(RtGR + np.swapaxes(RtGR, -1, -2), axis1=-2, axis2=-1)
    ds = s * diag
    return dq, ds


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def transform_points(E, pts):
    """Apply a 4x4 rigid transform to points (..., 3)."""
    E = np.asarray(E, dtype=np.float64)
    return pts @ E[:3, :3].T + E[:3, 3]


def camera_center(E):
    """World position of the camera given a world-to-camera extrinsic."""
    R, t = E[:3, :3], E[:3, 3]
    return -R.T @ t


def project_point(mu, extrinsic, intrinsics, strict=True):
    """Pinhole projection of world point(s) to pixels.

    Returns ``(uv, z)`` where ``u = fx*x/z + cx``, ``v = fy*y/z + cy`` and z is
    camera-frame depth. With ``strict=True`` raises BehindCameraError whenever
    any z <= Z_NEAR; with ``strict=False`` the caller is expected to cull.
    """
    fx, fy, cx, cy = intrinsics
    p = transform_points(extrinsic, np.asarray(mu, dtype=np.float64))
    z = p[..., 2]
    if strict and np.any(z <= Z_NEAR):
        raise BehindCameraError(f"point at z={np.min(z):.4f} m is behind the near plane")
    zsafe = np.where(z == 0.0, 1.0, z)
    uv = np.stack([fx * p[..., 0] / zsafe + cx, fy * p[..., 1] / zsafe + cy], axis=-1)
    return uv, z


def project_point_vjp(mu_cam, intrinsics, duv, dz):
    """Backward of (uv, z) w.r.t. the *camera-frame* point, given its value."""
    fx, fy, cx, cy = intrinsics
    x, y, z = mu_cam[..., 0], mu_cam[..., 1], mu_cam[..., 2]
    inv_z = 1.0 / z
    gx = duv[..., 0] * fx * inv_z
    gy = duv[..., 1] * fy * inv_z
    gz = (-duv[..., 0] * fx * x - duv[..., 1] * fy * y) * inv_z * inv_z + dz
    return np.stack([gx, gy, gz], axis=-1)


def perspective_jacobian(mu_cam, intrinsics):
    """EWA local affine approximation of the pinhole map at camera-frame centers.

    Rows are (fx/z, 0, -fx*x/z^2) and (0, fy/z, -fy*y/z^2); shape (..., 2, 3).
    """
    fx, fy, _, _ = intrinsics
    x, y, z = mu_cam[..., 0], mu_cam[..., 1], mu_cam[..., 2]
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    J = np.zeros(mu_cam.shape[:-1] + (2, 3), dtype=np.float64)
    J[..., 0, 0] = fx * inv_z
    J[..., 0, 2] = -fx * x * inv_z2
    J[..., 1, 1] = fy * inv_z
    J[..., 1, 2] = -fy * y * inv_z2
    return J


def project_covariance(cov3, mu_cam, extrinsic, intrinsics):
    """EWA projection Sigma' = J R_E Sigma R_E^T J^T + eps_lp*I (2x2, PSD).

    ``mu_cam`` must already be the camera-frame center with z > Z_NEAR; only
    the rotation block of the extrinsic affects the covariance.
    """
    z = np.asarray(mu_cam)[..., 2]
    if np.any(z <= Z_NEAR):
        raise BehindCameraError("cannot project covariance behind the near plane")
    J = perspective_jacobian(mu_cam, intrinsics)
    M = J @ np.asarray(extrinsic, dtype=np.float64)[:3, :3]
    cov2 = M @ cov3 @ np.swapaxes(M, -1, -2)
    cov2 = cov2 + LOWPASS_FLOOR * np.eye(2)
    return cov2


def project_covariance_vjp(cov3, mu_cam, extrinsic, intrinsics, dcov2):
    """Backward of project_covariance; returns (dcov3, dmu_cam)."""
    fx, fy, _, _ = intrinsics
    Rw = np.asarray(extrinsic, dtype=np.float64)[:3, :3]
    J = perspective_jacobian(mu_cam, intrinsics)
    M = J @ Rw
    dcov3 = np.swapaxes(M, -1, -2) @ dcov2 @ M
    G = dcov2 + np.swapaxes(dcov2, -1, -2)
    dM = G @ (M @ cov3)                               # (U + U^T) M Sigma, Sigma symmetric
    dJ = dM @ np.swapaxes(np.broadcast_to(Rw, dM.shape[:-2] + (3, 3)), -1, -2)
    x, y, z = mu_cam[..., 0], mu_cam[..., 1], mu_cam[..., 2]
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    inv_z3 = inv_z2 * inv_z
    dx = -fx * inv_z2 * dJ[..., 0, 2]
    dy = -fy * inv_z2 * dJ[..., 1, 2]
    dz = (-fx * inv_z2 * dJ[..., 0, 0] - fy * inv_z2 * dJ[..., 1, 1]
          + 2.0 * fx * x * inv_z3 * dJ[..., 0, 2] + 2.0 * fy * y * inv_z3 * dJ[..., 1, 2])
    return dcov3, np.stack([dx, dy, dz], axis=-1)


def invert_cov2(cov2):
    """Closed-form inverse of symmetric 2x2 matrices packed as (..., 2, 2)."""
    a = cov2[..., 0, 0]
    b = cov2[..., 0, 1]
    c = cov2[..., 1, 1]
    det = a * c - b * b
    inv = np.empty_like(cov2)
    inv[..., 0, 0] = c / det
    inv[..., 0, 1] = -b / det
    inv[..., 1, 0] = -b / det
    inv[..., 1, 1] = a / det
    return inv


def invert_cov2_vjp(cov2_inv, dinv):
    """Backward of matrix inverse: dA = -A^-T dInv A^-T evaluated with A^-1."""
    Q = cov2_inv
    return -np.swapaxes(Q, -1, -2) @ dinv @ np.swapaxes(Q, -1, -2)


def camera_rays(extrinsic, intrinsics, width, height):
    """Per-pixel unit ray directions in world coordinates, shape (H, W, 3).

    Pixel (i, j) is sampled at (u, v) = (j + 0.5, i + 0.5), matching the
    rasterizer's sample positions.
    """
    fx, fy, cx, cy = intrinsics
    j = np.arange(width, dtype=np.float64) + 0.5
    i = np.arange(height, dtype=np.float64) + 0.5
    u, v = np.meshgrid(j, i)
    d_cam = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1)
    R = np.asarray(extrinsic, dtype=np.float64)[:3, :3]
    d_world = d_cam @ R
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def look_at_extrinsic(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera transform for a camera at `eye` looking at `target`.

    Camera convention: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ValidationError("look direction is parallel to the up vector")
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ eye
    return E
