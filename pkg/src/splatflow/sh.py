"""Real spherical harmonics up to degree 3 for view-dependent Gaussian color.

16 coefficients per channel; colors are ``clamp(basis . coeffs + 0.5, min=0)``
so an all-zero coefficient block renders mid-gray.
"""

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

N_SH_COEFFS = 16


def sh_basis(dirs):
    """Evaluate the 16 degree-3 real SH basis functions at unit directions.

    dirs: (..., 3) unit vectors. Returns (..., 16).
    """
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    b = np.empty(dirs.shape[:-1] + (N_SH_COEFFS,), dtype=np.float64)
    b[..., 0] = SH_C0
    b[..., 1] = -SH_C1 * y
    b[..., 2] = SH_C1 * z
    b[..., 3] = -SH_C1 * x
    b[..., 4] = SH_C2[0] * xy
    b[..., 5] = SH_C2[1] * yz
    b[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    b[..., 7] = SH_C2[3] * xz
    b[..., 8] = SH_C2[4] * (xx - yy)
    b[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
    b[..., 10] = SH_C3[1] * xy * z
    b[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    b[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    b[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    b[..., 14] = SH_C3[5] * z * (xx - yy)
    b[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return b


def sh_basis_grad(dirs):
    """d(basis_k)/d(x, y, z) at unit directions; returns (..., 16, 3)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    g = np.zeros(dirs.shape[:-1] + (N_SH_COEFFS, 3), dtype=np.float64)
    zero = np.zeros_like(x)
    g[..., 1, 1] = -SH_C1
    g[..., 2, 2] = SH_C1
    g[..., 3, 0] = -SH_C1
    g[..., 4, 0] = SH_C2[0] * y
    g[..., 4, 1] = SH_C2[0] * x
    g[..., 5, 1] = SH_C2[1] * z
    g[..., 5, 2] = SH_C2[1] * y
    g[..., 6, 0] = SH_C2[2] * (-2.0 * x)
    g[..., 6, 1] = SH_C2[2] * (-2.0 * y)
    g[..., 6, 2] = SH_C2[2] * (4.0 * z)
    g[..., 7, 0] = SH_C2[3] * z
    g[..., 7, 2] = SH_C2[3] * x
    g[..., 8, 0] = SH_C2[4] * (2.0 * x)
    g[..., 8, 1] = SH_C2[4] * (-2.0 * y)
    g[..., 9, 0] = SH_C3[0] * 6.0 * xy
    g[..., 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
    g[..., 9, 2] = zero
    g[..., 10, 0] = SH_C3[1] * yz
    g[..., 10, 1] = SH_C3[1] * xz
    g[..., 10, 2] = SH_C3[1] * xy
    g[..., 11, 0] = SH_C3[2] * (-2.0 * xy)
    g[..., 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
    g[..., 11, 2] = SH_C3[2] * (8.0 * yz)
    g[..., 12, 0] = SH_C3[3] * (-6.0 * xz)
    g[..., 12, 1] = SH_C3[3] * (-6.0 * yz)
    g[..., 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    g[..., 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
    g[..., 13, 1] = SH_C3[4] * (-2.0 * xy)
    g[..., 13, 2] = SH_C3[4] * (8.0 * xz)
    g[..., 14, 0] = SH_C3[5] * (2.0 * xz)
    g[..., 14, 1] = SH_C3[5] * (-2.0 * yz)
    g[..., 14, 2] = SH_C3[5] * (xx - yy)
    g[..., 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
    g[..., 15, 1] = SH_C3[6] * (-6.0 * xy)
    g[..., 15, 2] = zero
    return g


def eval_sh_color(sh_coeffs, view_dir):
    """View-dependent RGB from SH coefficients.

    sh_coeffs: (..., 16, 3); view_dir: (..., 3) unit vectors.
    Returns colors (..., 3), offset by +0.5 and clamped to >= 0.
    """
    basis = sh_basis(view_dir)
    color = np.einsum("...k,...kc->...c", basis, sh_coeffs) + 0.5
    return np.maximum(color, 0.0)


def eval_sh_color_vjp(sh_coeffs, view_dir, dcolor):
    """Backward of eval_sh_color; returns (dcoeffs, ddir).

    The clamp at zero gates gradients exactly as the forward clamps values.
    """
    basis = sh_basis(view_dir)
    raw = np.einsum("...k,...kc->...c", basis, sh_coeffs) + 0.5
    gate = (raw > 0.0).astype(np.float64)
    dc = dcolor * gate
    dcoeffs = basis[..., :, None] * dc[..., None, :]
    # ddir_j = sum_k (sum_c dc_c coeff_kc) dbasis_k/dj
    per_k = np.einsum("...kc,...c->...k", sh_coeffs, dc)
    ddir = np.einsum("...k,...kj->...j", per_k, sh_basis_grad(view_dir))
    return dcoeffs, ddir


def rgb_to_dc(rgb):
    """DC coefficient reproducing a flat color under eval_sh_color."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def dc_to_rgb(dc):
    return np.asarray(dc, dtype=np.float64) * SH_C0 + 0.5
