"""Forward rendering of Gaussian sets to color/depth/flow/opacity buffers.

Two paths with identical semantics:

* ``render_naive`` -- reference implementation, every primitive evaluated at
  every pixel, used as the oracle;
* ``render_tiled`` -- tile-binned numba path used for training and anything
  large.

Primitives are depth-sorted once (stable), then alpha-blended front to back
per pixel. ``project_gaussians`` turns world-space Gaussians into screen-space
primitives (EWA projection + SH color + optional per-Gaussian flow) and keeps
the intermediates its backward needs.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels, geometry, sh
from .errors import ValidationError
from .geometry import LOWPASS_FLOOR, Z_NEAR

ALPHA_CLAMP = _kernels.ALPHA_CLAMP
ALPHA_SKIP = _kernels.ALPHA_SKIP
T_TERMINATE = _kernels.T_TERMINATE

# 0.99 * exp(-r^2/2) < 1/255 outside this many Mahalanobis units, so the tile
# bound covers every contribution the skip threshold lets through
_CUTOFF_SIGMA = float(np.sqrt(2.0 * np.log(255.0)))  # ~3.33
_RADIUS_MARGIN = 1.0  # px, covers the half-pixel sample offset


@dataclass
class SplatPrimitives:
    """Screen-space splats for one view (struct-of-arrays over N primitives).

    conic is the inverse 2D covariance packed (a, b, c) for [[a, b], [b, c]].
    flow is per-Gaussian 2D image flow in pixels (zeros when not rendered).
    """
    center: np.ndarray    # (N, 2) px
    conic: np.ndarray     # (N, 3)
    depth: np.ndarray     # (N,) m
    opacity: np.ndarray   # (N,) in [0, 1]
    color: np.ndarray     # (N, 3)
    flow: np.ndarray      # (N, 2) px
    radius: np.ndarray    # (N,) conservative px extent

    def __post_init__(self):
        if np.any(self.opacity < 0) or np.any(self.opacity > 1):
            raise ValidationError("splat opacity must lie in [0, 1]")
        a, b, c = self.conic[:, 0], self.conic[:, 1], self.conic[:, 2]
        if np.any(a * c - b * b <= 0) or np.any(a <= 0):
            raise ValidationError("splat conic must be symmetric positive definite")

    @property
    def count(self):
        return self.center.shape[0]


@dataclass
class RenderOutput:
    color: np.ndarray        # (H, W, 3) in [0, 1]
    depth: np.ndarray        # (H, W) m (blended, unnormalized)
    flow: np.ndarray         # (H, W, 2) px
    opacity: np.ndarray      # (H, W) in [0, 1]
    transmittance: np.ndarray  # (H, W), equals 1 - opacity up to blending fp
    last_contrib: np.ndarray | None = None  # per-pixel backward bookkeeping


def conic_radius(conic):
    """Conservative pixel radius covering every alpha >= 1/255 contribution."""
    a, b, c = conic[:, 0], conic[:, 1], conic[:, 2]
    det = a * c - b * b
    # eigenvalues of the *covariance* = eigenvalues of conic^{-1}
    mid = 0.5 * (a + c) / det
    disc = np.sqrt(np.maximum(mid * mid - 1.0 / det, 0.0))
    lam_max = mid + disc
    return _CUTOFF_SIGMA * np.sqrt(lam_max) + _RADIUS_MARGIN


def eval_density(prims, pixel):
    """alpha of each primitive at one pixel: opacity * exp(-0.5 d^T Q d),
    clamped to [0, 0.99]."""
    d = np.asarray(pixel, dtype=np.float64) - prims.center
    a, b, c = prims.conic[:, 0], prims.conic[:, 1], prims.conic[:, 2]
    power = -0.5 * (a * d[:, 0] ** 2 + c * d[:, 1] ** 2) - b * d[:, 0] * d[:, 1]
    return np.minimum(prims.opacity * np.exp(power), ALPHA_CLAMP)


def depth_order(depth):
    """Global front-to-back ordering shared by both render paths."""
    return np.argsort(depth, kind="stable")


def render_naive(prims, width, height, background=(0.0, 0.0, 0.0)):
    """Reference renderer: full per-pixel blend over all primitives.

    Semantics (identical in the tiled path): primitives ascend by depth;
    alpha = min(opacity * exp(power), 0.99); contributions below 1/255 are
    skipped; a contribution that would push transmittance below 1e-4 is
    dropped and the pixel stops blending.
    """
    bg = np.asarray(background, dtype=np.float64)
    jj, ii = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    T = np.ones((height, width))
    done = np.zeros((height, width), dtype=bool)
    col = np.zeros((height, width, 3))
    dep = np.zeros((height, width))
    flo = np.zeros((height, width, 2))
    opa = np.zeros((height, width))
    for g in depth_order(prims.depth):
        dx = jj - prims.center[g, 0]
        dy = ii - prims.center[g, 1]
        a, b, c = prims.conic[g]
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        alpha = np.minimum(prims.opacity[g] * np.exp(power), ALPHA_CLAMP)
        consider = ~done & (alpha >= ALPHA_SKIP)
        t_new = T * (1.0 - alpha)
        kill = consider & (t_new < T_TERMINATE)
        done |= kill
        contrib = consider & ~kill
        w = np.where(contrib, alpha * T, 0.0)
        col += w[..., None] * prims.color[g]
        dep += w * prims.depth[g]
        flo += w[..., None] * prims.flow[g]
        opa += w
        T = np.where(contrib, t_new, T)
    col += bg * T[..., None]
    return RenderOutput(color=col, depth=dep, flow=flo, opacity=opa, transmittance=T)


def render_tiled(prims, width, height, background=(0.0, 0.0, 0.0), tile_size=16):
    """Tile-binned renderer; identical output to render_naive within fp noise."""
    out, _binned = _render_tiled_binned(prims, width, height, background, tile_size)
    return out


def _render_tiled_binned(prims, width, height, background, tile_size=16):
    bg = np.ascontiguousarray(background, dtype=np.float64)
    n_tiles_x = (width + tile_size - 1) // tile_size
    n_tiles_y = (height + tile_size - 1) // tile_size
    dsort = depth_order(prims.depth)
    offsets, tile_ids = _kernels.bin_tiles(
        np.ascontiguousarray(prims.center), np.ascontiguousarray(prims.radius),
        dsort, width, height, tile_size, n_tiles_x, n_tiles_y)
    col = np.zeros((height, width, 3))
    dep = np.zeros((height, width))
    flo = np.zeros((height, width, 2))
    opa = np.zeros((height, width))
    trans = np.ones((height, width))
    last = np.zeros((height, width), dtype=np.int64)
    _kernels.blend_forward(
        offsets, tile_ids,
        np.ascontiguousarray(prims.center), np.ascontiguousarray(prims.conic),
        np.ascontiguousarray(prims.depth), np.ascontiguousarray(prims.opacity),
        np.ascontiguousarray(prims.color), np.ascontiguousarray(prims.flow),
        bg, width, height, tile_size, n_tiles_x,
        col, dep, flo, opa, trans, last)
    out = RenderOutput(color=col, depth=dep, flow=flo, opacity=opa,
                       transmittance=trans, last_contrib=last)
    return out, (offsets, tile_ids, tile_size, n_tiles_x, bg)


def render_tiled_backward(prims, binned, out, d_color, d_depth, d_flow, d_opacity,
                          width, height):
    """Gradients of the tiled blend w.r.t. every primitive attribute."""
    offsets, tile_ids, tile_size, n_tiles_x, bg = binned
    n = prims.count
    grads = {
        "center": np.zeros((n, 2)), "conic": np.zeros((n, 3)),
        "depth": np.zeros(n), "opacity": np.zeros(n),
        "color": np.zeros((n, 3)), "flow": np.zeros((n, 2)),
    }
    _kernels.blend_backward(
        offsets, tile_ids,
        np.ascontiguousarray(prims.center), np.ascontiguousarray(prims.conic),
        np.ascontiguousarray(prims.depth), np.ascontiguousarray(prims.opacity),
        np.ascontiguousarray(prims.color), np.ascontiguousarray(prims.flow),
        bg, width, height, tile_size, n_tiles_x,
        out.transmittance, out.last_contrib,
        np.ascontiguousarray(d_color), np.ascontiguousarray(d_depth),
        np.ascontiguousarray(d_flow), np.ascontiguousarray(d_opacity),
        grads["center"], grads["conic"], grads["depth"], grads["opacity"],
        grads["color"], grads["flow"])
    return grads


# ---------------------------------------------------------------------------
# sky model
# ---------------------------------------------------------------------------

class SkyModel:
    """Learnable equirectangular color grid sampled by world ray direction.

    Colors are sigmoid(bilinear(grid)); azimuth wraps, elevation clamps.
    """

    GRID_H = 64
    GRID_W = 128

    def __init__(self, grid=None):
        if grid is None:
            grid = np.zeros((self.GRID_H, self.GRID_W, 3))
        self.grid = np.asarray(grid, dtype=np.float64)

    def _coords(self, dirs):
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        az = np.arctan2(y, x)                       # [-pi, pi]
        el = np.arcsin(np.clip(z, -1.0, 1.0))       # [-pi/2, pi/2]
        gx = (az + np.pi) / (2.0 * np.pi) * self.GRID_W - 0.5
        gy = (el + 0.5 * np.pi) / np.pi * self.GRID_H - 0.5
        x0 = np.floor(gx).astype(np.int64)
        y0 = np.floor(gy).astype(np.int64)
        wx = gx - x0
        wy = gy - y0
        x0m = np.mod(x0, self.GRID_W)
        x1m = np.mod(x0 + 1, self.GRID_W)
        y0c = np.clip(y0, 0, self.GRID_H - 1)
        y1c = np.clip(y0 + 1, 0, self.GRID_H - 1)
        return x0m, x1m, y0c, y1c, wx, wy

    def sample(self, dirs):
        """RGB sky color per unit direction, shape dirs.shape[:-1] + (3,)."""
        x0, x1, y0, y1, wx, wy = self._coords(dirs)
        g = self.grid
        pre = ((1 - wx)[..., None] * (1 - wy)[..., None] * g[y0, x0]
               + wx[..., None] * (1 - wy)[..., None] * g[y0, x1]
               + (1 - wx)[..., None] * wy[..., None] * g[y1, x0]
               + wx[..., None] * wy[..., None] * g[y1, x1])
        return 1.0 / (1.0 + np.exp(-pre))

    def sample_vjp(self, dirs, dcolor):
        """Gradient of sampled colors w.r.t. the raw grid."""
        x0, x1, y0, y1, wx, wy = self._coords(dirs)
        color = self.sample(dirs)
        dpre = dcolor * color * (1.0 - color)
        dgrid = np.zeros_like(self.grid)
        np.add.at(dgrid, (y0, x0), (1 - wx)[..., None] * (1 - wy)[..., None] * dpre)
        np.add.at(dgrid, (y0, x1), wx[..., None] * (1 - wy)[..., None] * dpre)
        np.add.at(dgrid, (y1, x0), (1 - wx)[..., None] * wy[..., None] * dpre)
        np.add.at(dgrid, (y1, x1), wx[..., None] * wy[..., None] * dpre)
        return dgrid


def composite_sky(out, sky_model, rays):
    """Blend sky color behind the splats: color += (1 - O) * sky(ray).

    Sky contributes no depth or flow. Returns a new RenderOutput sharing the
    non-color buffers.
    """
    sky_rgb = sky_model.sample(rays)
    color = out.color + (1.0 - out.opacity)[..., None] * sky_rgb
    return RenderOutput(color=color, depth=out.depth, flow=out.flow,
                        opacity=out.opacity, transmittance=out.transmittance,
                        last_contrib=out.last_contrib)


def composite_sky_vjp(out, sky_model, rays, d_color_final):
    """Backward of composite_sky: returns (d_color_raster, d_opacity_extra, d_grid)."""
    sky_rgb = sky_model.sample(rays)
    d_opacity = -np.sum(d_color_final * sky_rgb, axis=-1)
    d_grid = sky_model.sample_vjp(rays, d_color_final * (1.0 - out.opacity)[..., None])
    return d_color_final, d_opacity, d_grid


# ---------------------------------------------------------------------------
# world-space Gaussians -> screen-space primitives
# ---------------------------------------------------------------------------

@dataclass
class ProjectionCache:
    """Intermediates saved by project_gaussians for its backward pass."""
    keep: np.ndarray          # indices of Gaussians that survived culling
    mu_cam: np.ndarray
    cov3: np.ndarray
    cov2: np.ndarray
    conic: np.ndarray
    view_dir_raw: np.ndarray  # mu - camera_center, unnormalized
    view_dir: np.ndarray
    mu2_cam: np.ndarray | None
    uv1: np.ndarray | None    # projection of mu at t1 under camera 1 (flow path)


def project_gaussians(mu, quat, scale, opacity, sh_coeffs, extrinsic, intrinsics,
                      width, height, mu2=None, extrinsic2=None, intrinsics2=None):
    """Project world Gaussians into screen-space splats for one camera.

    mu2/extrinsic2: optional next-timestamp centers and camera for flow
    rendering; flow = project2(mu2) - project1(mu).  Gaussians behind the
    near plane in either view are culled (same keep set for all buffers).

    Returns (SplatPrimitives, ProjectionCache).
    """
    mu = np.asarray(mu, dtype=np.float64)
    mu_cam = geometry.transform_points(extrinsic, mu)
    keep = mu_cam[:, 2] > Z_NEAR
    if mu2 is not None:
        mu2_cam_all = geometry.transform_points(extrinsic2, np.asarray(mu2, dtype=np.float64))
        keep = keep & (mu2_cam_all[:, 2] > Z_NEAR)
    keep = np.flatnonzero(keep)
    mu = mu[keep]
    mu_cam = mu_cam[keep]
    quat = np.asarray(quat, dtype=np.float64)[keep]
    scale = np.asarray(scale, dtype=np.float64)[keep]
    opacity = np.asarray(opacity, dtype=np.float64)[keep]
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)[keep]

    fx, fy, cx, cy = intrinsics
    z = mu_cam[:, 2]
    uv = np.stack([fx * mu_cam[:, 0] / z + cx, fy * mu_cam[:, 1] / z + cy], axis=-1)

    cov3 = geometry.build_covariance(quat, scale)
    cov2 = geometry.project_covariance(cov3, mu_cam, extrinsic, intrinsics)
    conic_m = geometry.invert_cov2(cov2)
    conic = np.stack([conic_m[:, 0, 0], conic_m[:, 0, 1], conic_m[:, 1, 1]], axis=-1)

    cam_pos = geometry.camera_center(np.asarray(extrinsic, dtype=np.float64))
    vraw = mu - cam_pos
    vdir = vraw / np.linalg.norm(vraw, axis=-1, keepdims=True)
    color = sh.eval_sh_color(sh_coeffs, vdir)

    mu2_cam = None
    uv1 = None
    flow = np.zeros((mu.shape[0], 2))
    if mu2 is not None:
        mu2_cam = mu2_cam_all[keep]
        fx2, fy2, cx2, cy2 = intrinsics2
        z2 = mu2_cam[:, 2]
        uv2 = np.stack([fx2 * mu2_cam[:, 0] / z2 + cx2,
                        fy2 * mu2_cam[:, 1] / z2 + cy2], axis=-1)
        uv1 = uv
        flow = uv2 - uv1

    prims = SplatPrimitives(center=uv, conic=conic, depth=z, opacity=opacity,
                            color=color, flow=flow, radius=conic_radius(conic))
    cache = ProjectionCache(keep=keep, mu_cam=mu_cam, cov3=cov3, cov2=cov2,
                            conic=conic_m, view_dir_raw=vraw, view_dir=vdir,
                            mu2_cam=mu2_cam, uv1=uv1)
    return prims, cache


def project_gaussians_vjp(cache, quat, scale, sh_coeffs, extrinsic, intrinsics,
                          grads, extrinsic2=None, intrinsics2=None):
    """Backward of project_gaussians.

    `grads` is the dict from render_tiled_backward (per kept primitive).
    quat/scale/sh_coeffs are the *full* parameter arrays; outputs are full-size
    with zeros at culled rows. Returns dict with keys mu, quat, scale, opacity,
    sh, mu2 (mu2 only when the flow path was active).
    """
    keep = cache.keep
    kq = np.asarray(quat, dtype=np.float64)[keep]
    ks = np.asarray(scale, dtype=np.float64)[keep]
    ksh = np.asarray(sh_coeffs, dtype=np.float64)[keep]
    fx, fy, cx, cy = intrinsics
    E = np.asarray(extrinsic, dtype=np.float64)

    d_uv = grads["center"].copy()
    d_z = grads["depth"].copy()
    d_mu2 = None

    # flow = uv2(mu2_cam) - uv1; uv1 is the same array as center
    if cache.mu2_cam is not None:
        d_flow = grads["flow"]
        d_uv2 = d_flow
        d_uv -= d_flow
        d_mu2_cam = geometry.project_point_vjp(cache.mu2_cam, intrinsics2, d_uv2,
                                               np.zeros(len(keep)))
        E2 = np.asarray(extrinsic2, dtype=np.float64)
        d_mu2 = d_mu2_cam @ E2[:3, :3]

    # conic (packed a,b,c) -> cov2 -> (cov3, mu_cam)
    d_conic_m = np.zeros((len(keep), 2, 2))
    d_conic_m[:, 0, 0] = grads["conic"][:, 0]
    d_conic_m[:, 0, 1] = grads["conic"][:, 1]
    d_conic_m[:, 1, 1] = grads["conic"][:, 2]
    d_cov2 = geometry.invert_cov2_vjp(cache.conic, d_conic_m)
    d_cov3, d_mu_cam_cov = geometry.project_covariance_vjp(
        cache.cov3, cache.mu_cam, E, intrinsics, d_cov2)
    d_quat_k, d_scale_k = geometry.build_covariance_vjp(kq, ks, d_cov3)

    # pixel center and blended depth -> mu_cam
    d_mu_cam = geometry.project_point_vjp(cache.mu_cam, intrinsics, d_uv, d_z)
    d_mu_cam += d_mu_cam_cov
    d_mu_k = d_mu_cam @ E[:3, :3]

    # SH color -> coeffs and view direction -> mu
    d_sh_k, d_dir = sh.eval_sh_color_vjp(ksh, cache.view_dir, grads["color"])
    n = np.linalg.norm(cache.view_dir_raw, axis=-1, keepdims=True)
    vhat = cache.view_dir
    d_vraw = (d_dir - np.sum(d_dir * vhat, axis=-1, keepdims=True) * vhat) / n
    d_mu_k += d_vraw

    out = {
        "mu": _scatter(d_mu_k, keep, (len(quat), 3)),
        "quat": _scatter(d_quat_k, keep, (len(quat), 4)),
        "scale": _scatter(d_scale_k, keep, (len(quat), 3)),
        "opacity": _scatter(grads["opacity"], keep, (len(quat),)),
        "sh": _scatter(d_sh_k, keep, (len(quat), sh.N_SH_COEFFS, 3)),
    }
    if d_mu2 is not None:
        out["mu2"] = _scatter(d_mu2, keep, (len(quat), 3))
    return out


def _scatter(values, keep, shape):
    full = np.zeros(shape)
    full[keep] = values
    return full
