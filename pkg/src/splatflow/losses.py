"""Training losses and image-quality metrics.

Every loss has a forward returning a scalar and a ``*_vjp`` returning the
gradient w.r.t. the rendered buffers; each pair is validated against finite
differences in the tests. Buffers are (H, W[, C]) float arrays in [0, 1]
unless noted.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ValidationError

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
_SSIM_SIGMA = 1.5
_SSIM_WINDOW = 11

PSNR_CAP = 100.0
_DEPTH_EPS = 1e-2      # rendered depths at or below this are excluded (m)
_BCE_CLAMP = 1e-6
# forward-splat coverage ramp: pixels below LO are holes, above HI count fully,
# with a smoothstep in between so the loss stays differentiable in the flow
_WARP_LO = 0.05
_WARP_HI = 0.25


@dataclass
class LossWeights:
    depth: float = 0.1      # lambda_1
    flow: float = 0.005     # lambda_2
    sky: float = 0.05       # lambda_3
    reg: float = 0.001      # lambda_4
    ssim: float = 0.2       # lambda_ssim
    flow_distill: float = 0.8  # lambda_f

    def __post_init__(self):
        if min(self.depth, self.flow, self.sky, self.reg) < 0:
            raise ValidationError("loss weights must be nonnegative")
        if not (0 <= self.ssim <= 1 and 0 <= self.flow_distill <= 1):
            raise ValidationError("ssim and flow_distill weights must lie in [0, 1]")


@dataclass
class LossReport:
    image: float
    depth: float
    flow: float
    sky: float
    reg: float
    total: float
    flags: tuple = ()

    @classmethod
    def combine(cls, image, depth, flow, sky, reg, weights, flags=()):
        total = (image + weights.depth * depth + weights.flow * flow
                 + weights.sky * sky + weights.reg * reg)
        return cls(image=image, depth=depth, flow=flow, sky=sky, reg=reg,
                   total=total, flags=tuple(flags))


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValidationError(f"buffer shapes differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# SSIM (11x11 Gaussian window, sigma 1.5, zero-padded same-size convolution)
# ---------------------------------------------------------------------------

def _gaussian_window():
    r = _SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(x ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    return w / w.sum()


_WIN = _gaussian_window()


def _blur(img):
    out = correlate1d(img, _WIN, axis=0, mode="constant")
    return correlate1d(out, _WIN, axis=1, mode="constant")


def ssim_map(x, y):
    """Per-pixel SSIM map; x, y are (H, W) or (H, W, C)."""
    mx = _blur(x)
    my = _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    a1 = 2.0 * mx * my + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    return (a1 * a2) / (b1 * b2)


def ssim(x, y):
    """Mean SSIM over the window map (dynamic range 1.0)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y)
    return float(np.mean(ssim_map(x, y)))


def _ssim_mean_vjp(x, y):
    """Gradient of mean(ssim_map(x, y)) w.r.t. x."""
    mx = _blur(x)
    my = _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    a1 = 2.0 * mx * my + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    d_a1 = a2 / (b1 * b2)
    d_a2 = a1 / (b1 * b2)
    d_b1 = -s / b1
    d_b2 = -s / b2
    # pixelwise fields multiplying the adjoint blur
    p_mx = 2.0 * my * d_a1 + 2.0 * mx * d_b1 - 2.0 * mx * d_b2 - my * (2.0 * d_a2)
    p_gx2 = d_b2                # field against blur(x^2)
    p_gxy = 2.0 * d_a2          # field against blur(x*y)
    n = x.size
    # the Gaussian window is symmetric and zero-padded, so blur is self-adjoint
    return (_blur(p_mx) + 2.0 * x * _blur(p_gx2) + y * _blur(p_gxy)) / n


def psnr(x, y):
    """10*log10(1/MSE) on [0,1] images, capped at 100 dB for MSE < 1e-10."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


# ---------------------------------------------------------------------------
# Eq. 13 image loss
# ---------------------------------------------------------------------------

def image_loss(rendered, target, ssim_weight):
    """(1 - w)*L1 + w*(1 - SSIM)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same_shape(rendered, target)
    l1 = float(np.mean(np.abs(rendered - target)))
    if ssim_weight == 0.0:
        return (1.0 - ssim_weight) * l1
    return (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - ssim(rendered, target))


def image_loss_vjp(rendered, target, ssim_weight):
    g = (1.0 - ssim_weight) * np.sign(rendered - target) / rendered.size
    if ssim_weight != 0.0:
        g = g - ssim_weight * _ssim_mean_vjp(rendered, target)
    return g


# ---------------------------------------------------------------------------
# Eq. 14 depth loss (inverse form by default)
# ---------------------------------------------------------------------------

def depth_loss(rendered_depth, lidar_depth, valid_mask, inverse=True):
    """Mean L1 between (inverse) rendered and LiDAR-projected depths.

    Pixels with rendered depth <= eps are excluded. An empty effective mask
    contributes 0 and flags a warning. Returns (value, warned).
    """
    m = valid_mask & (rendered_depth > _DEPTH_EPS)
    if not np.any(m):
        return 0.0, True
    if inverse:
        diff = 1.0 / rendered_depth[m] - 1.0 / lidar_depth[m]
    else:
        diff = rendered_depth[m] - lidar_depth[m]
    return float(np.mean(np.abs(diff))), False


def depth_loss_vjp(rendered_depth, lidar_depth, valid_mask, inverse=True):
    m = valid_mask & (rendered_depth > _DEPTH_EPS)
    g = np.zeros_like(rendered_depth)
    if not np.any(m):
        return g
    if inverse:
        s = np.sign(1.0 / rendered_depth[m] - 1.0 / lidar_depth[m])
        g[m] = -s / (rendered_depth[m] ** 2)
    else:
        g[m] = np.sign(rendered_depth[m] - lidar_depth[m])
    g /= np.count_nonzero(m)
    return g


def project_lidar_depth(points_world, extrinsic, intrinsics, width, height,
                        z_near=0.2):
    """Sparse depth map from a point cloud: nearest point wins per pixel.

    Returns (depth, valid_mask).
    """
    E = np.asarray(extrinsic, dtype=np.float64)
    p = points_world @ E[:3, :3].T + E[:3, 3]
    z = p[:, 2]
    front = z > z_near
    p = p[front]
    z = z[front]
    fx, fy, cx, cy = intrinsics
    u = (fx * p[:, 0] / z + cx).astype(np.int64)
    v = (fy * p[:, 1] / z + cy).astype(np.int64)
    ok = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    depth = np.full((height, width), np.inf)
    np.minimum.at(depth, (v[ok], u[ok]), z[ok])
    valid = np.isfinite(depth)
    depth[~valid] = 0.0
    return depth, valid


# ---------------------------------------------------------------------------
# Eq. 12 flow loss: distillation + forward-warp photometric term
# ---------------------------------------------------------------------------

def _warp_weights(flow):
    """Bilinear forward-splat corner indices and weights for each source pixel."""
    h, w = flow.shape[:2]
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    gx = jj + flow[..., 0]
    gy = ii + flow[..., 1]
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = gx - x0
    fy = gy - y0
    corners = []
    for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        cx = x0 + dx
        cy = y0 + dy
        inside = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        corners.append((cx, cy, wgt, inside))
    return corners, fx, fy, x0, y0


def _coverage_ramp(wsum):
    """Smoothstep of the splat weight: 0 below LO, 1 above HI, C1 in between."""
    t = np.clip((wsum - _WARP_LO) / (_WARP_HI - _WARP_LO), 0.0, 1.0)
    s = t * t * (3.0 - 2.0 * t)
    ds = 6.0 * t * (1.0 - t) / (_WARP_HI - _WARP_LO)
    ds[(wsum <= _WARP_LO) | (wsum >= _WARP_HI)] = 0.0
    return s, ds


def forward_warp(image, flow):
    """Forward-bilinear resampling of `image` by per-pixel `flow` (pixels).

    Each source pixel splats its value to the four pixels around its flowed
    position. Returns (warped, weight); `warped` is weight-normalized where
    weight exceeds the hole threshold and zero elsewhere.
    """
    corners, *_ = _warp_weights(flow)
    h, w = image.shape[:2]
    acc = np.zeros_like(image)
    wsum = np.zeros((h, w))
    for cx, cy, wgt, inside in corners:
        np.add.at(acc, (cy[inside], cx[inside]),
                  wgt[inside, None] * image[inside])
        np.add.at(wsum, (cy[inside], cx[inside]), wgt[inside])
    covered = wsum > _WARP_LO
    warped = np.zeros_like(image)
    warped[covered] = acc[covered] / wsum[covered, None]
    return warped, wsum


def _warp_term(rendered_flow, rendered_image, next_image):
    """Coverage-weighted mean L1 between next_image and the forward warp.

    value = sum_p s(W_p) * mean_ch |next - warped|_p / sum_p s(W_p); fully
    splatted pixels weigh 1, holes weigh 0 (so a uniform integer flow gives a
    plain shifted-image L1 over the covered pixels).
    """
    warped, wsum = forward_warp(rendered_image, rendered_flow)
    s, _ = _coverage_ramp(wsum)
    denom = float(np.sum(s))
    if denom <= 0.0:
        return 0.0, warped, wsum
    e = np.mean(np.abs(next_image - warped), axis=-1)
    return float(np.sum(s * e) / denom), warped, wsum


def flow_loss(rendered_flow, pseudo_flow, rendered_image, next_image, distill_weight):
    """lambda_f * L1(pseudo, rendered) + (1-lambda_f) * L1(next, warp(rendered_image)).

    Either input may be None: a missing pseudo_flow skips the distillation
    term, a missing next_image skips the warp term; skipped terms are flagged.
    Returns (value, flags).
    """
    flags = []
    total = 0.0
    if pseudo_flow is not None:
        total += distill_weight * float(np.mean(np.abs(pseudo_flow - rendered_flow)))
    else:
        flags.append("flow_pseudo_missing")
    if next_image is not None and distill_weight < 1.0:
        term, _, _ = _warp_term(rendered_flow, rendered_image, next_image)
        total += (1.0 - distill_weight) * term
    elif next_image is None:
        flags.append("flow_warp_skipped")
    return total, tuple(flags)


def flow_loss_vjp(rendered_flow, pseudo_flow, rendered_image, next_image,
                  distill_weight):
    """Gradients w.r.t. (rendered_flow, rendered_image)."""
    d_flow = np.zeros_like(rendered_flow)
    d_img = np.zeros_like(rendered_image)
    if pseudo_flow is not None:
        d_flow += distill_weight * np.sign(rendered_flow - pseudo_flow) / rendered_flow.size
    if next_image is not None and distill_weight < 1.0:
        corners, fx, fy, x0, y0 = _warp_weights(rendered_flow)
        h, w = rendered_image.shape[:2]
        nch = rendered_image.shape[-1]
        acc = np.zeros_like(rendered_image)
        wsum = np.zeros((h, w))
        for cx, cy, wgt, inside in corners:
            np.add.at(acc, (cy[inside], cx[inside]), wgt[inside, None] * rendered_image[inside])
            np.add.at(wsum, (cy[inside], cx[inside]), wgt[inside])
        s, ds = _coverage_ramp(wsum)
        denom = float(np.sum(s))
        if denom > 0.0:
            covered = wsum > _WARP_LO
            warped = np.zeros_like(rendered_image)
            warped[covered] = acc[covered] / wsum[covered, None]
            e = np.mean(np.abs(next_image - warped), axis=-1)
            value = float(np.sum(s * e) / denom)
            scale_out = (1.0 - distill_weight)
            # dL/d(warped): -(s/denom) * sign / nch per channel
            u = -(s / denom)[..., None] * np.sign(next_image - warped) / nch
            u *= scale_out
            # dL/ds via both the numerator and the normalizing denominator
            d_s = scale_out * (e - value) / denom
            inv_w = np.zeros((h, w))
            inv_w[covered] = 1.0 / wsum[covered]
            d_acc = u * inv_w[..., None]
            d_wsum = -np.sum(u * warped, axis=-1) * inv_w + d_s * ds
            dwgt_dfx = {(0, 0): -(1 - fy), (1, 0): (1 - fy), (0, 1): -fy, (1, 1): fy}
            dwgt_dfy = {(0, 0): -(1 - fx), (1, 0): -fx, (0, 1): (1 - fx), (1, 1): fx}
            for (cx, cy, wgt, inside), key in zip(corners, ((0, 0), (1, 0), (0, 1), (1, 1))):
                ga = np.zeros_like(rendered_image)
                gw = np.zeros((h, w))
                ga[inside] = d_acc[cy[inside], cx[inside]]
                gw[inside] = d_wsum[cy[inside], cx[inside]]
                d_img += wgt[..., None] * ga
                d_corner_w = np.sum(ga * rendered_image, axis=-1) + gw
                d_flow[..., 0] += d_corner_w * dwgt_dfx[key]
                d_flow[..., 1] += d_corner_w * dwgt_dfy[key]
    return d_flow, d_img


# ---------------------------------------------------------------------------
# Eq. 15 sky loss
# ---------------------------------------------------------------------------

def sky_loss(opacity, sky_mask):
    """BCE(O, 1 - M_sky) with O clamped to [1e-6, 1 - 1e-6]."""
    o = np.clip(opacity, _BCE_CLAMP, 1.0 - _BCE_CLAMP)
    target = 1.0 - sky_mask.astype(np.float64)
    return float(np.mean(-(target * np.log(o) + (1.0 - target) * np.log(1.0 - o))))


def sky_loss_vjp(opacity, sky_mask):
    o = np.clip(opacity, _BCE_CLAMP, 1.0 - _BCE_CLAMP)
    target = 1.0 - sky_mask.astype(np.float64)
    g = (-target / o + (1.0 - target) / (1.0 - o)) / opacity.size
    g[(opacity < _BCE_CLAMP) | (opacity > 1.0 - _BCE_CLAMP)] = 0.0
    return g


# ---------------------------------------------------------------------------
# Eq. 16 regularizer (paper leaves it undefined; see design notes)
# ---------------------------------------------------------------------------

SCALE_RATIO_LIMIT = 10.0


def reg_loss(motion, scales):
    """Mean squared predicted motion + mean scale-anisotropy penalty.

    motion: (N_dyn, 3) predicted per-Gaussian translations for the frame's
    pair (empty allowed); scales: (N, 3) positive scales for all Gaussians.
    Penalty is relu(max/min - 10)^2.
    """
    m = 0.0 if motion is None or len(motion) == 0 else float(np.mean(np.sum(motion ** 2, axis=-1)))
    ratio = scales.max(axis=-1) / scales.min(axis=-1)
    pen = float(np.mean(np.maximum(ratio - SCALE_RATIO_LIMIT, 0.0) ** 2))
    return m + pen


def reg_loss_vjp(motion, scales):
    """Gradients w.r.t. (motion, scales)."""
    d_motion = None
    if motion is not None and len(motion) > 0:
        d_motion = 2.0 * motion / motion.shape[0]
    ratio = scales.max(axis=-1) / scales.min(axis=-1)
    imax = scales.argmax(axis=-1)
    imin = scales.argmin(axis=-1)
    excess = np.maximum(ratio - SCALE_RATIO_LIMIT, 0.0)
    coef = 2.0 * excess / scales.shape[0]
    d_scales = np.zeros_like(scales)
    rows = np.arange(scales.shape[0])
    smin = scales[rows, imin]
    d_scales[rows, imax] += coef / smin
    d_scales[rows, imin] -= coef * ratio / smin
    return d_motion, d_scales
