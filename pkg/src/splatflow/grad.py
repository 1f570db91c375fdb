"""End-to-end differentiable forward pass and its hand-assembled reverse-mode
backward, plus the finite-difference checking harness.

``forward`` renders one frame (warp dynamics -> project -> blend -> sky) and
optionally evaluates the full training loss; ``backward`` consumes the saved
intermediates and returns exact gradients for every trainable parameter class:
Gaussian centers, rotations, scales, opacities, SH coefficients, motion-MLP
weights, and the sky grid.

Gradient flow through the dynamic branch chains the per-pair MLPs
(positions re-forwarded per step during backward to keep memory flat) and
composes quaternion products in reverse.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import geometry, losses, rasterizer
from .errors import NumericError, ValidationError
from .scene import sigmoid

_TOL_FLOOR = 1e-8


@dataclass
class FrameInputs:
    """Everything needed to render (and supervise) one camera view."""
    frame_index: int
    extrinsic: np.ndarray
    intrinsics: tuple
    width: int
    height: int
    rays: np.ndarray | None = None          # (H, W, 3) world ray dirs for sky
    extrinsic_next: np.ndarray | None = None  # camera at the next frame (flow)
    intrinsics_next: tuple | None = None
    target_image: np.ndarray | None = None
    lidar_depth: np.ndarray | None = None
    lidar_valid: np.ndarray | None = None
    sky_mask: np.ndarray | None = None
    flow_pseudo: np.ndarray | None = None
    next_image: np.ndarray | None = None    # warp-term target (training frames only)
    time_fraction: float = 0.0              # partial warp past frame_index

    @property
    def want_flow(self):
        return self.extrinsic_next is not None


@dataclass
class ForwardState:
    inputs: FrameInputs
    weights: object
    out_raster: object
    out_final: object
    binned: tuple
    prims: object
    proj_cache: object
    n_static: int
    # dynamic warp bookkeeping
    mu_steps: list = field(default_factory=list)     # positions before each step
    aa_steps: list = field(default_factory=list)     # axis-angle outputs per step
    dq_steps: list = field(default_factory=list)     # unit quats per step
    q_steps: list = field(default_factory=list)      # rotation chain per step
    step_pairs: list = field(default_factory=list)   # pair index per step
    motion_pair: int | None = None
    motion_t: np.ndarray | None = None
    mu_final: np.ndarray | None = None
    quat_final: np.ndarray | None = None
    scales_all: np.ndarray | None = None
    depth_warned: bool = False
    flow_flags: tuple = ()


@dataclass
class ParamGradients:
    static: dict
    dynamic: dict
    mlp: dict                  # pair index -> [(dW, db) per layer]
    sky_grid: np.ndarray
    view_grad_ndc: np.ndarray  # per-Gaussian screen-space gradient magnitude
    visible: np.ndarray        # per-Gaussian bool, survived culling

    def check_finite(self):
        def chk(name, arr):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite gradient in {name}")
        for grp, grads in (("static", self.static), ("dynamic", self.dynamic)):
            for k, v in grads.items():
                chk(f"{grp}.{k}", v)
        for pair, layers in self.mlp.items():
            for i, (dw, db) in enumerate(layers):
                chk(f"mlp[{pair}].layer{i}.w", dw)
                chk(f"mlp[{pair}].layer{i}.b", db)
        chk("sky_grid", self.sky_grid)
        return self


def _warp_dynamic(scene, fieldm, frame_index, time_fraction, state):
    """Chain dynamic Gaussians from the canonical frame to `frame_index`,
    recording every intermediate the backward pass needs."""
    dyn = scene.dynamic
    mu = dyn.pos.copy()
    q = dyn.quat.copy()
    if fieldm is None or dyn.count == 0:
        return mu, q
    for pair in range(scene.canonical_frame, frame_index):
        t, w, _ = fieldm.eval_raw(pair, mu)
        dq = geometry.quat_from_axis_angle(w)
        state.mu_steps.append(mu)
        state.aa_steps.append(w)
        state.dq_steps.append(dq)
        state.q_steps.append(q)
        state.step_pairs.append(pair)
        mu = mu + t
        q = geometry.quat_multiply(q, dq)
    if time_fraction > 0.0 and frame_index < fieldm.n_pairs:
        t, w, _ = fieldm.eval_raw(frame_index, mu)
        dq = geometry.quat_from_axis_angle(time_fraction * w)
        state.mu_steps.append(mu)
        state.aa_steps.append(w)
        state.dq_steps.append(dq)
        state.q_steps.append(q)
        state.step_pairs.append((frame_index, time_fraction))
        mu = mu + time_fraction * t
        q = geometry.quat_multiply(q, dq)
    return mu, q


def forward(scene, fieldm, inputs, weights=None, tile_size=16):
    """Render one view; with `weights` also evaluate the Eq. 16 loss.

    Returns (RenderOutput, LossReport | None, ForwardState).
    """
    state = ForwardState(inputs=inputs, weights=weights, out_raster=None,
                         out_final=None, binned=None, prims=None,
                         proj_cache=None, n_static=scene.static.count)
    mu_dyn, q_dyn = _warp_dynamic(scene, fieldm, inputs.frame_index,
                                  inputs.time_fraction, state)
    state.mu_final = mu_dyn
    state.quat_final = q_dyn

    ns = scene.static.count
    mu_all = np.concatenate([scene.static.pos, mu_dyn])
    quat_all = np.concatenate([scene.static.quat, q_dyn])
    scale_all = np.concatenate([scene.static.scales(), scene.dynamic.scales()])
    opac_all = np.concatenate([scene.static.opacities(), scene.dynamic.opacities()])
    sh_all = np.concatenate([scene.static.sh, scene.dynamic.sh])
    state.scales_all = scale_all

    mu2_all = None
    if inputs.want_flow:
        mu2_dyn = mu_dyn
        if fieldm is not None and scene.dynamic.count:
            pair = min(inputs.frame_index, fieldm.n_pairs - 1)
            t, _, _ = fieldm.eval_raw(pair, mu_dyn)
            state.motion_pair = pair
            state.motion_t = t
            mu2_dyn = mu_dyn + t
        mu2_all = np.concatenate([scene.static.pos, mu2_dyn])
    elif fieldm is not None and scene.dynamic.count:
        # motion still feeds the regularizer even when flow is not rendered
        pair = min(inputs.frame_index, fieldm.n_pairs - 1)
        t, _, _ = fieldm.eval_raw(pair, mu_dyn)
        state.motion_pair = pair
        state.motion_t = t

    prims, cache = rasterizer.project_gaussians(
        mu_all, quat_all, scale_all, opac_all, sh_all,
        inputs.extrinsic, inputs.intrinsics, inputs.width, inputs.height,
        mu2=mu2_all, extrinsic2=inputs.extrinsic_next,
        intrinsics2=inputs.intrinsics_next)
    out, binned = rasterizer._render_tiled_binned(
        prims, inputs.width, inputs.height, (0.0, 0.0, 0.0), tile_size)
    state.prims = prims
    state.proj_cache = cache
    state.binned = binned
    state.out_raster = out

    final = out
    if inputs.rays is not None:
        final = rasterizer.composite_sky(out, scene.sky, inputs.rays)
    state.out_final = final

    report = None
    if weights is not None:
        l_img = 0.0
        if inputs.target_image is not None:
            l_img = losses.image_loss(final.color, inputs.target_image, weights.ssim)
        l_depth = 0.0
        if inputs.lidar_depth is not None:
            l_depth, state.depth_warned = losses.depth_loss(
                final.depth, inputs.lidar_depth, inputs.lidar_valid)
        l_flow = 0.0
        if inputs.want_flow and (inputs.flow_pseudo is not None or inputs.next_image is not None):
            l_flow, state.flow_flags = losses.flow_loss(
                final.flow, inputs.flow_pseudo, final.color, inputs.next_image,
                weights.flow_distill)
        l_sky = 0.0
        if inputs.sky_mask is not None:
            l_sky = losses.sky_loss(final.opacity, inputs.sky_mask)
        l_reg = losses.reg_loss(state.motion_t, scale_all)
        flags = list(state.flow_flags)
        if state.depth_warned:
            flags.append("depth_mask_empty")
        report = losses.LossReport.combine(l_img, l_depth, l_flow, l_sky, l_reg,
                                           weights, flags)
    return final, report, state


def backward(scene, fieldm, state):
    """Exact reverse-mode gradients of the loss evaluated in `forward`.

    Requires forward to have been called with weights. Returns ParamGradients.
    """
    if state.weights is None:
        raise ValidationError("backward requires a forward pass that evaluated the loss")
    W = state.weights
    inputs = state.inputs
    final = state.out_final
    ns = state.n_static
    nd = scene.dynamic.count

    h, w = inputs.height, inputs.width
    d_color = np.zeros((h, w, 3))
    d_depth = np.zeros((h, w))
    d_flow = np.zeros((h, w, 2))
    d_opacity = np.zeros((h, w))

    if inputs.target_image is not None:
        d_color += losses.image_loss_vjp(final.color, inputs.target_image, W.ssim)
    if inputs.lidar_depth is not None:
        d_depth += W.depth * losses.depth_loss_vjp(
            final.depth, inputs.lidar_depth, inputs.lidar_valid)
    if inputs.want_flow and (inputs.flow_pseudo is not None or inputs.next_image is not None):
        g_flow, g_img = losses.flow_loss_vjp(
            final.flow, inputs.flow_pseudo, final.color, inputs.next_image,
            W.flow_distill)
        d_flow += W.flow * g_flow
        d_color += W.flow * g_img
    if inputs.sky_mask is not None:
        d_opacity += W.sky * losses.sky_loss_vjp(final.opacity, inputs.sky_mask)

    sky_grid_grad = np.zeros_like(scene.sky.grid)
    if inputs.rays is not None:
        d_color, d_op_extra, sky_grid_grad = rasterizer.composite_sky_vjp(
            state.out_raster, scene.sky, inputs.rays, d_color)
        d_opacity += d_op_extra

    prim_grads = rasterizer.render_tiled_backward(
        state.prims, state.binned, state.out_raster,
        d_color, d_depth, d_flow, d_opacity, w, h)

    # densification statistic: ||d center|| in NDC units, per source Gaussian
    keep = state.proj_cache.keep
    n_all = ns + nd
    view_grad = np.zeros(n_all)
    visible = np.zeros(n_all, dtype=bool)
    visible[keep] = True
    gnd = prim_grads["center"] * np.array([w / 2.0, h / 2.0])
    view_grad[keep] = np.linalg.norm(gnd, axis=1)

    mu_all = np.concatenate([scene.static.pos, state.mu_final])
    quat_all = np.concatenate([scene.static.quat, state.quat_final])
    proj = rasterizer.project_gaussians_vjp(
        state.proj_cache, quat_all, state.scales_all,
        np.concatenate([scene.static.sh, scene.dynamic.sh]),
        inputs.extrinsic, inputs.intrinsics, prim_grads,
        extrinsic2=inputs.extrinsic_next, intrinsics2=inputs.intrinsics_next)

    d_scale_all = proj["scale"]
    d_motion = None
    if state.motion_t is not None:
        d_motion, d_scale_reg = losses.reg_loss_vjp(state.motion_t, state.scales_all)
        d_motion = W.reg * d_motion
        d_scale_all = d_scale_all + W.reg * d_scale_reg
    else:
        _, d_scale_reg = losses.reg_loss_vjp(None, state.scales_all)
        d_scale_all = d_scale_all + W.reg * d_scale_reg

    # split static / dynamic
    d_mu_static = proj["mu"][:ns].copy()
    d_mu_dyn = proj["mu"][ns:].copy()
    if "mu2" in proj:
        d_mu_static += proj["mu2"][:ns]
        d_mu2_dyn = proj["mu2"][ns:]
    else:
        d_mu2_dyn = None

    mlp_grads = {}

    def add_mlp_grads(pair, layer_grads):
        if pair not in mlp_grads:
            mlp_grads[pair] = [(gw.copy(), gb.copy()) for gw, gb in layer_grads]
        else:
            for (aw, ab), (gw, gb) in zip(mlp_grads[pair], layer_grads):
                aw += gw
                ab += gb

    # motion step (flow projection + regularizer) feeds the pair MLP
    if nd and state.motion_t is not None:
        d_t = np.zeros((nd, 3))
        if d_motion is not None:
            d_t += d_motion
        if d_mu2_dyn is not None:
            d_t += d_mu2_dyn          # mu2 = mu_final + t
            d_mu_dyn += d_mu2_dyn
        if np.any(d_t):
            x = fieldm.normalize(state.mu_final)
            _, cache = fieldm.mlps[state.motion_pair].forward(x, want_cache=True)
            d_out = np.concatenate([d_t, np.zeros((nd, 3))], axis=1)
            d_x, layer_grads = fieldm.mlps[state.motion_pair].backward(cache, d_out)
            add_mlp_grads(state.motion_pair, layer_grads)
            d_mu_dyn += d_x / fieldm.bounds_half

    # unwind the warp chain
    d_q_dyn = proj["quat"][ns:].copy()
    for s in range(len(state.step_pairs) - 1, -1, -1):
        pair = state.step_pairs[s]
        fraction = 1.0
        if isinstance(pair, tuple):
            pair, fraction = pair
        mu_s = state.mu_steps[s]
        w_s = state.aa_steps[s]
        dq_s = state.dq_steps[s]
        q_s = state.q_steps[s]
        d_q_s, d_dq = geometry.quat_multiply_vjp(q_s, dq_s, d_q_dyn)
        d_w = geometry.quat_from_axis_angle_vjp(fraction * w_s, d_dq) * fraction
        d_t = fraction * d_mu_dyn
        x = fieldm.normalize(mu_s)
        _, cache = fieldm.mlps[pair].forward(x, want_cache=True)
        d_out = np.concatenate([d_t, d_w], axis=1)
        d_x, layer_grads = fieldm.mlps[pair].backward(cache, d_out)
        add_mlp_grads(pair, layer_grads)
        d_mu_dyn = d_mu_dyn + d_x / fieldm.bounds_half
        d_q_dyn = d_q_s

    def pack(group, d_mu, d_quat, d_scale, d_opac, d_sh):
        sc = group.scales()
        op = group.opacities()
        return {
            "pos": d_mu,
            "quat": d_quat,
            "log_scale": d_scale * sc,
            "opacity_logit": d_opac * op * (1.0 - op),
            "sh": d_sh,
        }

    grads = ParamGradients(
        static=pack(scene.static, d_mu_static, proj["quat"][:ns],
                    d_scale_all[:ns], proj["opacity"][:ns], proj["sh"][:ns]),
        dynamic=pack(scene.dynamic, d_mu_dyn, d_q_dyn,
                     d_scale_all[ns:], proj["opacity"][ns:], proj["sh"][ns:]),
        mlp=mlp_grads,
        sky_grid=sky_grid_grad,
        view_grad_ndc=view_grad,
        visible=visible,
    )
    return grads.check_finite()


# ---------------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Max relative error per parameter class with a pass/fail flag.

    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    max_rel_err: dict
    tolerance: float
    passed: bool
    samples_per_class: int

    def to_json(self):
        return json.dumps({
            "max_rel_err": {k: float(v) for k, v in self.max_rel_err.items()},
            "tolerance": self.tolerance,
            "passed": bool(self.passed),
            "samples_per_class": self.samples_per_class,
        }, indent=1)


def total_loss(scene, fieldm, frames, weights):
    """Sum of Eq. 16 losses over a batch of FrameInputs."""
    total = 0.0
    for fi in frames:
        _, report, _ = forward(scene, fieldm, fi, weights)
        total += report.total
    return total


def total_gradients(scene, fieldm, frames, weights):
    """Accumulated analytic gradients over a batch of FrameInputs."""
    acc = None
    for fi in frames:
        _, _, st = forward(scene, fieldm, fi, weights)
        g = backward(scene, fieldm, st)
        acc = g if acc is None else _accumulate(acc, g)
    return acc


def _accumulate(a, b):
    for k in a.static:
        a.static[k] += b.static[k]
        a.dynamic[k] += b.dynamic[k]
    for pair, layers in b.mlp.items():
        if pair in a.mlp:
            for (aw, ab), (gw, gb) in zip(a.mlp[pair], layers):
                aw += gw
                ab += gb
        else:
            a.mlp[pair] = layers
    a.sky_grid += b.sky_grid
    a.view_grad_ndc += b.view_grad_ndc
    a.visible |= b.visible
    return a


def _param_arrays(scene, fieldm):
    """Parameter class -> list of arrays (live references)."""
    classes = {
        "mu": [scene.static.pos, scene.dynamic.pos],
        "quat": [scene.static.quat, scene.dynamic.quat],
        "scale": [scene.static.log_scale, scene.dynamic.log_scale],
        "opacity": [scene.static.opacity_logit, scene.dynamic.opacity_logit],
        "sh": [scene.static.sh, scene.dynamic.sh],
        "sky": [scene.sky.grid],
    }
    if fieldm is not None:
        classes["mlp"] = [a for m in fieldm.mlps for a in (m.weights + m.biases)]
    return classes


def _grad_arrays(grads, scene, fieldm):
    out = {
        "mu": [grads.static["pos"], grads.dynamic["pos"]],
        "quat": [grads.static["quat"], grads.dynamic["quat"]],
        "scale": [grads.static["log_scale"], grads.dynamic["log_scale"]],
        "opacity": [grads.static["opacity_logit"], grads.dynamic["opacity_logit"]],
        "sh": [grads.static["sh"], grads.dynamic["sh"]],
        "sky": [grads.sky_grid],
    }
    if fieldm is not None:
        out["mlp"] = _mlp_grads_in_param_order(grads, fieldm)
    return out


def finite_diff_check(scene, fieldm, frames, weights, step=1e-4, tolerance=1e-4,
                      samples_per_class=24, seed=0, analytic=None):
    """Central finite differences vs analytic gradients, sampled per class.

    Per sampled parameter: h = step * max(1, |theta|); relative error uses the
    floor 1e-8. `analytic` overrides the gradients under test (negative
    controls). Returns a GradCheckReport.
    """
    rng = np.random.default_rng(seed)
    if analytic is None:
        analytic = total_gradients(scene, fieldm, frames, weights)
    params = _param_arrays(scene, fieldm)
    grads = _grad_arrays(analytic, scene, fieldm)

    max_err = {}
    for cls, arrays in params.items():
        garrays = grads[cls]
        sizes = np.array([a.size for a in arrays])
        total = int(sizes.sum())
        n_pick = min(samples_per_class, total)
        # half the samples target entries with nonzero analytic gradient (so
        # sparse classes like the sky grid are actually exercised), half are
        # uniform (so a wrongly-zero analytic gradient can still be caught)
        flat_grad = np.concatenate([np.abs(g).ravel() for g in garrays])
        nonzero = np.flatnonzero(flat_grad > 0)
        picks = []
        if nonzero.size:
            picks.append(rng.choice(nonzero, size=min(n_pick // 2, nonzero.size),
                                    replace=False))
        picks.append(rng.choice(total, size=n_pick - sum(map(len, picks)),
                                replace=False))
        picks = np.unique(np.concatenate(picks))
        worst = 0.0
        for flat_idx in picks:
            ai = int(np.searchsorted(np.cumsum(sizes), flat_idx, side="right"))
            local = flat_idx - (np.cumsum(sizes)[ai] - sizes[ai])
            arr = arrays[ai]
            idx = np.unravel_index(local, arr.shape)
            theta = arr[idx]
            h = step * max(1.0, abs(theta))
            arr[idx] = theta + h
            f_plus = total_loss(scene, fieldm, frames, weights)
            arr[idx] = theta - h
            f_minus = total_loss(scene, fieldm, frames, weights)
            arr[idx] = theta
            numeric = (f_plus - f_minus) / (2.0 * h)
            a_val = garrays[ai][idx]
            err = abs(a_val - numeric) / max(abs(a_val), abs(numeric), _TOL_FLOOR)
            worst = max(worst, err)
        max_err[cls] = worst
    passed = all(v <= tolerance for v in max_err.values())
    return GradCheckReport(max_rel_err=max_err, tolerance=tolerance,
                           passed=passed, samples_per_class=samples_per_class)


def _mlp_grads_in_param_order(analytic, fieldm):
    arrs = []
    for pair in range(fieldm.n_pairs):
        layers = analytic.mlp.get(pair)
        if layers is None:
            arrs.extend([np.zeros_like(w) for w in fieldm.mlps[pair].weights])
            arrs.extend([np.zeros_like(b) for b in fieldm.mlps[pair].biases])
        else:
            arrs.extend([gw for gw, _ in layers])
            arrs.extend([gb for _, gb in layers])
    return arrs


# ---------------------------------------------------------------------------
# the shipped gradient-check fixture: 10 Gaussians, 32x32, 3 frames
# ---------------------------------------------------------------------------

def make_gradcheck_fixture(seed=11):
    """Small deterministic scene exercising every gradient path.

    6 static + 4 dynamic Gaussians, 3 frames with full supervision (image,
    sparse depth, flow distillation + warp, sky mask), and a 2-pair motion
    field with small random weights on every layer so all MLP layers carry
    gradient. Returns (scene, field, frames, weights).
    """
    from . import losses as losses_mod
    from . import nmff as nmff_mod
    from .scene import GaussianGroup, GaussianScene, logit
    from .sh import N_SH_COEFFS

    rng = np.random.default_rng(seed)
    w, h = 32, 32
    n_static, n_dyn = 6, 4

    def group(n):
        pos = np.column_stack([rng.uniform(-1.2, 1.2, n),
                               rng.uniform(-0.4, 0.6, n),
                               rng.uniform(0.2, 1.6, n)])
        quat = rng.normal(size=(n, 4))
        quat /= np.linalg.norm(quat, axis=1, keepdims=True)
        sh = rng.normal(size=(n, N_SH_COEFFS, 3)) * 0.08
        sh[:, 0, :] = rng.uniform(-0.4, 0.6, size=(n, 3))
        # opacities capped so stacked transmittance never crosses the 1e-4
        # termination threshold: the fixture stays kink-free for FD checks
        return GaussianGroup(
            pos=pos, quat=quat,
            log_scale=np.log(rng.uniform(0.12, 0.3, size=(n, 3))),
            opacity_logit=logit(rng.uniform(0.25, 0.55, n)),
            sh=sh)

    scene = GaussianScene(static=group(n_static), dynamic=group(n_dyn))
    scene.sky.grid = rng.normal(size=scene.sky.grid.shape) * 0.4

    timestamps = np.array([0.0, 0.1, 0.2])
    fieldm = nmff_mod.MotionFlowField(
        mlps=[], bounds_center=np.array([0.0, 0.0, 0.8]),
        bounds_half=np.array([2.5, 2.5, 2.5]), timestamps=timestamps)
    for _ in range(2):
        mlp = nmff_mod.FlowMLP(rng=rng, zero_last=False)
        for i in range(len(mlp.weights)):
            mlp.weights[i] = rng.normal(size=mlp.weights[i].shape) * (
                0.25 if i < nmff_mod.N_LAYERS - 1 else 0.02)
            mlp.biases[i] = rng.normal(size=mlp.biases[i].shape) * 0.01
        fieldm.mlps.append(mlp)

    weights = losses_mod.LossWeights()
    frames = []
    for fi in range(3):
        eye = np.array([0.35 * fi - 0.3, -4.0 + 0.15 * fi, 1.0])
        E = geometry.look_at_extrinsic(eye, (0.0, 0.0, 0.7))
        K = (40.0, 40.0, 16.0, 16.0)
        rays = geometry.camera_rays(E, K, w, h)
        has_next = fi < 2
        E2 = K2 = None
        if has_next:
            eye2 = np.array([0.35 * (fi + 1) - 0.3, -4.0 + 0.15 * (fi + 1), 1.0])
            E2 = geometry.look_at_extrinsic(eye2, (0.0, 0.0, 0.7))
            K2 = K
        # smooth random supervision targets
        def smooth(channels):
            base = rng.normal(size=(8, 8, channels))
            img = np.kron(base, np.ones((4, 4, 1)))
            return img[:h, :w]
        target = np.clip(0.5 + 0.25 * smooth(3), 0.0, 1.0)
        lidar_pts = np.column_stack([rng.uniform(-1.5, 1.5, 60),
                                     rng.uniform(-0.8, 0.8, 60),
                                     rng.uniform(0.0, 1.8, 60)])
        depth, valid = losses_mod.project_lidar_depth(lidar_pts, E, K, w, h)
        sky_mask = np.zeros((h, w), dtype=bool)
        sky_mask[: h // 3] = True
        flow_pseudo = 0.8 * smooth(2) if has_next else None
        next_image = np.clip(0.5 + 0.25 * smooth(3), 0.0, 1.0) if has_next else None
        frames.append(FrameInputs(
            frame_index=fi, extrinsic=E, intrinsics=K, width=w, height=h,
            rays=rays, extrinsic_next=E2, intrinsics_next=K2,
            target_image=target, lidar_depth=depth, lidar_valid=valid,
            sky_mask=sky_mask, flow_pseudo=flow_pseudo, next_image=next_image))
    return scene, fieldm, frames, weights
