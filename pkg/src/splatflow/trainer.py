"""End-to-end optimization: Adam per parameter class, adaptive
densify/clone/split, pruning, opacity reset, and the training schedule.

The dynamic Gaussians are anchored at the first frame and reach every other
timestamp through the motion field, which is jointly optimized at its own
learning rate. With a fixed seed the whole trajectory is bitwise reproducible
on one machine (single-threaded reductions, deterministic frame sampling).
"""

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import geometry, grad, losses, nmff, scenegraph
from .errors import FormatError, NumericError, ValidationError
from .scene import GaussianGroup, GaussianScene, logit, sigmoid
from .sh import N_SH_COEFFS, rgb_to_dc

SFCK_MAGIC = b"SFCK"
_SFCK_VERSION = 1


@dataclass
class TrainConfig:
    iterations: int = 2000
    # per-class learning rates (supplementary defaults)
    lr_position: float = 1.6e-5
    lr_position_final: float = 1.6e-6
    lr_opacity: float = 0.05
    lr_scale: float = 0.005
    lr_sh: float = 2.5e-3
    lr_rotation: float = 1e-3
    lr_nmff: float = 1e-4
    lr_sky: float = 0.05
    # densification / pruning
    densify_interval: int = 500
    densify_start: int = 400
    densify_stop_frac: float = 0.8   # no growth in the last 20% of training
    opacity_reset_interval: int = 3000
    densify_grad_threshold_static: float = 1.7e-4
    densify_grad_threshold_dynamic: float = 1e-4
    prune_opacity: float = 0.005
    split_size_frac: float = 0.01       # of scene-bounds diagonal
    max_screen_extent_frac: float = 0.4  # of image width
    max_gaussians: int = 50000
    # losses
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    depth_inverse: bool = True
    # initialization
    static_init_budget: int = 18000
    dynamic_init_budget: int = 3000
    init_voxel: float = 0.05
    init_opacity: float = 0.1
    # misc
    tile_size: int = 16
    holdout_every: int = 4
    seed: int = 0

    def validate(self):
        rates = (self.lr_position, self.lr_position_final, self.lr_opacity,
                 self.lr_scale, self.lr_sh, self.lr_rotation, self.lr_nmff,
                 self.lr_sky)
        if min(rates) <= 0:
            raise ValidationError("all learning rates must be positive")
        if self.densify_interval <= 0 or self.opacity_reset_interval <= 0:
            raise ValidationError("intervals must be positive")
        if min(self.densify_grad_threshold_static,
               self.densify_grad_threshold_dynamic) <= 0:
            raise ValidationError("densify thresholds must be positive")
        return self

    def position_lr(self, step):
        t = min(max(step, 0) / max(self.iterations, 1), 1.0)
        return self.lr_position * (self.lr_position_final / self.lr_position) ** t


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _voxel_downsample(points, sources, voxel, budget, rng):
    """First point per voxel, then a seeded uniform cut down to `budget`."""
    if points.shape[0] == 0:
        return points, sources
    ids = np.floor(points / voxel).astype(np.int64)
    _, first = np.unique(ids, axis=0, return_index=True)
    first = np.sort(first)
    points = points[first]
    sources = sources[first]
    if points.shape[0] > budget:
        pick = np.sort(rng.choice(points.shape[0], size=budget, replace=False))
        points = points[pick]
        sources = sources[pick]
    return points, sources


def _knn_scales(points, k=3, fallback=0.1):
    if points.shape[0] <= k:
        return np.full((points.shape[0], 3), fallback)
    d, _ = cKDTree(points).query(points, k=k + 1)
    mean_d = d[:, 1:].mean(axis=1)
    mean_d = np.clip(mean_d, 1e-3, 2.0)
    return np.repeat(mean_d[:, None], 3, axis=1)


def _sample_colors(points, sources, manifest):
    """Nearest-pixel color for each point, probing its source frame's camera
    first and falling back to a scan over frames; gray when never visible."""
    n = points.shape[0]
    colors = np.full((n, 3), 0.5)
    images = {}

    def image_for(fi):
        if fi not in images:
            images[fi] = scenegraph.load_image(manifest.frames[fi].cameras[0].image)
        return images[fi]

    order = list(range(0, len(manifest.frames), max(1, len(manifest.frames) // 5)))
    remaining = np.arange(n)
    probe_lists = [np.asarray(sources)] + [np.full(n, fi) for fi in order]
    filled = np.zeros(n, dtype=bool)
    for probes in probe_lists:
        if filled.all():
            break
        for fi in np.unique(probes[~filled]):
            cam = manifest.frames[int(fi)].cameras[0]
            sel = remaining[(probes == fi) & ~filled]
            if sel.size == 0:
                continue
            uv, z = geometry.project_point(points[sel], cam.extrinsic,
                                           cam.intrinsics, strict=False)
            ok = ((z > geometry.Z_NEAR)
                  & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width)
                  & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height))
            if not np.any(ok):
                continue
            img = image_for(int(fi))
            u = uv[ok, 0].astype(np.int64)
            v = uv[ok, 1].astype(np.int64)
            colors[sel[ok]] = img[v, u]
            filled[sel[ok]] = True
    return colors


def initialize_scene(decomp, manifest, config=None):
    """Build the initial GaussianScene from a decomposition result.

    One Gaussian per downsampled point: position from the point, isotropic
    scale from the mean distance to 3 neighbors, identity rotation, opacity
    0.1, SH DC from the nearest image pixel. Dynamic Gaussians anchor at the
    first frame using the aggregated dynamic cloud.
    """
    cfg = (config or TrainConfig()).validate()
    rng = np.random.default_rng(cfg.seed)
    flags = []

    s_pts, s_src = _voxel_downsample(decomp.static_points, decomp.static_sources,
                                     cfg.init_voxel, cfg.static_init_budget, rng)
    d_pts = decomp.dynamic_points[0]
    d_src = decomp.dynamic_sources[0]
    d_pts, d_src = _voxel_downsample(d_pts, d_src, cfg.init_voxel * 0.6,
                                     cfg.dynamic_init_budget, rng)

    groups = []
    for pts, src, tag in ((s_pts, s_src, "static"), (d_pts, d_src, "dynamic")):
        if pts.shape[0] == 0:
            flags.append(f"empty_{tag}_set")
            groups.append(GaussianGroup.empty())
            continue
        colors = _sample_colors(pts, src, manifest)
        groups.append(GaussianGroup.from_points(
            pts, _knn_scales(pts), rgb_to_dc(colors), opacity=cfg.init_opacity))
    scene = GaussianScene(static=groups[0], dynamic=groups[1])
    scene.init_flags = tuple(flags)
    return scene.validate()


# ---------------------------------------------------------------------------
# optimizer state
# ---------------------------------------------------------------------------

_GROUP_KEYS = ("pos", "quat", "log_scale", "opacity_logit", "sh")


class TrainerState:
    """Adam moments per parameter class plus densification accumulators."""

    def __init__(self, scene, fieldm, config):
        self.config = config
        self.adam = {}
        for grp_name, grp in (("static", scene.static), ("dynamic", scene.dynamic)):
            for key in _GROUP_KEYS:
                arr = getattr(grp, key)
                self.adam[(grp_name, key)] = {
                    "m": np.zeros_like(arr), "v": np.zeros_like(arr)}
        self.adam["sky"] = {"m": np.zeros_like(scene.sky.grid),
                            "v": np.zeros_like(scene.sky.grid)}
        self.mlp_opt = {}
        if fieldm is not None:
            for pair in range(fieldm.n_pairs):
                self.mlp_opt[pair] = nmff.AdamState(lr=config.lr_nmff)
        self.t = 0
        self.reset_densify_stats(scene)

    def reset_densify_stats(self, scene):
        n = scene.total
        self.grad_accum = np.zeros(n)
        self.grad_count = np.zeros(n)
        self.pos_grad_accum = np.zeros((n, 3))
        self.max_radius = np.zeros(n)

    def adam_step(self, key, param, grad_arr, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        st = self.adam[key]
        st["m"] = beta1 * st["m"] + (1 - beta1) * grad_arr
        st["v"] = beta2 * st["v"] + (1 - beta2) * grad_arr * grad_arr
        mhat = st["m"] / (1 - beta1 ** self.t)
        vhat = st["v"] / (1 - beta2 ** self.t)
        param -= lr * mhat / (np.sqrt(vhat) + eps)


def _frame_inputs_for_training(manifest, frame_index, train_set, rays_cache,
                               depth_cache, config):
    """Assemble FrameInputs for one training frame (camera 0)."""
    fr = manifest.frames[frame_index]
    cam = fr.cameras[0]
    if frame_index not in rays_cache:
        rays_cache[frame_index] = geometry.camera_rays(
            cam.extrinsic, cam.intrinsics, cam.width, cam.height)
    if frame_index not in depth_cache:
        pts = manifest.lidar_world(frame_index).points
        depth, valid = losses.project_lidar_depth(
            pts, cam.extrinsic, cam.intrinsics, cam.width, cam.height)
        sky = scenegraph.load_mask(cam.sky_mask) if cam.sky_mask else None
        if sky is not None:
            valid = valid & ~sky
        depth_cache[frame_index] = (depth, valid, sky)
    depth, valid, sky = depth_cache[frame_index]

    target = scenegraph.load_image(cam.image)
    nxt = frame_index + 1
    extr2 = intr2 = None
    flow_pseudo = None
    next_image = None
    if nxt < len(manifest.frames) and cam.flow_gt is not None:
        cam2 = manifest.frames[nxt].cameras[0]
        extr2, intr2 = cam2.extrinsic, cam2.intrinsics
        flow_pseudo = scenegraph.load_flow_map(cam.flow_gt).astype(np.float64)
        if nxt in train_set:
            next_image = scenegraph.load_image(cam2.image)
    return grad.FrameInputs(
        frame_index=frame_index, extrinsic=cam.extrinsic, intrinsics=cam.intrinsics,
        width=cam.width, height=cam.height, rays=rays_cache[frame_index],
        extrinsic_next=extr2, intrinsics_next=intr2, target_image=target,
        lidar_depth=depth, lidar_valid=valid, sky_mask=sky,
        flow_pseudo=flow_pseudo, next_image=next_image)


def train_step(scene, fieldm, frame_inputs, config, state):
    """One optimization transaction: forward, backward, Adam updates.

    Returns the LossReport. Aborts with NumericError on a non-finite loss or
    gradient.
    """
    state.t += 1
    _, report, fstate = grad.forward(scene, fieldm, frame_inputs, config.weights,
                                     tile_size=config.tile_size)
    if not np.isfinite(report.total):
        raise NumericError(f"non-finite loss at step {state.t}: {report}")
    grads = grad.backward(scene, fieldm, fstate)

    lr_pos = config.position_lr(state.t)
    for grp_name, grp, g in (("static", scene.static, grads.static),
                             ("dynamic", scene.dynamic, grads.dynamic)):
        if grp.count == 0:
            continue
        state.adam_step((grp_name, "pos"), grp.pos, g["pos"], lr_pos)
        state.adam_step((grp_name, "quat"), grp.quat, g["quat"], config.lr_rotation)
        state.adam_step((grp_name, "log_scale"), grp.log_scale, g["log_scale"],
                        config.lr_scale)
        state.adam_step((grp_name, "opacity_logit"), grp.opacity_logit,
                        g["opacity_logit"], config.lr_opacity)
        state.adam_step((grp_name, "sh"), grp.sh, g["sh"], config.lr_sh)
        grp.quat /= np.linalg.norm(grp.quat, axis=1, keepdims=True)
    state.adam_step("sky", scene.sky.grid, grads.sky_grid, config.lr_sky)
    if fieldm is not None:
        for pair, layers in grads.mlp.items():
            flat = [g for gw, gb in layers for g in (gw, gb)]
            params = [p for w, b in zip(fieldm.mlps[pair].weights,
                                        fieldm.mlps[pair].biases) for p in (w, b)]
            state.mlp_opt[pair].step(params, flat)

    # densification statistics
    state.grad_accum += grads.view_grad_ndc
    state.grad_count += grads.visible
    ns = scene.static.count
    state.pos_grad_accum[:ns] += grads.static["pos"]
    state.pos_grad_accum[ns:] += grads.dynamic["pos"]
    keep = fstate.proj_cache.keep
    np.maximum.at(state.max_radius, keep, fstate.prims.radius)
    return report


# ---------------------------------------------------------------------------
# densify / prune / reset
# ---------------------------------------------------------------------------

def _group_slices(scene):
    ns = scene.static.count
    return {"static": slice(0, ns), "dynamic": slice(ns, ns + scene.dynamic.count)}


def densify_and_prune(scene, state, config, scene_diag, image_width, rng):
    """Split large / clone small high-gradient Gaussians, then prune.

    Split: two children sampled inside the parent (0.8x scale). Clone:
    duplicate offset along the accumulated negative position gradient.
    Prune: opacity below threshold or screen extent above the cap. Adam
    moments follow their rows; new rows start at zero.
    """
    split_size = config.split_size_frac * scene_diag
    max_extent = config.max_screen_extent_frac * image_width
    counts = np.maximum(state.grad_count, 1.0)
    mean_grad = state.grad_accum / counts
    stats = {"split": 0, "clone": 0, "pruned": 0}

    slices = _group_slices(scene)
    headroom = config.max_gaussians - scene.total
    new_groups = {}
    for grp_name, grp in (("static", scene.static), ("dynamic", scene.dynamic)):
        sl = slices[grp_name]
        if grp.count == 0:
            new_groups[grp_name] = (grp, np.ones(0, dtype=bool))
            continue
        thr = (config.densify_grad_threshold_static if grp_name == "static"
               else config.densify_grad_threshold_dynamic)
        hot = mean_grad[sl] > thr
        big = grp.scales().max(axis=1) > split_size
        split_mask = hot & big
        clone_mask = hot & ~big
        budget = max(headroom, 0)
        n_new = np.count_nonzero(split_mask) + np.count_nonzero(clone_mask)
        if n_new > budget:
            # seeded thinning keeps growth inside the cap
            drop = _thin_mask(split_mask, clone_mask, n_new - budget, rng)
            split_mask &= ~drop
            clone_mask &= ~drop
        headroom -= np.count_nonzero(split_mask) + np.count_nonzero(clone_mask)

        children = []
        child_state_rows = []
        if np.any(split_mask):
            idx = np.flatnonzero(split_mask)
            parent = grp.select(idx)
            cov = geometry.build_covariance(parent.quat, parent.scales())
            L = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
            for _ in range(2):
                eps = rng.standard_normal((idx.size, 3))
                child = GaussianGroup(
                    pos=parent.pos + np.einsum("nij,nj->ni", L, eps),
                    quat=parent.quat.copy(),
                    log_scale=parent.log_scale + np.log(0.8),
                    opacity_logit=parent.opacity_logit.copy(),
                    sh=parent.sh.copy())
                children.append(child)
                child_state_rows.append(idx)
            stats["split"] += idx.size
        if np.any(clone_mask):
            idx = np.flatnonzero(clone_mask)
            parent = grp.select(idx)
            gdir = state.pos_grad_accum[sl][idx]
            norm = np.linalg.norm(gdir, axis=1, keepdims=True)
            gdir = np.where(norm > 1e-12, -gdir / np.maximum(norm, 1e-12), 0.0)
            offset = 0.5 * parent.scales().mean(axis=1, keepdims=True) * gdir
            clone = GaussianGroup(pos=parent.pos + offset, quat=parent.quat.copy(),
                                  log_scale=parent.log_scale.copy(),
                                  opacity_logit=parent.opacity_logit.copy(),
                                  sh=parent.sh.copy())
            children.append(clone)
            child_state_rows.append(idx)
            stats["clone"] += idx.size

        # prune: split parents go away, low opacity and huge splats go away
        prune_mask = ((grp.opacities() < config.prune_opacity)
                      | (state.max_radius[sl] > max_extent))
        keep_mask = ~split_mask & ~prune_mask
        stats["pruned"] += int(np.count_nonzero(~split_mask & prune_mask))

        merged = grp.select(np.flatnonzero(keep_mask))
        for child in children:
            merged = merged.concat(child)
        # rebuild Adam rows: kept rows keep their moments, children start cold
        for key in _GROUP_KEYS:
            st = state.adam[(grp_name, key)]
            kept_m = st["m"][keep_mask]
            kept_v = st["v"][keep_mask]
            pad = merged.count - kept_m.shape[0]
            shape = (pad,) + kept_m.shape[1:]
            st["m"] = np.concatenate([kept_m, np.zeros(shape)])
            st["v"] = np.concatenate([kept_v, np.zeros(shape)])
        new_groups[grp_name] = (merged, keep_mask)

    scene.static = new_groups["static"][0]
    scene.dynamic = new_groups["dynamic"][0]
    state.reset_densify_stats(scene)
    return stats


def _thin_mask(split_mask, clone_mask, n_drop, rng):
    cand = np.flatnonzero(split_mask | clone_mask)
    drop = np.zeros_like(split_mask)
    if n_drop >= cand.size:
        drop[cand] = True
    else:
        drop[rng.choice(cand, size=n_drop, replace=False)] = True
    return drop


def reset_opacity(scene, state, floor=0.01):
    """Clamp every opacity to at most `floor` and clear its Adam moments."""
    cap = float(logit(floor))
    for grp_name, grp in (("static", scene.static), ("dynamic", scene.dynamic)):
        if grp.count == 0:
            continue
        grp.opacity_logit = np.minimum(grp.opacity_logit, cap)
        st = state.adam[(grp_name, "opacity_logit")]
        st["m"][:] = 0.0
        st["v"][:] = 0.0


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def train(scene, fieldm, manifest, config, train_frames=None, telemetry=None,
          log_every=1):
    """Run the full optimization; returns the list of LossReports.

    telemetry: optional callable(dict) invoked per step with a JSON-safe
    record (used for the JSONL stream).
    """
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    if train_frames is None:
        train_frames = list(range(len(manifest.frames)))
    train_set = set(train_frames)
    rays_cache, depth_cache, input_cache = {}, {}, {}
    lo, hi = manifest.scene_bounds
    scene_diag = float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))
    image_width = manifest.frames[0].cameras[0].width

    state = TrainerState(scene, fieldm, cfg)
    reports = []
    for step in range(1, cfg.iterations + 1):
        fi_idx = train_frames[rng.integers(len(train_frames))]
        if fi_idx not in input_cache:
            input_cache[fi_idx] = _frame_inputs_for_training(
                manifest, fi_idx, train_set, rays_cache, depth_cache, cfg)
        report = train_step(scene, fieldm, input_cache[fi_idx], cfg, state)
        reports.append(report)
        if telemetry is not None and step % log_every == 0:
            telemetry({
                "step": step, "frame": fi_idx,
                "l_image": report.image, "l_depth": report.depth,
                "l_flow": report.flow, "l_sky": report.sky, "l_reg": report.reg,
                "total": report.total, "n_static": scene.static.count,
                "n_dynamic": scene.dynamic.count,
            })
        in_densify_window = (step >= cfg.densify_start
                             and step <= cfg.densify_stop_frac * cfg.iterations)
        if in_densify_window and step % cfg.densify_interval == 0:
            densify_and_prune(scene, state, cfg, scene_diag, image_width, rng)
        if step % cfg.opacity_reset_interval == 0 and step < cfg.iterations:
            reset_opacity(scene, state)
    return reports


# ---------------------------------------------------------------------------
# checkpoints (SFCK)
# ---------------------------------------------------------------------------

def save_checkpoint(scene, fieldm, path, config=None, extra=None):
    """Binary scene + field snapshot: magic SFCK, version, JSON header, arrays."""
    arrays = {}
    for grp_name, grp in (("static", scene.static), ("dynamic", scene.dynamic)):
        for key in _GROUP_KEYS:
            arrays[f"{grp_name}.{key}"] = np.asarray(getattr(grp, key))
    arrays["sky.grid"] = scene.sky.grid
    header = {
        "canonical_frame": scene.canonical_frame,
        "arrays": {k: {"shape": list(v.shape), "dtype": "<f8"} for k, v in arrays.items()},
        "has_field": fieldm is not None,
        "config": asdict(config) if config is not None else None,
        "extra": extra or {},
    }
    blob = json.dumps(header, default=float).encode()
    with open(path, "wb") as f:
        f.write(SFCK_MAGIC)
        f.write(struct.pack("<II", _SFCK_VERSION, len(blob)))
        f.write(blob)
        for k in sorted(arrays):
            f.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())
        if fieldm is not None:
            nmff.dump_field(f, fieldm)


def load_checkpoint(path):
    """Returns (GaussianScene, MotionFlowField | None, header dict)."""
    raw = open(path, "rb").read()
    if raw[:4] != SFCK_MAGIC:
        raise FormatError(f"{path}: not an SFCK checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _SFCK_VERSION:
        raise FormatError(f"{path}: unsupported SFCK version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode())
    pos = 12 + hlen
    arrays = {}
    for k in sorted(header["arrays"]):
        meta = header["arrays"][k]
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
        pos += count * 8
        arrays[k] = arr.reshape(meta["shape"]).copy()
    def grp(name):
        return GaussianGroup(pos=arrays[f"{name}.pos"], quat=arrays[f"{name}.quat"],
                             log_scale=arrays[f"{name}.log_scale"],
                             opacity_logit=arrays[f"{name}.opacity_logit"],
                             sh=arrays[f"{name}.sh"])
    from .rasterizer import SkyModel
    scene = GaussianScene(static=grp("static"), dynamic=grp("dynamic"),
                          sky=SkyModel(arrays["sky.grid"]),
                          canonical_frame=header["canonical_frame"])
    fieldm = nmff.parse_field(raw[pos:], where=str(path)) if header["has_field"] else None
    return scene, fieldm, header
