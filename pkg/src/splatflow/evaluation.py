"""Rendering for evaluation and the metric suite (PSNR/SSIM, flow EPE, depth
RMSE, decomposition F1).

Protocol notes, fixed here and mirrored in the eval JSON schema:

* depth RMSE compares opacity-normalized rendered depth (expected depth given
  a surface hit) against GT depth, over pixels with GT geometry and rendered
  opacity > 0.5;
* flow EPE is measured over pixels with GT geometry (rendered flow is zero
  where nothing projects, and sky flow at infinity is not scene flow);
* the train/test split holds out every k-th frame (k = 4 by default).
"""

from pathlib import Path

import numpy as np

from . import geometry, grad, losses, scenegraph

EVAL_SCHEMA_VERSION = 1


def split_frames(n_frames, holdout_every=4):
    """(train_indices, heldout_indices); holdout_every=0 keeps everything."""
    if holdout_every and holdout_every > 0:
        held = list(range(0, n_frames, holdout_every))
    else:
        held = []
    train = [i for i in range(n_frames) if i not in set(held)]
    return train, held


def render_view(scene, fieldm, manifest, frame_index, camera_index=0,
                timestamp=None, with_flow=True, tile_size=16):
    """Render RGB/depth/flow/opacity at a manifest camera and a timestamp.

    `timestamp` defaults to the frame's own; an arbitrary timestamp warps
    dynamic Gaussians through the nearest enclosing frame pair with the
    linear fraction of that pair's motion.
    """
    cam = manifest.frames[frame_index].cameras[camera_index]
    ts = manifest.timestamps
    if timestamp is None:
        base, frac = frame_index, 0.0
    else:
        base = int(np.clip(np.searchsorted(ts, timestamp, side="right") - 1,
                           0, len(ts) - 1))
        if base >= len(ts) - 1:
            base, frac = len(ts) - 1, 0.0
        else:
            frac = float((timestamp - ts[base]) / (ts[base + 1] - ts[base]))

    extr2 = intr2 = None
    if with_flow and frame_index + 1 < len(manifest.frames):
        cam2 = manifest.frames[frame_index + 1].cameras[camera_index]
        extr2, intr2 = cam2.extrinsic, cam2.intrinsics
    fi = grad.FrameInputs(
        frame_index=base, extrinsic=cam.extrinsic, intrinsics=cam.intrinsics,
        width=cam.width, height=cam.height,
        rays=geometry.camera_rays(cam.extrinsic, cam.intrinsics, cam.width, cam.height),
        extrinsic_next=extr2, intrinsics_next=intr2, time_fraction=frac)
    out, _, _ = grad.forward(scene, fieldm, fi, weights=None, tile_size=tile_size)
    return out


def flow_epe(rendered_flow, gt_flow, valid_mask):
    d = rendered_flow - gt_flow
    epe = np.sqrt(np.sum(d * d, axis=-1))
    if not np.any(valid_mask):
        return float("nan")
    return float(np.mean(epe[valid_mask]))


def depth_rmse(rendered_depth, rendered_opacity, gt_depth, min_opacity=0.5):
    valid = (gt_depth > 0) & (rendered_opacity > min_opacity)
    if not np.any(valid):
        return float("nan")
    norm = rendered_depth[valid] / rendered_opacity[valid]
    return float(np.sqrt(np.mean((norm - gt_depth[valid]) ** 2)))


def masked_psnr(a, b, mask):
    if not np.any(mask):
        return float("nan")
    mse = float(np.mean((a[mask] - b[mask]) ** 2))
    if mse < 1e-10:
        return losses.PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), losses.PSNR_CAP)


def decomposition_f1(pred_labels, gt_labels):
    """F1 of the dynamic class over concatenated per-frame label arrays."""
    pred = np.concatenate([np.asarray(p, dtype=bool) for p in pred_labels])
    gt = np.concatenate([np.asarray(g, dtype=bool) for g in gt_labels])
    tp = np.count_nonzero(pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    fn = np.count_nonzero(~pred & gt)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return float(2.0 * precision * recall / (precision + recall))


def _gt_paths(manifest, frame_index):
    root = Path(manifest.root)
    return {
        "depth": root / "gt" / f"gt_depth_{frame_index:03d}.bin",
        "labels": root / "gt" / f"labels_{frame_index:03d}.bin",
        "dyn_mask": root / "gt" / f"dyn_mask_{frame_index:03d}.png",
    }


def evaluate_views(scene, fieldm, manifest, frame_indices, camera_index=0,
                   tile_size=16):
    """Per-view PSNR/SSIM plus flow EPE, depth RMSE, and dynamic-region PSNR
    where the GT bundle provides references. Returns the eval schema dict."""
    views = []
    for fi in frame_indices:
        cam = manifest.frames[fi].cameras[camera_index]
        out = render_view(scene, fieldm, manifest, fi, camera_index,
                          tile_size=tile_size)
        target = scenegraph.load_image(cam.image)
        rec = {
            "frame": fi,
            "camera": camera_index,
            "psnr": losses.psnr(out.color, target),
            "ssim": losses.ssim(out.color, target),
        }
        gtp = _gt_paths(manifest, fi)
        geom_valid = None
        if gtp["depth"].exists():
            gt_depth = scenegraph.load_depth(gtp["depth"], cam.height, cam.width)
            geom_valid = gt_depth > 0
            rec["depth_rmse"] = depth_rmse(out.depth, out.opacity, gt_depth)
        if cam.flow_gt is not None and fi + 1 < len(manifest.frames):
            gt_flow = scenegraph.load_flow_map(cam.flow_gt).astype(np.float64)
            valid = geom_valid
            if valid is None:
                valid = ~scenegraph.load_mask(cam.sky_mask) if cam.sky_mask \
                    else np.ones(gt_flow.shape[:2], dtype=bool)
            rec["flow_epe"] = flow_epe(out.flow, gt_flow, valid)
        if gtp["dyn_mask"].exists():
            dyn = scenegraph.load_mask(gtp["dyn_mask"])
            rec["dynamic_psnr"] = masked_psnr(out.color, target, dyn)
        views.append(rec)

    def mean_of(key):
        vals = [v[key] for v in views if key in v and np.isfinite(v[key])]
        return float(np.mean(vals)) if vals else None

    return {
        "schema_version": EVAL_SCHEMA_VERSION,
        "views": views,
        "mean_psnr": mean_of("psnr"),
        "mean_ssim": mean_of("ssim"),
        "mean_flow_epe": mean_of("flow_epe"),
        "mean_depth_rmse": mean_of("depth_rmse"),
        "mean_dynamic_psnr": mean_of("dynamic_psnr"),
    }


def load_gt_labels(manifest, frame_index):
    p = _gt_paths(manifest, frame_index)["labels"]
    return np.fromfile(p, dtype=np.uint8).astype(bool)
