"""Neural motion flow field: per-frame-pair coordinate MLPs, Chamfer-distance
pretraining on LiDAR sequences, static/dynamic decomposition, point
aggregation, and Gaussian warping.

Each consecutive timestamp pair owns one 8-layer ReLU MLP (hidden width 128)
mapping a normalized 3D position to a translation (m) and a rotation delta
(axis-angle, rad). The final layer is zero-initialized so the untrained field
is exactly the identity warp.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .errors import FormatError, ValidationError
from .scenegraph import PointCloud

HIDDEN = 128
N_LAYERS = 8
SFMF_MAGIC = b"SFMF"
_SFMF_VERSION = 1


class FlowMLP:
    """8 fully-connected layers (3 -> 128 -> ... -> 6), ReLU on all but the last.

    Outputs split as (dx, dy, dz, wx, wy, wz): translation in meters plus an
    axis-angle rotation delta in radians.
    """

    def __init__(self, rng=None, zero_last=True):
        self.weights = []
        self.biases = []
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [3] + [HIDDEN] * (N_LAYERS - 1) + [6]
        for i in range(N_LAYERS):
            fan_in = dims[i]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(dims[i + 1], fan_in))
            b = np.zeros(dims[i + 1])
            if zero_last and i == N_LAYERS - 1:
                w[:] = 0.0
            self.weights.append(w)
            self.biases.append(b)

    @property
    def layer_shapes(self):
        return [w.shape for w in self.weights]

    def forward(self, x, want_cache=False):
        """x: (N, 3) normalized coords -> (out (N, 6), cache or None).

        Runs in the dtype of the stored weights (float64 for the training
        pipeline; pretraining temporarily casts to float32 for speed).
        """
        h = np.asarray(x, dtype=self.weights[0].dtype)
        cache = [h] if want_cache else None
        for i in range(N_LAYERS):
            z = h @ self.weights[i].T + self.biases[i]
            h = np.maximum(z, 0.0) if i < N_LAYERS - 1 else z
            if want_cache:
                cache.append(h)
        return h, cache

    def astype(self, dtype):
        self.weights = [w.astype(dtype) for w in self.weights]
        self.biases = [b.astype(dtype) for b in self.biases]
        return self

    def backward(self, cache, d_out):
        """VJP through the cached forward; returns (d_x, [(dW, db) per layer])."""
        grads = [None] * N_LAYERS
        g = np.asarray(d_out, dtype=self.weights[0].dtype)
        for i in range(N_LAYERS - 1, -1, -1):
            h_in = cache[i]
            if i < N_LAYERS - 1:
                g = g * (cache[i + 1] > 0.0)  # ReLU mask from the post-activation
            grads[i] = (g.T @ h_in, g.sum(axis=0))
            g = g @ self.weights[i]
        return g, grads

    def param_count(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass
class MotionFlowField:
    """Ordered chain of per-pair FlowMLPs plus the scene normalization."""
    mlps: list
    bounds_center: np.ndarray
    bounds_half: np.ndarray
    timestamps: np.ndarray = field(default_factory=lambda: np.array([]))

    @classmethod
    def create(cls, manifest, seed=0, pad=0.05):
        lo, hi = manifest.scene_bounds
        center = 0.5 * (np.asarray(lo) + np.asarray(hi))
        half = 0.5 * (np.asarray(hi) - np.asarray(lo)) * (1.0 + pad)
        rng = np.random.default_rng(seed)
        n_pairs = len(manifest.frames) - 1
        mlps = [FlowMLP(rng=rng) for _ in range(n_pairs)]
        return cls(mlps=mlps, bounds_center=center, bounds_half=half,
                   timestamps=manifest.timestamps)

    @property
    def n_pairs(self):
        return len(self.mlps)

    def normalize(self, pts):
        return (np.asarray(pts, dtype=np.float64) - self.bounds_center) / self.bounds_half

    def eval_raw(self, pair_index, points, want_cache=False):
        """MLP output at world points: (translation (N,3), axis_angle (N,3), cache)."""
        if not (0 <= pair_index < self.n_pairs):
            raise ValidationError(f"pair index {pair_index} out of range [0, {self.n_pairs})")
        out, cache = self.mlps[pair_index].forward(self.normalize(points), want_cache)
        return out[:, :3], out[:, 3:], cache

    def flow_eval(self, pair_index, points):
        """Per-point motion for one pair: (delta_mu (N,3) m, delta_q (N,4))."""
        t, w, _ = self.eval_raw(pair_index, points)
        return t, geometry.quat_from_axis_angle(w)


# ---------------------------------------------------------------------------
# Chamfer distance: KD-tree fast path + brute-force oracle
# ---------------------------------------------------------------------------

def _nn_sq(query, ref_tree, ref_pts, workers=1):
    _, idx = ref_tree.query(query, k=1, workers=workers)
    d = query - ref_pts[idx]
    return np.sum(d * d, axis=1), idx


def _scatter_add_rows(target, idx, values):
    """target[idx] += values with repeated indices, via bincount (np.add.at is
    far too slow in the pretraining inner loop)."""
    n = target.shape[0]
    for c in range(target.shape[1]):
        target[:, c] += np.bincount(idx, weights=values[:, c], minlength=n)


def chamfer(p1, p2):
    """Bidirectional Chamfer distance (sum of squared NN distances, m^2).

    Exactly equals the O(N^2) brute force: the KD-tree supplies indices and
    the distances are recomputed with the same arithmetic.
    """
    a = _cloud_points(p1)
    b = _cloud_points(p2)
    d_ab, _ = _nn_sq(a, cKDTree(b), b)
    d_ba, _ = _nn_sq(b, cKDTree(a), a)
    return float(np.sum(d_ba) + np.sum(d_ab))


def chamfer_brute(p1, p2):
    """O(N^2) reference implementation (the oracle chamfer is tested against)."""
    a = _cloud_points(p1)
    b = _cloud_points(p2)
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    return float(np.sum(np.min(d2, axis=0)) + np.sum(np.min(d2, axis=1)))


def _cloud_points(p):
    pts = p.points if isinstance(p, PointCloud) else np.asarray(p, dtype=np.float64)
    if pts.shape[0] < 1:
        raise ValidationError("chamfer requires nonempty clouds")
    return pts


# ---------------------------------------------------------------------------
# ground removal
# ---------------------------------------------------------------------------

def ransac_ground_plane(points, dist_eps=0.15, iters=64, min_frac=0.2,
                        normal_z_min=0.9, seed=0):
    """Boolean mask of ground points via RANSAC plane fit.

    Only near-horizontal planes count (|normal_z| >= normal_z_min) so walls
    survive. Returns an all-False mask when no plane explains min_frac of the
    cloud.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n < 16:
        return np.zeros(n, dtype=bool)
    rng = np.random.default_rng(seed)
    best_count = 0
    best_mask = np.zeros(n, dtype=bool)
    for _ in range(iters):
        i, j, k = rng.choice(n, size=3, replace=False)
        normal = np.cross(pts[j] - pts[i], pts[k] - pts[i])
        norm = np.linalg.norm(normal)
        if norm < 1e-9:
            continue
        normal /= norm
        if abs(normal[2]) < normal_z_min:
            continue
        dist = np.abs((pts - pts[i]) @ normal)
        mask = dist < dist_eps
        count = np.count_nonzero(mask)
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_count < min_frac * n:
        return np.zeros(n, dtype=bool)
    return best_mask


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    lr: float = 8e-3
    max_iters: int = 4000        # hard cap per pair
    total_iters: int = 4000      # budget across the whole sequence (0 = off)
    first_pair_iters: int = 600  # cold-start allowance for the first pair
    early_stop_window: int = 100
    early_stop_tol: float = 1e-6
    smooth_weight: float = 0.1
    smooth_k: int = 8
    ground_eps: float = 0.15
    max_points: int = 4096
    voxel: float = 0.0           # optional thinning of redundant returns
    trunc_dist: float = 1.0      # ignore correspondences farther than this (m);
                                 # guards against FOV-edge phantom matches. 0 = off
    warm_start: bool = True
    workers: int = 2
    dtype: type = np.float32     # fit in single precision, store back as f64
    seed: int = 0


def pretrain(fieldm, manifest, config=None, progress=None):
    """Fit each pair MLP by bidirectional Chamfer + kNN smoothness.

    Ground points are removed before fitting. Early-stops when the best loss
    stops improving by early_stop_tol over early_stop_window iterations.
    Returns {"loss_curves": [...], "iters": [...]} with one raw curve per pair.
    """
    cfg = config or PretrainConfig()
    rng = np.random.default_rng(cfg.seed)
    clouds = []
    for i in range(len(manifest.frames)):
        pts = manifest.lidar_world(i).points
        ground = ransac_ground_plane(pts, dist_eps=cfg.ground_eps, seed=cfg.seed)
        pts = pts[~ground]
        if cfg.voxel > 0:
            ids = np.floor(pts / cfg.voxel).astype(np.int64)
            _, first = np.unique(ids, axis=0, return_index=True)
            pts = pts[np.sort(first)]
        if pts.shape[0] > cfg.max_points:
            pick = np.sort(rng.choice(pts.shape[0], size=cfg.max_points, replace=False))
            pts = pts[pick]
        clouds.append(pts)

    curves = []
    iters_used = []
    prev_opt = None
    n_pairs = fieldm.n_pairs
    budget = cfg.total_iters if cfg.total_iters else n_pairs * cfg.max_iters
    for pair in range(n_pairs):
        if cfg.warm_start and pair > 0:
            src = fieldm.mlps[pair - 1]
            dst = fieldm.mlps[pair]
            dst.weights = [w.copy() for w in src.weights]
            dst.biases = [b.copy() for b in src.biases]
        # the cold first pair gets a larger allowance; the rest share what is
        # left so the whole sequence stays inside the total budget
        remaining_pairs = n_pairs - pair
        share = max(budget // remaining_pairs, 50)
        if pair == 0 and n_pairs > 1:
            share = max(share, min(cfg.first_pair_iters, budget - 50 * (n_pairs - 1)))
        cap = min(cfg.max_iters, share)
        curve, used, prev_opt = _fit_pair(fieldm, pair, clouds[pair],
                                          clouds[pair + 1], cfg,
                                          prev_opt if cfg.warm_start else None,
                                          max_iters=cap)
        budget = max(budget - used, 0)
        curves.append(curve)
        iters_used.append(used)
        if progress is not None:
            progress(pair, curve[-1] if curve else float("nan"), used)
    return {"loss_curves": curves, "iters": iters_used}


def _fit_pair(fieldm, pair, src, dst, cfg, warm_opt=None, max_iters=None):
    mlp = fieldm.mlps[pair]
    max_iters = cfg.max_iters if max_iters is None else max_iters
    if src.shape[0] < 2 or dst.shape[0] < 2:
        return [0.0], 0, None
    mlp.astype(cfg.dtype)
    src = src.astype(cfg.dtype)
    dst = dst.astype(cfg.dtype)
    dst_tree = cKDTree(dst)
    k = min(cfg.smooth_k + 1, src.shape[0])
    _, knn = cKDTree(src).query(src, k=k, workers=cfg.workers)
    knn = knn[:, 1:]  # drop self
    knn_flat = knn.ravel()
    x_norm = fieldm.normalize(src).astype(cfg.dtype)
    n_src = src.shape[0]
    n_total = n_src + dst.shape[0]

    opt = AdamState(lr=cfg.lr)
    if warm_opt is not None and warm_opt.m is not None:
        # consecutive motions are similar: carrying the moments over avoids the
        # fresh-Adam transient that would otherwise re-disturb the warm start
        opt.m = [m.copy() for m in warm_opt.m]
        opt.v = [v.copy() for v in warm_opt.v]
        opt.t = warm_opt.t
    params = [p for w, b in zip(mlp.weights, mlp.biases) for p in (w, b)]
    best = np.inf
    best_at = 0
    curve = []
    it = 0
    for it in range(1, max_iters + 1):
        out, cache = mlp.forward(x_norm, want_cache=True)
        t = out[:, :3]
        warped = src + t

        d_fwd, nn_fwd = _nn_sq(warped, dst_tree, dst, workers=cfg.workers)
        warped_tree = cKDTree(warped)
        d_bwd, idx_bwd = _nn_sq(dst, warped_tree, warped, workers=cfg.workers)
        if cfg.trunc_dist > 0:
            lim = cfg.trunc_dist * cfg.trunc_dist
            keep_fwd = d_fwd <= lim
            keep_bwd = d_bwd <= lim
            d_fwd = d_fwd * keep_fwd
            d_bwd = d_bwd * keep_bwd
        else:
            keep_fwd = keep_bwd = None
        cd = (np.sum(d_fwd) + np.sum(d_bwd)) / n_total

        diff = t[:, None, :] - t[knn]          # (N, k, 3)
        smooth = np.mean(np.sum(diff ** 2, axis=-1))
        loss = cd + cfg.smooth_weight * smooth
        curve.append(float(loss))

        if loss < best - cfg.early_stop_tol:
            best = loss
            best_at = it
        elif it - best_at >= cfg.early_stop_window:
            break

        # gradients w.r.t. warped positions (correspondences fixed per iter)
        g_warp = 2.0 * (warped - dst[nn_fwd])
        bwd_vec = 2.0 * (warped[idx_bwd] - dst)
        if keep_fwd is not None:
            g_warp *= keep_fwd[:, None]
            bwd_vec *= keep_bwd[:, None]
        _scatter_add_rows(g_warp, idx_bwd, bwd_vec)
        g_t = g_warp / n_total
        # smoothness gradient
        coeff = 2.0 / (diff.shape[0] * diff.shape[1])
        g_sm = coeff * np.sum(diff, axis=1)
        _scatter_add_rows(g_sm, knn_flat, -coeff * diff.reshape(-1, 3))
        g_t += cfg.smooth_weight * g_sm

        d_out = np.zeros((n_src, 6), dtype=cfg.dtype)
        d_out[:, :3] = g_t
        _, grads = mlp.backward(cache, d_out)
        flat = [g for gw, gb in grads for g in (gw, gb)]
        opt.step(params, flat)
    mlp.astype(np.float64)
    return curve, it, opt


class AdamState:
    """Minimal Adam over a list of ndarrays, deterministic and in-place."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params, grads, lr=None):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# decomposition and aggregation
# ---------------------------------------------------------------------------

@dataclass
class DecompositionResult:
    labels: list               # per frame, bool array: True = dynamic
    static_points: np.ndarray  # merged static cloud (world)
    dynamic_points: list       # per timestamp: aggregated dynamic cloud (world)
    static_sources: np.ndarray  # frame index each merged static point came from
    dynamic_sources: list      # per timestamp: source frame of each point


def decompose(fieldm, manifest, tau=0.05, ground_eps=0.15, seed=0):
    """Label each point static/dynamic by predicted per-pair flow magnitude.

    Points live in world coordinates, so ego-motion is already compensated;
    a point is dynamic iff its predicted motion over its frame's pair exceeds
    tau (meters). Ground points are labeled static directly (the field is not
    fitted on them). Static points merge across frames; dynamic points are
    aggregated to every timestamp by flow chaining.
    """
    n = len(manifest.frames)
    labels = []
    per_frame_pts = []
    for i in range(n):
        pts = manifest.lidar_world(i).points
        per_frame_pts.append(pts)
        ground = ransac_ground_plane(pts, dist_eps=ground_eps, seed=seed)
        pair = min(i, fieldm.n_pairs - 1)
        t, _, _ = fieldm.eval_raw(pair, pts)
        dyn = (np.linalg.norm(t, axis=1) > tau) & ~ground
        labels.append(dyn)

    static_parts = [p[~l] for p, l in zip(per_frame_pts, labels)]
    static_sources = np.concatenate(
        [np.full(p.shape[0], i) for i, p in enumerate(static_parts)])
    static_points = np.concatenate(static_parts, axis=0)

    dyn_clouds = [(i, p[l]) for i, (p, l) in enumerate(zip(per_frame_pts, labels))
                  if np.any(l)]
    dynamic_points = []
    dynamic_sources = []
    for target in range(n):
        if dyn_clouds:
            agg, src = _aggregate(fieldm, dyn_clouds, target)
        else:
            agg, src = np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
        dynamic_points.append(agg)
        dynamic_sources.append(src)
    return DecompositionResult(labels=labels, static_points=static_points,
                               dynamic_points=dynamic_points,
                               static_sources=static_sources,
                               dynamic_sources=dynamic_sources)


def aggregate_points(fieldm, clouds, target_index):
    """Warp (frame_index, points) clouds to a common timestamp and concatenate.

    Forward in time chains the pair MLPs (Euler steps); backward in time uses
    the first-order Euler inverse x - t(x) of each pair.
    """
    agg, _ = _aggregate(fieldm, clouds, target_index)
    return PointCloud(points=agg, frame_tag="world") if agg.shape[0] else agg


def _aggregate(fieldm, clouds, target_index):
    parts = []
    sources = []
    for start, pts in clouds:
        p = np.asarray(pts, dtype=np.float64)
        if p.shape[0] == 0:
            continue
        if start <= target_index:
            for pair in range(start, target_index):
                t, _, _ = fieldm.eval_raw(pair, p)
                p = p + t
        else:
            for pair in range(start - 1, target_index - 1, -1):
                t, _, _ = fieldm.eval_raw(pair, p)
                p = p - t
        parts.append(p)
        sources.append(np.full(p.shape[0], start))
    if not parts:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    return np.concatenate(parts, axis=0), np.concatenate(sources)


def warp_gaussians(fieldm, mu, quat, start_index, end_index, fraction=0.0):
    """Warp Gaussian centers/rotations from frame start_index to end_index.

    Chains consecutive pair MLPs; scale, opacity, and SH stay untouched by
    construction. `fraction` applies that portion of one extra pair's motion
    past end_index (used for rendering at interpolated timestamps).
    Returns (mu_out, quat_out).
    """
    if end_index < start_index:
        raise ValidationError("warp_gaussians only chains forward in time")
    mu = np.asarray(mu, dtype=np.float64).copy()
    quat = np.asarray(quat, dtype=np.float64).copy()
    for pair in range(start_index, end_index):
        t, w, _ = fieldm.eval_raw(pair, mu)
        mu = mu + t
        quat = geometry.quat_multiply(quat, geometry.quat_from_axis_angle(w))
    if fraction > 0.0:
        t, w, _ = fieldm.eval_raw(end_index, mu)
        mu = mu + fraction * t
        quat = geometry.quat_multiply(quat, geometry.quat_from_axis_angle(fraction * w))
    return mu, quat


# ---------------------------------------------------------------------------
# checkpoint IO (SFMF)
# ---------------------------------------------------------------------------

def dump_field(fobj, fieldm):
    """Write the SFMF stream (magic, header, little-endian float32 weights)."""
    header = {
        "n_mlps": fieldm.n_pairs,
        "layer_shapes": [list(map(list, m.layer_shapes)) for m in fieldm.mlps],
        "bounds_center": fieldm.bounds_center.tolist(),
        "bounds_half": fieldm.bounds_half.tolist(),
        "timestamps": np.asarray(fieldm.timestamps).tolist(),
    }
    blob = json.dumps(header).encode()
    fobj.write(SFMF_MAGIC)
    fobj.write(struct.pack("<II", _SFMF_VERSION, len(blob)))
    fobj.write(blob)
    for m in fieldm.mlps:
        for w, b in zip(m.weights, m.biases):
            fobj.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fobj.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def save_field(fieldm, path):
    with open(path, "wb") as f:
        dump_field(f, fieldm)


def parse_field(raw, where="<bytes>"):
    """Decode an SFMF byte string into a MotionFlowField."""
    if raw[:4] != SFMF_MAGIC:
        raise FormatError(f"{where}: not an SFMF checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _SFMF_VERSION:
        raise FormatError(f"{where}: unsupported SFMF version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode())
    pos = 12 + hlen
    mlps = []
    for shapes in header["layer_shapes"]:
        mlp = FlowMLP(zero_last=True)
        ws, bs = [], []
        for (rows, cols) in shapes:
            w = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=pos)
            pos += rows * cols * 4
            b = np.frombuffer(raw, dtype="<f4", count=rows, offset=pos)
            pos += rows * 4
            ws.append(w.reshape(rows, cols).astype(np.float64))
            bs.append(b.astype(np.float64))
        mlp.weights, mlp.biases = ws, bs
        mlps.append(mlp)
    return MotionFlowField(
        mlps=mlps,
        bounds_center=np.array(header["bounds_center"]),
        bounds_half=np.array(header["bounds_half"]),
        timestamps=np.array(header["timestamps"]),
    )


def load_field(path):
    return parse_field(Path(path).read_bytes(), where=str(path))
