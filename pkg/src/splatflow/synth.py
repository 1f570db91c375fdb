"""Synthetic scene generator with exact ground truth.

Scenes are dense colored point sets (planes and boxes) plus rigidly moving
objects, observed by a camera on a smooth path and a simulated LiDAR. The
generator writes a complete manifest directory:

* GT images rendered by the reference point-splat renderer (each point becomes
  a small isotropic Gaussian) composited over an analytic sky,
* exact per-pixel depth (z-buffer of the frontmost covering point) and flow
  (reprojection of that point's rigid motion; sky pixels get rotation-only
  infinite-depth flow),
* sparse LiDAR clouds from an azimuth/elevation ray grid,
* binary sky masks, per-point static/dynamic labels, and per-frame dynamic
  coverage masks.

Everything is deterministic given (spec, seed).
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels, geometry, rasterizer, scenegraph, sh
from .errors import ValidationError
from .scenegraph import CameraView, FrameRecord, PointCloud, SceneManifest


@dataclass
class SurfaceSpec:
    """A textured static surface sampled as a dense point grid."""
    kind: str                 # "plane" | "box"
    origin: tuple             # plane corner / box min corner
    axes: tuple               # plane: (u_vec, v_vec) incl. extent; box: size xyz
    spacing: float
    base_color: tuple
    wave_amp: float = 0.12
    wave_dir: tuple = (1.0, 0.7, 0.3)
    wave_len: float = 2.5


@dataclass
class DynamicObjectSpec:
    """A rigid box moving at constant velocity/angular velocity per frame."""
    size: tuple
    center: tuple             # at frame 0
    velocity: tuple           # m/frame
    angular_velocity: tuple = (0.0, 0.0, 0.0)  # rad/frame, about the center
    spacing: float = 0.04
    base_color: tuple = (0.8, 0.3, 0.2)
    wave_amp: float = 0.1
    wave_dir: tuple = (0.5, 1.0, 0.8)
    wave_len: float = 0.7


@dataclass
class LidarSpec:
    n_azimuth: int = 96
    n_elevation: int = 48
    azimuth_range: tuple = (math.radians(20.0), math.radians(160.0))
    elevation_range: tuple = (math.radians(-40.0), math.radians(15.0))
    max_range: float = 40.0
    offset: tuple = (0.0, 0.0, 0.3)   # sensor position relative to the camera


@dataclass
class SynthSpec:
    name: str
    statics: list
    dynamics: list
    frames: int
    width: int = 384
    height: int = 256
    focal: float = 340.0
    cam_eyes: list = field(default_factory=list)     # per frame (3,)
    cam_targets: list = field(default_factory=list)  # per frame (3,)
    lidar: LidarSpec = field(default_factory=LidarSpec)
    point_noise: float = 0.0
    image_noise: float = 0.0
    sky_horizon: tuple = (0.75, 0.82, 0.92)
    sky_zenith: tuple = (0.35, 0.50, 0.85)
    gt_splat_factor: float = 0.7   # GT Gaussian scale = factor * point spacing
    gt_opacity: float = 0.95
    fps: float = 10.0

    def __post_init__(self):
        if self.frames < 2:
            raise ValidationError("a scene needs at least 2 frames")
        for obj in self.dynamics:
            if len(obj.velocity) != 3:
                raise ValidationError("dynamic motions must be rigid 3D velocities")


# ---------------------------------------------------------------------------
# geometry sampling
# ---------------------------------------------------------------------------

def _plane_points(origin, u_vec, v_vec, spacing):
    o = np.asarray(origin, dtype=np.float64)
    u = np.asarray(u_vec, dtype=np.float64)
    v = np.asarray(v_vec, dtype=np.float64)
    nu = max(int(np.linalg.norm(u) / spacing), 2)
    nv = max(int(np.linalg.norm(v) / spacing), 2)
    su, sv = np.meshgrid(np.linspace(0, 1, nu), np.linspace(0, 1, nv))
    return (o + su.reshape(-1, 1) * u + sv.reshape(-1, 1) * v)


def _box_points(origin, size, spacing):
    o = np.asarray(origin, dtype=np.float64)
    s = np.asarray(size, dtype=np.float64)
    faces = []
    ex, ey, ez = np.eye(3) * s
    for axis in range(3):
        u = [ex, ey, ez][(axis + 1) % 3]
        v = [ex, ey, ez][(axis + 2) % 3]
        n = [ex, ey, ez][axis]
        faces.append(_plane_points(o, u, v, spacing))
        faces.append(_plane_points(o + n, u, v, spacing))
    return np.concatenate(faces, axis=0)


def _surface_color(points, base, amp, direction, wavelength):
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    phase = np.sin(2.0 * np.pi * (points @ d) / wavelength)
    c = np.asarray(base, dtype=np.float64) * (1.0 + amp * phase[:, None])
    return np.clip(c, 0.02, 0.98)


@dataclass
class SceneBuild:
    """Sampled geometry for one (spec, seed): the single source of GT truth."""
    spec: SynthSpec
    static_points: np.ndarray
    static_colors: np.ndarray
    static_spacing: np.ndarray
    dyn_points0: list        # per object, sampled at frame 0, world coords
    dyn_colors: list
    dyn_spacing: list
    bounds: tuple

    def dynamic_transform(self, obj_index, frame):
        """Rigid (R, t, center) of object `obj_index` at integer frame."""
        obj = self.spec.dynamics[obj_index]
        w = np.asarray(obj.angular_velocity, dtype=np.float64) * frame
        R = geometry.quat_to_rotmat(geometry.quat_from_axis_angle(w))
        c0 = np.asarray(obj.center, dtype=np.float64)
        t = c0 + np.asarray(obj.velocity, dtype=np.float64) * frame
        return R, t, c0

    def dynamic_points_at(self, obj_index, frame):
        R, t, c0 = self.dynamic_transform(obj_index, frame)
        p0 = self.dyn_points0[obj_index]
        return (p0 - c0) @ R.T + t

    def all_points_at(self, frame):
        pts = [self.static_points]
        cols = [self.static_colors]
        spc = [self.static_spacing]
        dyn_flag = [np.zeros(self.static_points.shape[0], dtype=bool)]
        for i in range(len(self.dyn_points0)):
            p = self.dynamic_points_at(i, frame)
            pts.append(p)
            cols.append(self.dyn_colors[i])
            spc.append(self.dyn_spacing[i])
            dyn_flag.append(np.ones(p.shape[0], dtype=bool))
        return (np.concatenate(pts), np.concatenate(cols),
                np.concatenate(spc), np.concatenate(dyn_flag))

    def point_flow(self, frame):
        """Exact world motion frame -> frame+1 for every point of all_points_at."""
        flows = [np.zeros_like(self.static_points)]
        for i in range(len(self.dyn_points0)):
            flows.append(self.dynamic_points_at(i, frame + 1)
                         - self.dynamic_points_at(i, frame))
        return np.concatenate(flows)


def build_geometry(spec):
    static_pts = []
    static_cols = []
    static_spc = []
    for surf in spec.statics:
        if surf.kind == "plane":
            p = _plane_points(surf.origin, surf.axes[0], surf.axes[1], surf.spacing)
        elif surf.kind == "box":
            p = _box_points(surf.origin, surf.axes, surf.spacing)
        else:
            raise ValidationError(f"unknown surface kind {surf.kind!r}")
        static_pts.append(p)
        static_cols.append(_surface_color(p, surf.base_color, surf.wave_amp,
                                          surf.wave_dir, surf.wave_len))
        static_spc.append(np.full(p.shape[0], surf.spacing))
    static_points = np.concatenate(static_pts)
    static_colors = np.concatenate(static_cols)
    static_spacing = np.concatenate(static_spc)

    dyn_points0, dyn_colors, dyn_spacing = [], [], []
    for obj in spec.dynamics:
        c0 = np.asarray(obj.center, dtype=np.float64)
        origin = c0 - 0.5 * np.asarray(obj.size, dtype=np.float64)
        p = _box_points(origin, obj.size, obj.spacing)
        dyn_points0.append(p)
        dyn_colors.append(_surface_color(p, obj.base_color, obj.wave_amp,
                                         obj.wave_dir, obj.wave_len))
        dyn_spacing.append(np.full(p.shape[0], obj.spacing))

    lo = static_points.min(axis=0)
    hi = static_points.max(axis=0)
    for i in range(len(dyn_points0)):
        for f in (0, spec.frames - 1):
            c0 = np.asarray(spec.dynamics[i].center, dtype=np.float64)
            t = c0 + np.asarray(spec.dynamics[i].velocity) * f
            ext = 0.75 * np.linalg.norm(spec.dynamics[i].size)
            lo = np.minimum(lo, t - ext)
            hi = np.maximum(hi, t + ext)
    pad = 0.05 * (hi - lo)
    return SceneBuild(spec=spec, static_points=static_points,
                      static_colors=static_colors, static_spacing=static_spacing,
                      dyn_points0=dyn_points0, dyn_colors=dyn_colors,
                      dyn_spacing=dyn_spacing, bounds=(lo - pad, hi + pad))


# ---------------------------------------------------------------------------
# cameras, sky, rendering
# ---------------------------------------------------------------------------

def camera_for_frame(spec, frame):
    eye = np.asarray(spec.cam_eyes[frame], dtype=np.float64)
    target = np.asarray(spec.cam_targets[frame], dtype=np.float64)
    E = geometry.look_at_extrinsic(eye, target)
    K = (spec.focal, spec.focal, spec.width / 2.0, spec.height / 2.0)
    return E, K


def sky_color(spec, dirs):
    """Analytic GT sky: vertical gradient between horizon and zenith colors."""
    t = np.clip(dirs[..., 2], 0.0, 1.0)[..., None]
    h = np.asarray(spec.sky_horizon)
    z = np.asarray(spec.sky_zenith)
    return h + (z - h) * t


def render_gt_view(build, frame):
    """GT image, depth, flow, and sky mask for (frame, frame+1 flow)."""
    spec = build.spec
    E, K = camera_for_frame(spec, frame)
    pts, cols, spacing, _dyn = build.all_points_at(frame)

    quat = np.zeros((pts.shape[0], 4))
    quat[:, 3] = 1.0
    scales = np.repeat((spacing * spec.gt_splat_factor)[:, None], 3, axis=1)
    opac = np.full(pts.shape[0], spec.gt_opacity)
    coeffs = np.zeros((pts.shape[0], sh.N_SH_COEFFS, 3))
    coeffs[:, 0, :] = sh.rgb_to_dc(cols)
    prims, _ = rasterizer.project_gaussians(pts, quat, scales, opac, coeffs,
                                            E, K, spec.width, spec.height)
    out = rasterizer.render_tiled(prims, spec.width, spec.height)
    rays = geometry.camera_rays(E, K, spec.width, spec.height)
    image = out.color + (1.0 - out.opacity)[..., None] * sky_color(spec, rays)

    depth, index, _ = _zbuffer(build, frame, E, K)
    covered = index >= 0
    flow = _exact_flow(build, frame, index, covered, rays)
    return {
        "image": np.clip(image, 0.0, 1.0),
        "depth": np.where(covered, depth, 0.0),
        "flow": flow,
        "sky_mask": ~covered,
        "dyn_mask": _dynamic_mask(build, frame, index, covered),
    }


def _zbuffer(build, frame, E, K):
    spec = build.spec
    pts, cols, spacing, _ = build.all_points_at(frame)
    cam = geometry.transform_points(E, pts)
    z = cam[:, 2]
    front = z > geometry.Z_NEAR
    fx, fy, cx, cy = K
    uv = np.stack([fx * cam[:, 0] / np.where(front, z, 1.0) + cx,
                   fy * cam[:, 1] / np.where(front, z, 1.0) + cy], axis=-1)
    radius = np.maximum(1.3 * spacing * fx / np.maximum(z, 1e-6), 0.9)
    ids = np.flatnonzero(front)
    depth = np.full((spec.height, spec.width), np.inf)
    index = np.full((spec.height, spec.width), -1, dtype=np.int64)
    color = np.zeros((spec.height, spec.width, 3))
    _kernels.zbuffer_points(np.ascontiguousarray(uv[ids]),
                            np.ascontiguousarray(z[ids]),
                            np.ascontiguousarray(radius[ids]),
                            np.ascontiguousarray(cols[ids]),
                            spec.width, spec.height, depth, index, color)
    remap = np.full((spec.height, spec.width), -1, dtype=np.int64)
    hit = index >= 0
    remap[hit] = ids[index[hit]]
    return depth, remap, color


def _exact_flow(build, frame, index, covered, rays):
    """Per-pixel GT flow via exact reprojection of the visible surface point."""
    spec = build.spec
    E1, K1 = camera_for_frame(spec, frame)
    nxt = min(frame + 1, spec.frames - 1)
    E2, K2 = camera_for_frame(spec, nxt)
    pts1, _, _, _ = build.all_points_at(frame)
    motion = build.point_flow(frame) if frame + 1 < spec.frames else np.zeros_like(pts1)

    flow = np.zeros((spec.height, spec.width, 2))
    idx = index[covered]
    p1 = pts1[idx]
    p2 = p1 + motion[idx]
    uv1, _ = geometry.project_point(p1, E1, K1, strict=False)
    uv2, _ = geometry.project_point(p2, E2, K2, strict=False)
    flow[covered] = uv2 - uv1

    # sky: points at infinity move only with camera rotation
    skym = ~covered
    if np.any(skym):
        d = rays[skym]
        fx, fy, cx, cy = K1
        d1 = d @ E1[:3, :3].T
        u1 = np.stack([fx * d1[:, 0] / d1[:, 2] + cx, fy * d1[:, 1] / d1[:, 2] + cy], axis=-1)
        fx2, fy2, cx2, cy2 = K2
        d2 = d @ E2[:3, :3].T
        ok = d2[:, 2] > 1e-6
        u2 = np.zeros_like(u1)
        u2[ok] = np.stack([fx2 * d2[ok, 0] / d2[ok, 2] + cx2,
                           fy2 * d2[ok, 1] / d2[ok, 2] + cy2], axis=-1)
        sflow = np.where(ok[:, None], u2 - u1, 0.0)
        flow[skym] = sflow
    return flow


def _dynamic_mask(build, frame, index, covered):
    n_static = build.static_points.shape[0]
    mask = np.zeros_like(covered)
    mask[covered] = index[covered] >= n_static
    return mask


def reference_flow(build, frame):
    """GT pixel flow map for `frame` -> frame+1 (camera 0)."""
    if frame >= build.spec.frames - 1:
        raise ValidationError("flow is defined for frames [0, n-2]")
    E, K = camera_for_frame(build.spec, frame)
    _, index, _ = _zbuffer(build, frame, E, K)
    covered = index >= 0
    rays = geometry.camera_rays(E, K, build.spec.width, build.spec.height)
    return _exact_flow(build, frame, index, covered, rays)


# ---------------------------------------------------------------------------
# LiDAR simulation
# ---------------------------------------------------------------------------

def simulate_lidar(build, frame, rng):
    """Ray-grid LiDAR: nearest point per angular bin within the cone.

    Returns (sensor-frame points, per-point dynamic labels, sensor origin).
    """
    spec = build.spec
    lid = spec.lidar
    origin = np.asarray(spec.cam_eyes[frame], dtype=np.float64) + np.asarray(lid.offset)
    pts, _, _, dyn = build.all_points_at(frame)
    rel = pts - origin
    rng_dist = np.linalg.norm(rel, axis=1)
    ok = (rng_dist > 0.5) & (rng_dist < lid.max_range)
    rel = rel[ok]
    dyn = dyn[ok]
    rng_dist = rng_dist[ok]
    az = np.arctan2(rel[:, 1], rel[:, 0])
    el = np.arcsin(np.clip(rel[:, 2] / rng_dist, -1.0, 1.0))
    a0, a1 = lid.azimuth_range
    e0, e1 = lid.elevation_range
    sel = (az >= a0) & (az <= a1) & (el >= e0) & (el <= e1)
    rel, dyn, rng_dist, az, el = rel[sel], dyn[sel], rng_dist[sel], az[sel], el[sel]
    ia = np.minimum(((az - a0) / (a1 - a0) * lid.n_azimuth).astype(np.int64),
                    lid.n_azimuth - 1)
    ie = np.minimum(((el - e0) / (e1 - e0) * lid.n_elevation).astype(np.int64),
                    lid.n_elevation - 1)
    bin_id = ie * lid.n_azimuth + ia
    order = np.lexsort((rng_dist, bin_id))
    bin_sorted = bin_id[order]
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = bin_sorted[1:] != bin_sorted[:-1]
    chosen = order[first]
    points = rel[chosen]
    if spec.point_noise > 0:
        points = points + rng.normal(0.0, spec.point_noise, size=points.shape)
    return points, dyn[chosen].astype(np.uint8), origin


# ---------------------------------------------------------------------------
# full scene generation
# ---------------------------------------------------------------------------

def generate_scene(spec, seed, out_dir):
    """Write a complete manifest directory plus the GT bundle; returns the
    loaded-back SceneManifest."""
    out = Path(out_dir)
    for sub in ("images", "lidar", "masks", "flow", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    build = build_geometry(spec)

    frames = []
    for f in range(spec.frames):
        E, K = camera_for_frame(spec, f)
        view = render_gt_view(build, f)
        image = view["image"]
        if spec.image_noise > 0:
            image = np.clip(image + rng.normal(0.0, spec.image_noise, image.shape), 0, 1)
        img_path = out / "images" / f"frame_{f:03d}.png"
        scenegraph.save_image(image, img_path)
        mask_path = out / "masks" / f"sky_{f:03d}.png"
        scenegraph.save_mask(view["sky_mask"], mask_path)
        scenegraph.save_mask(view["dyn_mask"], out / "gt" / f"dyn_mask_{f:03d}.png")
        scenegraph.save_depth(view["depth"], out / "gt" / f"gt_depth_{f:03d}.bin")
        flow_path = None
        if f < spec.frames - 1:
            flow_path = out / "flow" / f"flow_{f:03d}.flo"
            scenegraph.save_flow_map(view["flow"], flow_path)

        pts_sensor, labels, origin = simulate_lidar(build, f, rng)
        lidar_path = out / "lidar" / f"frame_{f:03d}.sfpc"
        scenegraph.save_point_cloud(PointCloud(points=pts_sensor), lidar_path)
        labels.tofile(out / "gt" / f"labels_{f:03d}.bin")
        lidar_E = np.eye(4)
        lidar_E[:3, 3] = origin

        cam = CameraView(intrinsics=K, extrinsic=E, image=img_path,
                         width=spec.width, height=spec.height,
                         sky_mask=mask_path, flow_gt=flow_path)
        frames.append(FrameRecord(timestamp=f / spec.fps, cameras=[cam],
                                  lidar_points=lidar_path, lidar_extrinsic=lidar_E))

    manifest = SceneManifest(frames=frames, scene_bounds=build.bounds,
                             camera_count=1, root=out)
    scenegraph.save_manifest(manifest, out / "scene.json")
    return scenegraph.load_manifest(out / "scene.json")


# ---------------------------------------------------------------------------
# named scene library
# ---------------------------------------------------------------------------

NAMED_SCENES = ("static-room", "one-box", "two-cars-crossing", "fast-mover")


def _room(x0=-8.0, x1=8.0, y0=-2.0, y1=10.0, z1=4.0, ground_spacing=0.05,
          wall_spacing=0.055):
    return [
        SurfaceSpec("plane", (x0, y0, 0.0), ((x1 - x0, 0, 0), (0, y1 - y0, 0)),
                    ground_spacing, (0.55, 0.52, 0.48), wave_len=3.0),
        SurfaceSpec("plane", (x0, y1, 0.0), ((x1 - x0, 0, 0), (0, 0, z1)),
                    wall_spacing, (0.42, 0.55, 0.62), wave_len=2.2,
                    wave_dir=(1.0, 0.0, 0.6)),
        SurfaceSpec("plane", (x0, y0, 0.0), ((0, y1 - y0, 0), (0, 0, z1)),
                    wall_spacing, (0.62, 0.5, 0.4), wave_len=2.6,
                    wave_dir=(0.0, 1.0, 0.5)),
        SurfaceSpec("plane", (x1, y0, 0.0), ((0, y1 - y0, 0), (0, 0, z1)),
                    wall_spacing, (0.5, 0.6, 0.45), wave_len=2.4,
                    wave_dir=(0.0, 1.0, 0.4)),
    ]


def _lateral_path(frames, x_span=2.4, y=-6.5, z=1.8, target=(0.0, 4.0, 1.0)):
    xs = np.linspace(-x_span / 2.0, x_span / 2.0, frames)
    eyes = [(float(x), y, z) for x in xs]
    targets = [tuple(target)] * frames
    return eyes, targets


def make_scene_spec(name, frames=None, width=384, height=256):
    """Standard scene library; frozen regression targets for the test suite.

    Focal length scales with image height so reduced-resolution variants keep
    the same field of view.
    """
    focal = 340.0 * height / 256.0
    lidar = LidarSpec(n_azimuth=192, n_elevation=72)
    if name == "static-room":
        n = frames or 12
        eyes, targets = _lateral_path(n)
        return SynthSpec(name=name, statics=_room(), dynamics=[], frames=n,
                         width=width, height=height, focal=focal, lidar=lidar,
                         cam_eyes=eyes, cam_targets=targets)
    if name == "one-box":
        n = frames or 20
        eyes, targets = _lateral_path(n)
        box = DynamicObjectSpec(size=(1.3, 1.3, 1.3), center=(-4.5, 3.2, 0.65),
                                velocity=(0.5, 0.0, 0.0), spacing=0.028,
                                base_color=(0.82, 0.28, 0.2))
        return SynthSpec(name=name, statics=_room(), dynamics=[box], frames=n,
                         width=width, height=height, focal=focal, lidar=lidar,
                         cam_eyes=eyes, cam_targets=targets)
    if name == "two-cars-crossing":
        n = frames or 16
        eyes, targets = _lateral_path(n)
        car1 = DynamicObjectSpec(size=(1.8, 0.9, 0.7), center=(-3.8, 3.2, 0.35),
                                 velocity=(0.45, 0.0, 0.0), spacing=0.035,
                                 base_color=(0.85, 0.25, 0.2))
        car2 = DynamicObjectSpec(size=(1.8, 0.9, 0.7), center=(3.8, 5.2, 0.35),
                                 velocity=(-0.45, 0.0, 0.0), spacing=0.035,
                                 base_color=(0.2, 0.3, 0.85))
        return SynthSpec(name=name, statics=_room(), dynamics=[car1, car2],
                         frames=n, width=width, height=height, focal=focal,
                         lidar=lidar, cam_eyes=eyes, cam_targets=targets)
    if name == "fast-mover":
        n = frames or 8
        eyes, targets = _lateral_path(n, x_span=1.6, y=-10.0, z=2.5,
                                      target=(2.0, 8.0, 2.0))
        room = _room(x0=-18.0, x1=24.0, y0=-4.0, y1=18.0, z1=6.0,
                     ground_spacing=0.11, wall_spacing=0.12)
        mover = DynamicObjectSpec(size=(3.0, 2.0, 2.0), center=(-14.0, 8.0, 2.5),
                                  velocity=(5.0, 0.0, 0.0), spacing=0.08,
                                  base_color=(0.9, 0.6, 0.15))
        return SynthSpec(name=name, statics=room, dynamics=[mover], frames=n,
                         width=width, height=height,
                         focal=265.0 * height / 256.0,
                         cam_eyes=eyes, cam_targets=targets,
                         lidar=LidarSpec(n_azimuth=192, n_elevation=72,
                                         max_range=60.0))
    raise ValidationError(f"unknown scene name {name!r}; choose from {NAMED_SCENES}")
