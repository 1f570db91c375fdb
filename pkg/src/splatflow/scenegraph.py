"""Scene data types, the JSON manifest format, and file IO.

On-disk formats:

* ``scene.json``      -- manifest: frames, cameras, bounds (relative paths)
* ``*.sfpc``          -- point cloud: magic ``SFPC``, uint32 count, then
                         little-endian float32 xyz triples
* ``*.flo``           -- Middlebury flow: float32 202021.25, int32 W, int32 H,
                         row-major interleaved (u, v) float32
* images              -- 8-bit PNG or PPM (P6/P3); grayscale PNG/PGM masks,
                         nonzero = sky

All loaders are pure functions of file contents; loaded objects are plain
immutable-by-convention snapshots and safe to share across threads.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, ValidationError

SFPC_MAGIC = b"SFPC"
FLO_MAGIC = 202021.25

_ORTHO_TOL = 1e-6


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class CameraView:
    intrinsics: tuple          # (fx, fy, cx, cy) pixels
    extrinsic: np.ndarray      # 4x4 world -> camera
    image: Path
    width: int
    height: int
    sky_mask: Path | None = None
    flow_gt: Path | None = None

    def validate(self, where=""):
        fx, fy, cx, cy = self.intrinsics
        if fx <= 0 or fy <= 0:
            raise ValidationError(f"{where}: focal lengths must be positive, got fx={fx}, fy={fy}")
        if not (0 <= cx < self.width) or not (0 <= cy < self.height):
            raise ValidationError(f"{where}: principal point ({cx}, {cy}) outside {self.width}x{self.height} image")
        _check_rigid(self.extrinsic, f"{where}: camera extrinsic")


@dataclass
class FrameRecord:
    timestamp: float
    cameras: list
    lidar_points: Path
    lidar_extrinsic: np.ndarray   # 4x4 lidar -> world

    def validate(self, index):
        _check_rigid(self.lidar_extrinsic, f"frame {index}: lidar_extrinsic")
        for c, cam in enumerate(self.cameras):
            cam.validate(where=f"frame {index}, camera {c}")


@dataclass
class SceneManifest:
    frames: list
    scene_bounds: tuple        # (min_xyz, max_xyz) arrays, meters
    camera_count: int
    root: Path | None = None

    def validate(self):
        if self.camera_count < 1:
            raise ValidationError("camera_count must be a positive integer")
        lo, hi = self.scene_bounds
        if not np.all(np.asarray(hi) > np.asarray(lo)):
            raise ValidationError("scene_bounds must have strictly positive extent on all axes")
        last_t = -np.inf
        for i, fr in enumerate(self.frames):
            if fr.timestamp <= last_t:
                raise ValidationError(f"frame {i}: timestamp {fr.timestamp} not strictly increasing")
            last_t = fr.timestamp
            if len(fr.cameras) != self.camera_count:
                raise ValidationError(f"frame {i}: expected {self.camera_count} cameras, got {len(fr.cameras)}")
            fr.validate(i)
            for p in _frame_paths(fr):
                if not p.exists():
                    raise ValidationError(f"frame {i}: referenced file does not exist: {p}")
        return self

    @property
    def timestamps(self):
        return np.array([f.timestamp for f in self.frames])

    def lidar_world(self, index):
        """Load frame `index`'s point cloud and lift it to world coordinates."""
        fr = self.frames[index]
        pc = load_point_cloud(fr.lidar_points)
        world = pc.points @ fr.lidar_extrinsic[:3, :3].T + fr.lidar_extrinsic[:3, 3]
        return PointCloud(points=world, frame_tag="world")


@dataclass
class PointCloud:
    points: np.ndarray         # (N, 3) meters
    frame_tag: str = "sensor"  # {"sensor", "world"}

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValidationError(f"point cloud must be (N>=1, 3), got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point cloud contains NaN/Inf coordinates")
        if self.frame_tag not in ("sensor", "world"):
            raise ValidationError(f"unknown frame_tag {self.frame_tag!r}")
        self.points = pts


def _check_rigid(E, where):
    E = np.asarray(E)
    if E.shape != (4, 4):
        raise ValidationError(f"{where}: expected 4x4 transform, got {E.shape}")
    if not np.allclose(E[3], (0.0, 0.0, 0.0, 1.0), atol=1e-9):
        raise ValidationError(f"{where}: bottom row must be (0,0,0,1)")
    R = E[:3, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=_ORTHO_TOL):
        raise ValidationError(f"{where}: rotation block not orthonormal within {_ORTHO_TOL}")


def _frame_paths(fr):
    yield fr.lidar_points
    for cam in fr.cameras:
        yield cam.image
        if cam.sky_mask is not None:
            yield cam.sky_mask
        if cam.flow_gt is not None:
            yield cam.flow_gt


# ---------------------------------------------------------------------------
# manifest IO
# ---------------------------------------------------------------------------

def load_manifest(path):
    """Parse and fully validate a scene.json manifest."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed manifest {path}: {e}") from e
    root = path.parent
    try:
        frames = []
        for fd in doc["frames"]:
            cams = []
            for cd in fd["cameras"]:
                cams.append(CameraView(
                    intrinsics=tuple(float(v) for v in cd["intrinsics"]),
                    extrinsic=np.array(cd["extrinsic"], dtype=np.float64),
                    image=root / cd["image"],
                    width=int(cd["width"]),
                    height=int(cd["height"]),
                    sky_mask=root / cd["sky_mask"] if cd.get("sky_mask") else None,
                    flow_gt=root / cd["flow_gt"] if cd.get("flow_gt") else None,
                ))
            frames.append(FrameRecord(
                timestamp=float(fd["timestamp"]),
                cameras=cams,
                lidar_points=root / fd["lidar_points"],
                lidar_extrinsic=np.array(fd["lidar_extrinsic"], dtype=np.float64),
            ))
        manifest = SceneManifest(
            frames=frames,
            scene_bounds=(np.array(doc["scene_bounds"]["min"], dtype=np.float64),
                          np.array(doc["scene_bounds"]["max"], dtype=np.float64)),
            camera_count=int(doc["camera_count"]),
            root=root,
        )
    except (KeyError, TypeError) as e:
        raise FormatError(f"malformed manifest {path}: missing or bad field {e}") from e
    return manifest.validate()


def save_manifest(manifest, path):
    """Write a manifest as JSON with paths relative to the output directory."""
    path = Path(path)
    root = path.parent

    def rel(p):
        return None if p is None else Path(p).resolve().relative_to(root.resolve()).as_posix()

    doc = {
        "version": 1,
        "camera_count": manifest.camera_count,
        "scene_bounds": {"min": list(map(float, manifest.scene_bounds[0])),
                         "max": list(map(float, manifest.scene_bounds[1]))},
        "frames": [
            {
                "timestamp": fr.timestamp,
                "lidar_points": rel(fr.lidar_points),
                "lidar_extrinsic": np.asarray(fr.lidar_extrinsic).tolist(),
                "cameras": [
                    {
                        "intrinsics": list(map(float, cam.intrinsics)),
                        "extrinsic": np.asarray(cam.extrinsic).tolist(),
                        "image": rel(cam.image),
                        "width": cam.width,
                        "height": cam.height,
                        "sky_mask": rel(cam.sky_mask),
                        "flow_gt": rel(cam.flow_gt),
                    }
                    for cam in fr.cameras
                ],
            }
            for fr in manifest.frames
        ],
    }
    path.write_text(json.dumps(doc, indent=1))


# ---------------------------------------------------------------------------
# point clouds (.sfpc)
# ---------------------------------------------------------------------------

def load_point_cloud(path):
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != SFPC_MAGIC:
        raise FormatError(f"{path}: not an SFPC point cloud (bad magic)")
    (count,) = struct.unpack("<I", raw[4:8])
    payload = raw[8:]
    if len(payload) != count * 12:
        raise FormatError(
            f"{path}: truncated point cloud, {len(payload)} bytes for {count} records of 12")
    pts = np.frombuffer(payload, dtype="<f4").reshape(count, 3).astype(np.float64)
    return PointCloud(points=pts, frame_tag="sensor")


def save_point_cloud(pc, path):
    pts = np.ascontiguousarray(np.asarray(pc.points, dtype=np.float64), dtype="<f4")
    with open(path, "wb") as f:
        f.write(SFPC_MAGIC)
        f.write(struct.pack("<I", pts.shape[0]))
        f.write(pts.tobytes())


# ---------------------------------------------------------------------------
# optical flow (.flo)
# ---------------------------------------------------------------------------

def load_flow_map(path):
    """Read a Middlebury .flo file into an (H, W, 2) float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: too short for a .flo file")
    (magic,) = struct.unpack("<f", raw[:4])
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {magic!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    expect = w * h * 2 * 4
    if len(raw) - 12 != expect:
        raise FormatError(f"{path}: payload is {len(raw) - 12} bytes, expected {expect}")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(h, w, 2).copy()


def save_flow_map(flow, path):
    flow = np.asarray(flow)
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# images and masks
# ---------------------------------------------------------------------------

def load_image(path):
    """Load an RGB image as float64 in [0, 1], shape (H, W, 3)."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm"):
        arr = _read_pnm(path)
    else:
        try:
            arr = np.asarray(Image.open(path).convert("RGB"))
        except Exception as e:
            raise FormatError(f"{path}: cannot decode image: {e}") from e
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return arr.astype(np.float64) / 255.0


def save_image(img, path):
    """Save a float [0,1] (H, W, 3) image as 8-bit PNG or binary PPM."""
    data = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        h, w = data.shape[:2]
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode())
            f.write(data.tobytes())
    else:
        Image.fromarray(data, mode="RGB").save(path)


def load_mask(path):
    """Binary mask from a grayscale image: nonzero pixels are True."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm"):
        arr = _read_pnm(path)
        if arr.ndim == 3:
            arr = arr.max(axis=-1)
    else:
        try:
            arr = np.asarray(Image.open(path).convert("L"))
        except Exception as e:
            raise FormatError(f"{path}: cannot decode mask: {e}") from e
    return arr > 0


def save_mask(mask, path):
    data = np.where(np.asarray(mask), 255, 0).astype(np.uint8)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        h, w = data.shape
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode())
            f.write(data.tobytes())
    else:
        Image.fromarray(data, mode="L").save(path)


def save_depth(depth, path):
    """Raw float32 little-endian H*W depth dump (meters)."""
    np.ascontiguousarray(depth, dtype="<f4").tofile(path)


def load_depth(path, height, width):
    d = np.fromfile(path, dtype="<f4")
    if d.size != height * width:
        raise FormatError(f"{path}: expected {height * width} float32 values, got {d.size}")
    return d.reshape(height, width).astype(np.float64)


def _read_pnm(path):
    raw = Path(path).read_bytes()
    if raw[:2] not in (b"P6", b"P3", b"P5", b"P2"):
        raise FormatError(f"{path}: not a PPM/PGM file")
    kind = raw[:2]
    # header: magic, width, height, maxval with comments allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 3 if kind in (b"P6", b"P3") else 1
    if kind in (b"P6", b"P5"):
        pos += 1  # single whitespace after maxval
        data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    else:
        data = np.array(raw[pos:].split(), dtype=np.uint8)
        if data.size != w * h * channels:
            raise FormatError(f"{path}: ASCII payload has {data.size} samples, expected {w * h * channels}")
    img = data.reshape(h, w, channels)
    return img[..., 0] if channels == 1 else img
