"""Dataset ingestion, image I/O, and the synthetic multi-period generator.

On-disk dataset layout (COLMAP text convention plus period sidecars):

    dataset/
      cameras.txt            COLMAP camera intrinsics (PINHOLE / SIMPLE_PINHOLE)
      images.txt             COLMAP extrinsics; two lines per image
      points3D.txt           union sparse points across all periods
      points3D_<t>.txt       optional per-period sparse points
      periods.txt            "image_name period_id" per line, ids contiguous 0..T-1
      split.txt              optional "image_name train|test" per line
      images/<image_name>    PPM (P6) image files

Without split.txt, even positions in images.txt order train and odd ones
test. Ground-truth images from the synthetic generator are rendered with
this package's own rasterizer, so a trained model can reach them exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (EmptyDataset, IoError, MissingFile, NonContiguousPeriods,
                     ParseError, SpecInvalid, UnknownImage, UnsupportedCameraModel)
from .geom import Camera, Gaussian3D, quat_normalize, rotmat_to_quat
from .raster import render_gaussians

FLOAT_FMT = "%.17g"


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)

def read_ppm(path):
    """Read a binary PPM into an (H, W, 3) float array in [0, 1]."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc

    # Header: magic, width, height, maxval separated by whitespace/comments.
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise ParseError("truncated PPM header", path=path)
        ch = data[pos:pos + 1]
        if ch == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise ParseError("unterminated comment in PPM header", path=path)
            pos += 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise ParseError(f"expected P6 magic, got {tokens[0]!r}", path=path)
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ParseError(f"bad PPM header: {exc}", path=path) from exc
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}", path=path)
    need = width * height * 3
    if len(data) - pos < need:
        raise ParseError("truncated PPM pixel data", path=path)
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(height, width, 3).astype(np.float64) / 255.0


def write_ppm(path, image):
    """Write an (H, W, 3) array in [0, 1] as binary PPM (values rounded)."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    quant = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    try:
        with open(path, "wb") as f:
            f.write(b"P6\n%d %d\n255\n" % (w, h))
            f.write(quant.tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


# ---------------------------------------------------------------------------
# COLMAP text files

def _data_lines(path):
    """Yield (line_number, stripped_line) for non-comment, non-blank lines."""
    try:
        with open(path, "r") as f:
            for i, line in enumerate(f, start=1):
                stripped = line.strip()
                if stripped and not stripped.startswith("#"):
                    yield i, stripped
    except OSError as exc:
        raise IoError(str(exc)) from exc


def _require(path):
    if not os.path.isfile(path):
        raise MissingFile(path)
    return path


def parse_colmap(directory):
    """Parse cameras.txt + images.txt + points3D.txt into per-image cameras
    and an (N, 3) point array. 2D observation lines and unknown trailing
    columns are ignored; periods are filled in separately."""
    cam_path = _require(os.path.join(directory, "cameras.txt"))
    img_path = _require(os.path.join(directory, "images.txt"))
    pts_path = _require(os.path.join(directory, "points3D.txt"))

    intrinsics = {}
    for ln, line in _data_lines(cam_path):
        parts = line.split()
        if len(parts) < 4:
            raise ParseError("camera line needs at least 4 fields", path=cam_path, line=ln)
        try:
            cam_id = int(parts[0])
            model = parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
        except ValueError as exc:
            raise ParseError(str(exc), path=cam_path, line=ln) from exc
        if model == "PINHOLE":
            if len(params) < 4:
                raise ParseError("PINHOLE needs fx fy cx cy", path=cam_path, line=ln)
            fx, fy, cx, cy = params[:4]
        elif model == "SIMPLE_PINHOLE":
            if len(params) < 3:
                raise ParseError("SIMPLE_PINHOLE needs f cx cy", path=cam_path, line=ln)
            fx = fy = params[0]
            cx, cy = params[1], params[2]
        else:
            raise UnsupportedCameraModel(f"{model} (line {ln} of {cam_path})")
        intrinsics[cam_id] = (width, height, fx, fy, cx, cy)

    cameras = []
    expect_pose = True
    try:
        with open(img_path, "r") as f:
            raw_lines = f.readlines()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    for ln, raw in enumerate(raw_lines, start=1):
        line = raw.strip()
        if line.startswith("#"):
            continue
        if not expect_pose:
            expect_pose = True  # observation line (possibly empty), ignored
            continue
        if not line:
            continue
        parts = line.split()
        if len(parts) < 10:
            raise ParseError("image line needs 10 fields", path=img_path, line=ln)
        try:
            image_id = int(parts[0])
            qw, qx, qy, qz = (float(p) for p in parts[1:5])
            tx, ty, tz = (float(p) for p in parts[5:8])
            cam_id = int(parts[8])
        except ValueError as exc:
            raise ParseError(str(exc), path=img_path, line=ln) from exc
        name = parts[9]
        if cam_id not in intrinsics:
            raise ParseError(f"image references unknown camera {cam_id}", path=img_path, line=ln)
        width, height, fx, fy, cx, cy = intrinsics[cam_id]
        cameras.append(Camera(
            id=image_id, width=width, height=height, fx=fx, fy=fy, cx=cx, cy=cy,
            rotation=quat_normalize([qw, qx, qy, qz]),
            translation=np.array([tx, ty, tz]), period=0, image_name=name))
        expect_pose = False

    points = []
    for ln, line in _data_lines(pts_path):
        parts = line.split()
        if len(parts) < 4:
            raise ParseError("point line needs at least 4 fields", path=pts_path, line=ln)
        try:
            points.append([float(parts[1]), float(parts[2]), float(parts[3])])
        except ValueError as exc:
            raise ParseError(str(exc), path=pts_path, line=ln) from exc

    cameras.sort(key=lambda c: c.id)
    return cameras, np.asarray(points, dtype=np.float64).reshape(-1, 3)


def write_colmap(directory, cameras, points):
    """Write cameras/images/points3D text files (inverse of parse_colmap).

    Every camera gets its own CAMERA_ID so arbitrary per-image intrinsics
    round-trip; observation lines are written empty.
    """
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "cameras.txt"), "w") as f:
        f.write("# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for cam in cameras:
            params = " ".join(FLOAT_FMT % v for v in (cam.fx, cam.fy, cam.cx, cam.cy))
            f.write(f"{cam.id} PINHOLE {cam.width} {cam.height} {params}\n")
    with open(os.path.join(directory, "images.txt"), "w") as f:
        f.write("# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n")
        for cam in cameras:
            q = " ".join(FLOAT_FMT % v for v in cam.rotation)
            t = " ".join(FLOAT_FMT % v for v in cam.translation)
            f.write(f"{cam.id} {q} {t} {cam.id} {cam.image_name}\n\n")
    with open(os.path.join(directory, "points3D.txt"), "w") as f:
        f.write("# 3D point list: POINT3D_ID X Y Z R G B ERROR\n")
        for i, p in enumerate(points, start=1):
            xyz = " ".join(FLOAT_FMT % v for v in p)
            f.write(f"{i} {xyz} 128 128 128 0\n")


def load_periods(path):
    """Parse the period manifest: one "image_name period" pair per line."""
    _require(path)
    mapping = {}
    for ln, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 2:
            raise ParseError("expected 'image_name period'", path=path, line=ln)
        try:
            mapping[parts[0]] = int(parts[1])
        except ValueError as exc:
            raise ParseError(str(exc), path=path, line=ln) from exc
    if not mapping:
        raise ParseError("empty period manifest", path=path)
    ids = set(mapping.values())
    T = max(ids) + 1
    if ids != set(range(T)):
        raise NonContiguousPeriods(f"period ids {sorted(ids)} are not contiguous 0..{T - 1}")
    return mapping


# ---------------------------------------------------------------------------
# Dataset assembly

@dataclass
class MultiPeriodDataset:
    cameras: list  # Camera, sorted by id, periods filled
    images: dict  # camera id -> (H, W, 3) array in [0, 1]
    per_period_points: list  # T arrays of (N_t, 3)
    split: dict  # camera id -> "train" | "test"
    T: int

    def train_cameras(self):
        return [c for c in self.cameras if self.split[c.id] == "train"]

    def test_cameras(self):
        return [c for c in self.cameras if self.split[c.id] == "test"]

    def union_points(self):
        return np.concatenate([p for p in self.per_period_points if p.size], axis=0)


def load_dataset(directory):
    """Assemble a MultiPeriodDataset from an on-disk directory."""
    cameras, union = parse_colmap(directory)
    if not cameras:
        raise EmptyDataset(f"no images in {directory}")
    period_of = load_periods(os.path.join(directory, "periods.txt"))

    names = {c.image_name for c in cameras}
    for name in period_of:
        if name not in names:
            raise UnknownImage(f"periods.txt names {name!r}, absent from images.txt")
    for cam in cameras:
        if cam.image_name not in period_of:
            raise ParseError(f"image {cam.image_name!r} has no period entry",
                             path=os.path.join(directory, "periods.txt"))
        cam.period = period_of[cam.image_name]
    T = max(period_of.values()) + 1

    per_period = []
    sidecars = [os.path.join(directory, f"points3D_{t}.txt") for t in range(T)]
    if all(os.path.isfile(p) for p in sidecars):
        for p in sidecars:
            pts = []
            for ln, line in _data_lines(p):
                parts = line.split()
                try:
                    pts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except (ValueError, IndexError) as exc:
                    raise ParseError(str(exc), path=p, line=ln) from exc
            per_period.append(np.asarray(pts, dtype=np.float64).reshape(-1, 3))
    else:
        per_period = [union.copy() for _ in range(T)]

    split_path = os.path.join(directory, "split.txt")
    split = {}
    if os.path.isfile(split_path):
        by_name = {c.image_name: c.id for c in cameras}
        for ln, line in _data_lines(split_path):
            parts = line.split()
            if len(parts) != 2 or parts[1] not in ("train", "test"):
                raise ParseError("expected 'image_name train|test'", path=split_path, line=ln)
            if parts[0] not in by_name:
                raise UnknownImage(f"split.txt names {parts[0]!r}, absent from images.txt")
            split[by_name[parts[0]]] = parts[1]
        for cam in cameras:
            if cam.id not in split:
                raise ParseError(f"image {cam.image_name!r} has no split entry", path=split_path)
    else:
        for i, cam in enumerate(cameras):
            split[cam.id] = "train" if i % 2 == 0 else "test"

    images = {}
    for cam in cameras:
        images[cam.id] = read_ppm(os.path.join(directory, "images", cam.image_name))
        if images[cam.id].shape[:2] != (cam.height, cam.width):
            raise ParseError(f"image {cam.image_name!r} size does not match camera")
    return MultiPeriodDataset(cameras=cameras, images=images, per_period_points=per_period,
                              split=split, T=T)


# ---------------------------------------------------------------------------
# Synthetic multi-period scenes

@dataclass
class PrimitiveSpec:
    """One ground-truth Gaussian with its lifespan and optional recoloring."""

    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    lifespan: set  # period ids during which the primitive exists
    period_colors: dict = field(default_factory=dict)  # period -> RGB override


@dataclass
class SyntheticSceneSpec:
    T: int
    primitives: list
    tint: list  # per-period RGB multipliers in (0, 1]
    orbit_radius: float = 3.0
    orbit_height: float = 1.5
    cams_per_period: int = 8
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0
    seed: int = 0
    points_per_primitive: int = 48
    test_every: int = 2
    # Fraction of the orbit each period's training cameras cover. Below 1,
    # period t trains on an arc starting at phase t/T while its test views
    # still sample the full circle, so static regions unseen by one period's
    # training views are covered by the other periods' (the cross-period
    # supervision regime).
    arc_frac: float = 1.0
    target: np.ndarray = None

    def __post_init__(self):
        if self.target is None:
            self.target = np.zeros(3)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.T < 1:
            raise SpecInvalid("need at least one period")
        if len(self.tint) != self.T:
            raise SpecInvalid("need one tint per period")
        for tint in self.tint:
            arr = np.asarray(tint, dtype=np.float64)
            if np.any(arr <= 0) or np.any(arr > 1):
                raise SpecInvalid("tint components must lie in (0, 1]")
        if self.test_every < 2:
            raise SpecInvalid("test_every must be at least 2")
        if not (0.0 < self.arc_frac <= 1.0):
            raise SpecInvalid("arc_frac must lie in (0, 1]")
        for t in range(self.T):
            if not any(t in p.lifespan for p in self.primitives):
                raise SpecInvalid(f"period {t} has no live primitive")
        for p in self.primitives:
            if any(t < 0 or t >= self.T for t in p.lifespan):
                raise SpecInvalid("primitive lifespan outside [0, T)")


def spec_from_json(path):
    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), path=path) from exc
    try:
        prims = [
            PrimitiveSpec(
                mean=np.asarray(p["mean"], dtype=np.float64),
                rotation=quat_normalize(p.get("rotation", [1, 0, 0, 0])),
                scale=np.asarray(p["scale"], dtype=np.float64),
                opacity=float(p["opacity"]),
                color=np.asarray(p["color"], dtype=np.float64),
                lifespan=set(p["lifespan"]),
                period_colors={int(k): np.asarray(v, dtype=np.float64)
                               for k, v in p.get("period_colors", {}).items()},
            )
            for p in raw["primitives"]
        ]
        kwargs = {k: raw[k] for k in (
            "orbit_radius", "orbit_height", "cams_per_period", "width", "height",
            "fov_deg", "seed", "points_per_primitive", "test_every", "arc_frac",
            "target") if k in raw}
        return SyntheticSceneSpec(T=int(raw["T"]), primitives=prims, tint=raw["tint"], **kwargs)
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecInvalid(f"bad scene spec: {exc}") from exc


def look_at_camera(cam_id, position, target, width, height, fov_deg, period, name):
    """Camera at `position` looking at `target`, world +z as up; image y down."""
    forward = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    fx = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    return Camera(
        id=cam_id, width=width, height=height, fx=fx, fy=fx,
        cx=width / 2.0, cy=height / 2.0,
        rotation=rotmat_to_quat(R), translation=-R @ np.asarray(position, dtype=np.float64),
        period=period, image_name=name)


def ground_truth_gaussians(spec, t):
    """The period-t truth set: live primitives with period colors and tint."""
    tint = np.asarray(spec.tint[t], dtype=np.float64)
    out = []
    for p in spec.primitives:
        if t in p.lifespan:
            color = np.clip(p.period_colors.get(t, p.color) * tint, 0.0, 1.0)
            out.append(Gaussian3D(p.mean, p.rotation, p.scale, p.opacity, color))
    return out


def generate_synthetic(spec, out_dir):
    """Render and write a synthetic multi-period dataset; returns it."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    cameras = []
    images = {}
    split = {}
    period_lines = []
    split_lines = []
    cam_id = 1
    for t in range(spec.T):
        truth = ground_truth_gaussians(spec, t)
        if spec.arc_frac < 1.0:
            n_test = spec.cams_per_period // spec.test_every
            n_train = spec.cams_per_period - n_test
            start = 2.0 * np.pi * t / spec.T
            angles = [(start + 2.0 * np.pi * spec.arc_frac * j / n_train, "train")
                      for j in range(n_train)]
            angles += [(2.0 * np.pi * (j + 0.37) / n_test, "test") for j in range(n_test)]
        else:
            angles = []
            for j in range(spec.cams_per_period):
                tag = "test" if (j % spec.test_every) == spec.test_every - 1 else "train"
                angles.append((2.0 * np.pi * (j + t / spec.T) / spec.cams_per_period, tag))
        for j, (angle, tag) in enumerate(angles):
            pos = np.array([
                spec.orbit_radius * np.cos(angle),
                spec.orbit_radius * np.sin(angle),
                spec.orbit_height,
            ]) + spec.target
            name = f"t{t}_cam{j:03d}.ppm"
            cam = look_at_camera(cam_id, pos, spec.target, spec.width, spec.height,
                                 spec.fov_deg, t, name)
            image = render_gaussians(truth, cam)
            write_ppm(os.path.join(out_dir, "images", name), image)
            cameras.append(cam)
            images[cam_id] = image
            split[cam_id] = tag
            period_lines.append(f"{name} {t}")
            split_lines.append(f"{name} {tag}")
            cam_id += 1

    per_period = []
    for t in range(spec.T):
        pts = []
        for p in spec.primitives:
            if t in p.lifespan:
                sigma = float(np.mean(p.scale))
                pts.append(p.mean + sigma * rng.normal(size=(spec.points_per_primitive, 3)))
        per_period.append(np.concatenate(pts, axis=0))

    write_colmap(out_dir, cameras, np.concatenate(per_period, axis=0))
    for t in range(spec.T):
        with open(os.path.join(out_dir, f"points3D_{t}.txt"), "w") as f:
            f.write("# 3D point list: POINT3D_ID X Y Z R G B ERROR\n")
            for i, p in enumerate(per_period[t], start=1):
                xyz = " ".join(FLOAT_FMT % v for v in p)
                f.write(f"{i} {xyz} 128 128 128 0\n")
    with open(os.path.join(out_dir, "periods.txt"), "w") as f:
        f.write("\n".join(period_lines) + "\n")
    with open(os.path.join(out_dir, "split.txt"), "w") as f:
        f.write("\n".join(split_lines) + "\n")

    return MultiPeriodDataset(cameras=cameras, images=images,
                              per_period_points=per_period, split=split, T=spec.T)
