"""Synthetic desk-scale scenes: generation, rendering, dataset files.

A scene is a flat square of ground (side `extent`, z up) scattered with
colored primitives: vertical axis-aligned rectangles standing on the
ground and flat discs lying on it.  Object colors get stratified hues
and stratified lightness values, so images carry both localization and
colorization signal (grayscale alone identifies each object).

Scene sampling runs on a splitmix-style 64-bit generator with a fixed
draw order, so a seed reproduces the same scene on any platform.

Rendering is a pure function: pinhole camera (focal length = image
width, centered principal point, x right / y down / z forward),
per-object ray coverage tests composited back-to-front (painter's
algorithm; objects are placed non-overlapping so the ordering is
sound), flat shading over a neutral sky/ground gradient, supersampled
rays box-filtered down for anti-aliased silhouettes.  A pose holds
the camera center in world coordinates and the camera-from-world
rotation, so rays leave from pose.x along the conjugate-rotated pixel
directions.

Dataset layout written by `generate_dataset`:
  scene.json                      manifest (seed, extent, counts, dims)
  images/{split}/{index:06}.ppm   binary 8-bit P6
  poses_{split}.csv               index,tx,ty,tz,qw,qx,qy,qz at 17
                                  significant digits
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .colorspace import LabImage, lab_to_rgb, rgb_to_lab
from .posemath import Pose, quat_from_rotation_matrix
from .seeding import SplitMix64

_UP = np.array([0.0, 0.0, 1.0])

# sky/ground gradient shades (pure grays: zero chroma in Lab)
_SKY_BASE, _SKY_GAIN = 0.62, 0.28
_GROUND_BASE, _GROUND_GAIN = 0.45, 0.25

POSE_CSV_HEADER = "index,tx,ty,tz,qw,qx,qy,qz"


@dataclass
class SceneObject:
    kind: str               # "rect" or "disc"
    position: np.ndarray    # rect: center of its base edge; disc: center
    size: float             # rect: half-width; disc: radius
    color: Tuple[float, float, float]
    axis: str = "x"         # rect plane normal ("x" or "y")
    height: float = 0.0     # rect: top edge z

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.kind not in ("rect", "disc"):
            raise ValueError(f"unknown object kind {self.kind!r}")
        if self.kind == "rect" and self.axis not in ("x", "y"):
            raise ValueError(f"rect axis must be 'x' or 'y', got {self.axis!r}")


@dataclass
class Scene:
    seed: int
    extent: float
    objects: List[SceneObject] = field(default_factory=list)


@dataclass
class TrajectorySpec:
    """Closed camera loop: a ring at fixed height, gazing at one point."""

    center: Sequence[float]
    radius: float
    height: float
    look_at: Sequence[float]
    phase: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        if self.radius <= 0.0:
            raise ValueError("trajectory radius must be positive")


def _max_chroma(lightness: float, theta: float) -> float:
    """Largest sRGB-representable chroma at this lightness and hue angle."""
    ca, cb = math.cos(theta), math.sin(theta)
    lo, hi = 0.0, 135.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        lab = LabImage(L=np.array([[lightness]]),
                       a=np.array([[mid * ca]]), b=np.array([[mid * cb]]))
        back = rgb_to_lab(lab_to_rgb(lab))
        err = (abs(back.L[0, 0] - lightness)
               + abs(back.a[0, 0] - mid * ca) + abs(back.b[0, 0] - mid * cb))
        if err < 0.25:
            lo = mid
        else:
            hi = mid
    return lo


def generate_scene(seed: int, num_objects: int = 10, extent: float = 10.0) -> Scene:
    """Sample a reproducible scene.

    Object colors are built in Lab: lightness strata assigned through a
    shuffled ranking (each object gets a distinct flat gray level, so
    grayscale alone identifies it), stratified hue angles, and chroma
    near the sRGB gamut edge so every color sits far from neutral.
    Objects spawn inside a central disc the surrounding camera ring
    always frames; with the default count each one shows up large in
    many views instead of lingering at the image periphery.

    Draw order per object (after one Fisher-Yates shuffle for the
    lightness strata): hue jitter, chroma jitter, kind, rect axis,
    size, rect height, then rejection-sampled position.
    """
    if num_objects < 1:
        raise ValueError("num_objects must be >= 1")
    if extent <= 0.0:
        raise ValueError("extent must be positive")
    rng = SplitMix64(seed)

    order = list(range(num_objects))
    for i in range(num_objects - 1, 0, -1):
        j = rng.randint(i + 1)
        order[i], order[j] = order[j], order[i]

    spawn_radius = 0.40 * extent
    objects: List[SceneObject] = []
    for k in range(num_objects):
        lightness = 32.0 + 56.0 * (order[k] + 0.5) / num_objects
        theta = 2.0 * math.pi * (k + 0.3 + 0.4 * rng.uniform()) / num_objects
        # moderate chroma: far enough from neutral that colors are
        # unambiguous, low enough that proportional prediction errors
        # stay small in absolute terms
        chroma = min(0.88 * _max_chroma(lightness, theta),
                     26.0 + 16.0 * rng.uniform())
        lab = LabImage(L=np.array([[lightness]]),
                       a=np.array([[chroma * math.cos(theta)]]),
                       b=np.array([[chroma * math.sin(theta)]]))
        color = tuple(float(c) for c in lab_to_rgb(lab)[0, 0])
        kind = "rect" if rng.uniform() < 0.75 else "disc"
        axis = "x" if rng.uniform() < 0.5 else "y"
        # sized to span several pixels from across the scene, so flat
        # interiors outweigh boundary pixels at desk-scale resolutions;
        # ground discs get a boost because the shallow camera elevation
        # foreshortens them into thin ellipses
        size = 0.55 + 0.55 * rng.uniform()
        if kind == "disc":
            size *= 1.25
        height = 0.9 + 1.1 * rng.uniform()

        # rejection-sample a non-overlapping spot; if the scene is too
        # crowded, shrink deterministically until one fits
        position = None
        while position is None:
            limit = max(spawn_radius - size, 0.25 * spawn_radius)
            for _ in range(200):
                px = (rng.uniform() - 0.5) * 2.0 * limit
                py = (rng.uniform() - 0.5) * 2.0 * limit
                if px * px + py * py > limit * limit:
                    continue
                candidate = np.array([px, py, 0.0])
                if all(
                    np.linalg.norm(candidate[:2] - other.position[:2])
                    >= size + other.size + 0.1
                    for other in objects
                ):
                    position = candidate
                    break
            else:
                size *= 0.7

        objects.append(
            SceneObject(kind=kind, position=position, size=size, color=color,
                        axis=axis, height=height if kind == "rect" else 0.0)
        )
    return Scene(seed=seed, extent=extent, objects=objects)


# ---------------------------------------------------------------------------
# camera and rendering


def ring_pose(spec: TrajectorySpec, index: int, count: int) -> Pose:
    """Camera-from-world pose at one of `count` even stations on the loop."""
    if not (0 <= index < count):
        raise ValueError(f"station {index} out of range for {count}")
    theta = 2.0 * math.pi * (index + spec.phase) / count
    eye = spec.center + np.array([
        spec.radius * math.cos(theta),
        spec.radius * math.sin(theta),
        spec.height,
    ])
    forward = spec.look_at - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        raise ValueError("camera cannot gaze at its own position")
    forward = forward / norm
    right = np.cross(forward, _UP)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise ValueError("gaze direction is vertical; the loop frame is undefined")
    right = right / rnorm
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])  # rows: camera axes in world
    return Pose(x=eye, q=quat_from_rotation_matrix(rot))


def _conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def _apply_rotation(q: np.ndarray, pts: np.ndarray) -> np.ndarray:
    # expanded quaternion sandwich; bit-stable under q -> -q
    u, v = q[0], q[1:]
    t = np.cross(v, pts) + u * pts
    return pts + 2.0 * np.cross(v, t)


def _ray_grid(pose: Pose, width: int, height: int):
    """Camera center and per-pixel ray directions, both in world frame."""
    focal = float(width)
    cols = np.arange(width) + 0.5 - width / 2.0
    rows = np.arange(height) + 0.5 - height / 2.0
    d_cam = np.empty((height, width, 3))
    d_cam[..., 0] = cols[None, :]
    d_cam[..., 1] = rows[:, None]
    d_cam[..., 2] = focal
    q_inv = _conjugate(pose.q)
    dirs = _apply_rotation(q_inv, d_cam.reshape(-1, 3)).reshape(height, width, 3)
    return pose.x, dirs


def _background(dirs: np.ndarray) -> np.ndarray:
    elevation = dirs[..., 2] / np.linalg.norm(dirs, axis=-1)
    shade = np.where(
        elevation >= 0.0,
        _SKY_BASE + _SKY_GAIN * elevation,
        _GROUND_BASE + _GROUND_GAIN * elevation,
    )
    return np.repeat(shade[..., None], 3, axis=-1)


def _cover_rect(origin, dirs, obj: SceneObject) -> np.ndarray:
    n = 0 if obj.axis == "x" else 1
    u = 1 - n
    denom = dirs[..., n]
    safe = np.abs(denom) > 1e-12
    s = np.where(safe, (obj.position[n] - origin[n]) / np.where(safe, denom, 1.0), -1.0)
    hit_u = origin[u] + s * dirs[..., u]
    hit_z = origin[2] + s * dirs[..., 2]
    return (
        safe
        & (s > 1e-9)
        & (np.abs(hit_u - obj.position[u]) <= obj.size)
        & (hit_z >= 0.0)
        & (hit_z <= obj.height)
    )


def _cover_disc(origin, dirs, obj: SceneObject) -> np.ndarray:
    denom = dirs[..., 2]
    safe = np.abs(denom) > 1e-12
    s = np.where(safe, -origin[2] / np.where(safe, denom, 1.0), -1.0)
    hit_x = origin[0] + s * dirs[..., 0]
    hit_y = origin[1] + s * dirs[..., 1]
    dx = hit_x - obj.position[0]
    dy = hit_y - obj.position[1]
    return safe & (s > 1e-9) & (dx * dx + dy * dy <= obj.size * obj.size)


def render(scene: Scene, pose: Pose, width: int, height: int,
           supersample: int = 4) -> np.ndarray:
    """Render the scene as an H x W x 3 sRGB array in [0,1].

    Renders `supersample` x `supersample` rays per pixel and box-filters
    down.  At desk resolutions a fifth of all pixels touch an object
    silhouette; hard binary edges there would make the color targets a
    step function no smooth predictor can match, while fractional
    coverage keeps them learnable and localizes edges sub-pixel.
    """
    if supersample < 1:
        raise ValueError("supersample must be a positive integer")
    origin, dirs = _ray_grid(pose, width * supersample, height * supersample)
    image = _background(dirs)
    # painter's algorithm: far objects first, near objects overwrite
    order = sorted(
        scene.objects,
        key=lambda obj: -float(np.linalg.norm(obj.position - origin)),
    )
    for obj in order:
        if obj.kind == "rect":
            cover = _cover_rect(origin, dirs, obj)
        else:
            cover = _cover_disc(origin, dirs, obj)
        image[cover] = obj.color
    if supersample == 1:
        return image
    return image.reshape(height, supersample, width, supersample, 3).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# file formats


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary P6 from floats in [0,1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = quantized.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantized.tobytes())


def _read_netpbm_tokens(f, count):
    tokens = []
    while len(tokens) < count:
        line = f.readline()
        if not line:
            raise ValueError("truncated netpbm header")
        text = line.split(b"#", 1)[0]
        tokens.extend(text.split())
    return tokens


def read_ppm(path) -> np.ndarray:
    """P6 file -> H x W x 3 floats in [0,1] (values v/255)."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P6":
            raise ValueError(f"not a binary PPM (P6) file: magic {magic!r}")
        w, h, maxval = (int(t) for t in _read_netpbm_tokens(f, 3))
        if maxval != 255:
            raise ValueError(f"only 8-bit PPM supported, maxval {maxval}")
        data = f.read(w * h * 3)
        if len(data) != w * h * 3:
            raise ValueError("truncated PPM pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3) / 255.0


def read_pgm(path) -> np.ndarray:
    """P5 file -> H x W floats in [0,1]."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P5":
            raise ValueError(f"not a binary PGM (P5) file: magic {magic!r}")
        w, h, maxval = (int(t) for t in _read_netpbm_tokens(f, 3))
        if maxval != 255:
            raise ValueError(f"only 8-bit PGM supported, maxval {maxval}")
        data = f.read(w * h)
        if len(data) != w * h:
            raise ValueError("truncated PGM pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w) / 255.0


def _format_value(v: float) -> str:
    return f"{v:.17g}"


def write_poses_csv(path, poses: Sequence[Pose]) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(POSE_CSV_HEADER + "\n")
        for i, pose in enumerate(poses):
            values = [pose.x[0], pose.x[1], pose.x[2],
                      pose.q[0], pose.q[1], pose.q[2], pose.q[3]]
            f.write(str(i) + "," + ",".join(_format_value(v) for v in values) + "\n")


def read_poses_csv(path) -> List[Pose]:
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().rstrip("\n")
        if header != POSE_CSV_HEADER:
            raise ValueError(f"unexpected pose CSV header: {header!r}")
        poses: List[Pose] = []
        for line in f:
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 8:
                raise ValueError(f"pose row needs 8 fields, got {len(fields)}")
            index = int(fields[0])
            if index != len(poses):
                raise ValueError(
                    f"pose rows out of order: expected index {len(poses)}, got {index}"
                )
            values = [float(v) for v in fields[1:]]
            poses.append(Pose(x=np.array(values[:3]), q=np.array(values[3:])))
    return poses


# ---------------------------------------------------------------------------
# dataset generation and loading


def generate_dataset(scene: Scene, train_path: TrajectorySpec,
                     test_path: TrajectorySpec, n_train: int, n_test: int,
                     width: int, height: int, out_dir) -> None:
    """Render both loops and write the dataset layout under `out_dir`."""
    if n_train < 1 or n_test < 1:
        raise ValueError("both splits need at least one sample")
    if train_path.radius == test_path.radius:
        raise ValueError("train and test loops must have different radii")
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "seed": scene.seed,
        "extent": scene.extent,
        "object_count": len(scene.objects),
        "image_width": width,
        "image_height": height,
    }
    with open(os.path.join(out_dir, "scene.json"), "w", encoding="ascii") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")

    for split, spec, count in (("train", train_path, n_train),
                               ("test", test_path, n_test)):
        image_dir = os.path.join(out_dir, "images", split)
        os.makedirs(image_dir, exist_ok=True)
        poses = [ring_pose(spec, i, count) for i in range(count)]
        for i, pose in enumerate(poses):
            write_ppm(os.path.join(image_dir, f"{i:06}.ppm"),
                      render(scene, pose, width, height))
        write_poses_csv(os.path.join(out_dir, f"poses_{split}.csv"), poses)


def load_split(dataset_dir, split: str):
    """Read one split back: (images [N,H,W,3] in [0,1], list of poses)."""
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    poses = read_poses_csv(os.path.join(dataset_dir, f"poses_{split}.csv"))
    images = [
        read_ppm(os.path.join(dataset_dir, "images", split, f"{i:06}.ppm"))
        for i in range(len(poses))
    ]
    return np.stack(images), poses


def load_manifest(dataset_dir) -> dict:
    with open(os.path.join(dataset_dir, "scene.json"), "r", encoding="ascii") as f:
        return json.load(f)
