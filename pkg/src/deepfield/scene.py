"""Scene containers, manifest I/O, procedural toy scenes, view selection.

Scenes follow the Blender-export convention: a ``transforms_train.json``
manifest holding ``camera_angle_x`` (radians) and a ``frames`` list of
``{file_path, transform_matrix}`` entries with 4x4 row-major camera-to-world
matrices, next to the image files.  Images with an alpha channel are
composited onto the configured background at load time so training targets
and rendered backgrounds agree.

The procedural toy scene (lambertian spheres rendered by exact ray-sphere
intersection) exists so that end-to-end optimization can be exercised and
scored without shipping a dataset.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .render import Camera, generate_rays

__all__ = [
    "Scene",
    "Sphere",
    "load_blender_scene",
    "save_blender_scene",
    "make_toy_scene",
    "select_views_kmeans",
    "ray_sphere_depth",
    "read_image",
    "write_image",
    "look_at_origin",
]

WHITE = (1.0, 1.0, 1.0)

#: Fixed directional light used by the toy renderer.
TOY_LIGHT_DIR = (0.5, -0.4, 0.8)
TOY_AMBIENT = 0.2


# --------------------------------------------------------------------------
# containers
# --------------------------------------------------------------------------

@dataclass
class Scene:
    """A set of posed views: cameras plus float RGB targets in [0,1]."""

    cameras: list[Camera]
    images: list[np.ndarray]
    background: np.ndarray = field(
        default_factory=lambda: np.ones(3, dtype=np.float64))

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("one image per camera required")
        self.background = np.asarray(self.background, dtype=np.float64)
        for cam, img in zip(self.cameras, self.images):
            if img.shape != (cam.height, cam.width, 3):
                raise ValueError(
                    f"image shape {img.shape} does not match camera "
                    f"{cam.height}x{cam.width}")

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def width(self) -> int:
        return self.cameras[0].width

    @property
    def height(self) -> int:
        return self.cameras[0].height

    @property
    def angle_x(self) -> float:
        return self.cameras[0].angle_x

    def camera_positions(self) -> np.ndarray:
        """Camera centers as an (N, 3) array (k-means feature space)."""
        return np.stack([cam.c2w[:3, 3] for cam in self.cameras])

    def subset(self, indices) -> "Scene":
        return Scene([self.cameras[i] for i in indices],
                     [self.images[i] for i in indices],
                     self.background.copy())


# --------------------------------------------------------------------------
# image I/O
# --------------------------------------------------------------------------

def write_image(path: str, img: np.ndarray) -> None:
    """Write a float image in [0,1] (grayscale or RGB) as an 8-bit PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.rint(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def read_image(path: str, background=None) -> np.ndarray:
    """Read an image file to float RGB in [0,1].

    Alpha, when present, is composited onto ``background`` (white when not
    given) so the returned buffer is always (H, W, 3).
    """
    with Image.open(path) as im:
        rgba = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    rgb, alpha = rgba[..., :3], rgba[..., 3:]
    bg = np.asarray(WHITE if background is None else background,
                    dtype=np.float64)
    return rgb * alpha + bg * (1.0 - alpha)


# --------------------------------------------------------------------------
# Blender-format manifests
# --------------------------------------------------------------------------

def _check_pose(mat: np.ndarray, where: str) -> np.ndarray:
    if mat.shape != (4, 4):
        raise ValueError(f"{where}: transform_matrix must be 4x4, "
                         f"got {mat.shape}")
    rot = mat[:3, :3]
    if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-4):
        raise ValueError(f"{where}: rotation block is not orthonormal")
    return mat


def load_blender_scene(path: str, background=WHITE,
                       manifest_name: str = "transforms_train.json") -> Scene:
    """Load a scene directory (or a manifest file path) into a Scene."""
    if os.path.isdir(path):
        root = path
        manifest_path = os.path.join(path, manifest_name)
    else:
        root = os.path.dirname(path) or "."
        manifest_path = path
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    try:
        angle_x = float(manifest["camera_angle_x"])
        frames = manifest["frames"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed manifest {manifest_path}: {exc}") from exc
    if not frames:
        raise ValueError(f"manifest {manifest_path} lists no frames")

    cameras: list[Camera] = []
    images: list[np.ndarray] = []
    size = None
    for i, frame in enumerate(frames):
        where = f"frame {i}"
        try:
            rel = frame["file_path"]
            mat = np.asarray(frame["transform_matrix"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{where}: malformed entry: {exc}") from exc
        c2w = _check_pose(mat, where)
        img_path = os.path.normpath(os.path.join(root, rel))
        if not os.path.exists(img_path):
            if os.path.exists(img_path + ".png"):
                img_path += ".png"
            else:
                raise FileNotFoundError(f"{where}: image not found: {img_path}")
        img = read_image(img_path, background).astype(np.float32)
        if size is None:
            size = img.shape[:2]
        elif img.shape[:2] != size:
            raise ValueError(
                f"{where}: image size {img.shape[:2]} differs from {size}")
        h, w = img.shape[:2]
        cameras.append(Camera.from_fov(c2w, w, h, angle_x))
        images.append(img)
    return Scene(cameras, images, np.asarray(background, dtype=np.float64))


def save_blender_scene(scene: Scene, out_dir: str, split: str = "train") -> str:
    """Write a Scene as a manifest + 8-bit PNGs; returns the manifest path.

    Poses are written as full-precision floats, so a reload compares
    bit-equal; images round-trip within 8-bit quantization.
    """
    img_dir = os.path.join(out_dir, split)
    os.makedirs(img_dir, exist_ok=True)
    frames = []
    for i, (cam, img) in enumerate(zip(scene.cameras, scene.images)):
        rel = f"./{split}/r_{i}"
        write_image(os.path.join(out_dir, rel + ".png"), img)
        frames.append({"file_path": rel,
                       "transform_matrix": cam.c2w.tolist()})
    manifest = {"camera_angle_x": scene.angle_x, "frames": frames}
    manifest_path = os.path.join(out_dir, f"transforms_{split}.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest_path


# --------------------------------------------------------------------------
# toy scenes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Sphere:
    """A lambertian-shaded sphere of the toy scene."""

    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]


DEFAULT_SPHERES = (
    Sphere(center=(0.0, 0.0, 0.0), radius=0.9, albedo=(0.85, 0.35, 0.25)),
    Sphere(center=(0.55, 0.6, 0.65), radius=0.45, albedo=(0.25, 0.45, 0.85)),
)


def ray_sphere_depth(origins: np.ndarray, dirs: np.ndarray,
                     center, radius: float) -> np.ndarray:
    """Depth of the near ray-sphere intersection; NaN where the ray misses.

    Expects unit direction vectors; only intersections in front of the
    origin (t > 0) count as hits.
    """
    oc = origins - np.asarray(center, dtype=np.float64)
    b = np.einsum("ij,ij->i", dirs, oc)
    q = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - q
    t = np.full(len(origins), np.nan)
    ok = disc >= 0.0
    root = np.sqrt(np.where(ok, disc, 0.0))
    near = -b - root
    hit = ok & (near > 0.0)
    t[hit] = near[hit]
    return t


def look_at_origin(eye, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at `eye` looking at the origin."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = -eye / np.linalg.norm(eye)          # camera -z axis
    up = np.asarray(up, dtype=np.float64)
    if abs(float(forward @ up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = -forward
    c2w[:3, 3] = eye
    return c2w


def _shade_toy(origins, dirs, spheres, background):
    """Exact nearest-hit lambertian shading for a batch of rays."""
    n = len(origins)
    depth = np.full(n, np.inf)
    which = np.full(n, -1)
    for idx, sp in enumerate(spheres):
        t = ray_sphere_depth(origins, dirs, sp.center, sp.radius)
        closer = np.isfinite(t) & (t < depth)
        depth[closer] = t[closer]
        which[closer] = idx
    rgb = np.broadcast_to(np.asarray(background, dtype=np.float64),
                          (n, 3)).copy()
    light = np.asarray(TOY_LIGHT_DIR, dtype=np.float64)
    light = light / np.linalg.norm(light)
    for idx, sp in enumerate(spheres):
        sel = which == idx
        if not sel.any():
            continue
        pts = origins[sel] + depth[sel, None] * dirs[sel]
        normals = (pts - np.asarray(sp.center)) / sp.radius
        lam = np.maximum(normals @ light, 0.0)
        shade = TOY_AMBIENT + (1.0 - TOY_AMBIENT) * lam
        rgb[sel] = np.asarray(sp.albedo) * shade[:, None]
    return rgb


def make_toy_scene(n_views: int, seed: int, image_size: int = 64,
                   spheres=DEFAULT_SPHERES, half_extent: float = 1.5,
                   background=WHITE, angle_x: float = 0.5,
                   supersample: int = 2) -> Scene:
    """Procedural sphere scene with analytically rendered ground truth.

    Cameras sit on a sphere of radius 4x the scene half-extent (seeded
    uniform directions) looking at the origin; images are rendered by exact
    ray-sphere intersection with a fixed directional light, supersampled
    `supersample`^2 per pixel.
    """
    if not 1 <= len(spheres) <= 4:
        raise ValueError("toy scenes hold 1-4 spheres")
    for sp in spheres:
        if np.max(np.abs(np.asarray(sp.center))) + sp.radius > half_extent:
            raise ValueError(
                f"sphere at {sp.center} r={sp.radius} pokes outside the "
                f"[-{half_extent}, {half_extent}]^3 box")
    rng = np.random.Generator(np.random.PCG64(seed))
    radius = 4.0 * half_extent
    bg = np.asarray(background, dtype=np.float64)

    cameras, images = [], []
    s = int(supersample)
    for _ in range(n_views):
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        cam = Camera.from_fov(look_at_origin(radius * u),
                              image_size, image_size, angle_x)
        fine = Camera(cam.c2w, cam.width * s, cam.height * s, cam.focal * s)
        origins, dirs = generate_rays(fine)
        rgb = _shade_toy(origins, dirs, spheres, bg)
        img = rgb.reshape(fine.height, fine.width, 3)
        img = img.reshape(cam.height, s, cam.width, s, 3).mean(axis=(1, 3))
        cameras.append(cam)
        images.append(img.astype(np.float32))
    return Scene(cameras, images, bg)


# --------------------------------------------------------------------------
# k-means view selection
# --------------------------------------------------------------------------

def _kmeans_pp_init(points: np.ndarray, k: int,
                    rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def select_views_kmeans(positions: np.ndarray, k: int, seed: int,
                        max_iter: int = 100, tol: float = 1e-9) -> list[int]:
    """Pick k spread-out view indices by k-means over camera positions.

    k-means++ init, Lloyd iterations until centroids move less than `tol`
    (or `max_iter`); the selected views are those nearest each centroid,
    with ties resolved to the lower index and duplicates to the next
    nearest.  Deterministic in `seed`; returns sorted indices.
    """
    points = np.asarray(positions, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"positions must be (N,3), got {points.shape}")
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} views")
    rng = np.random.Generator(np.random.PCG64(seed))
    centroids = _kmeans_pp_init(points, k, rng)
    for _ in range(max_iter):
        d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assign = d2.argmin(axis=1)
        moved = 0.0
        for j in range(k):
            members = points[assign == j]
            if len(members) == 0:
                # re-seed an empty cluster at the point farthest from its
                # assigned centroid (deterministic repair)
                far = int(d2[np.arange(n), assign].argmax())
                new = points[far]
            else:
                new = members.mean(axis=0)
            moved = max(moved, float(np.sum((new - centroids[j]) ** 2)))
            centroids[j] = new
        if moved < tol * tol:
            break

    chosen: list[int] = []
    for j in range(k):
        dist = np.sum((points - centroids[j]) ** 2, axis=1)
        for idx in np.argsort(dist, kind="stable"):
            if int(idx) not in chosen:
                chosen.append(int(idx))
                break
    return sorted(chosen)
