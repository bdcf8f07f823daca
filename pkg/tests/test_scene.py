"""Tests for scene I/O, the procedural toy scene, and view selection."""

import json
import os

import numpy as np
import pytest
from PIL import Image

from deepfield.render import generate_rays
from deepfield.scene import (Scene, Sphere, load_blender_scene,
                             look_at_origin, make_toy_scene, ray_sphere_depth,
                             read_image, save_blender_scene,
                             select_views_kmeans, write_image)


def rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------- image I/O

def test_image_roundtrip_within_quantization(tmp_path):
    img = rng(0).random((12, 9, 3))
    path = str(tmp_path / "img.png")
    write_image(path, img)
    back = read_image(path)
    assert back.shape == (12, 9, 3)
    assert np.max(np.abs(back - img)) <= 0.5 / 255.0 + 1e-9


def test_read_image_composites_alpha(tmp_path):
    rgba = np.zeros((4, 4, 4), dtype=np.uint8)
    rgba[..., 0] = 255          # pure red where visible
    rgba[:2, :, 3] = 0          # top half fully transparent
    rgba[2:, :, 3] = 255        # bottom half opaque
    path = str(tmp_path / "a.png")
    Image.fromarray(rgba).save(path)
    img = read_image(path, background=(1.0, 1.0, 1.0))
    assert np.allclose(img[0, 0], [1.0, 1.0, 1.0])   # alpha=0 -> background
    assert np.allclose(img[3, 0], [1.0, 0.0, 0.0])   # opaque -> own color


# ----------------------------------------------------------------- manifest

def test_save_load_roundtrip_poses_bitexact(tmp_path):
    scene = make_toy_scene(n_views=3, seed=11, image_size=16)
    out = str(tmp_path / "scene")
    save_blender_scene(scene, out)
    loaded = load_blender_scene(out)
    assert len(loaded) == 3
    assert loaded.angle_x == pytest.approx(scene.angle_x, abs=1e-15)
    for a, b in zip(scene.cameras, loaded.cameras):
        assert a.c2w.tobytes() == b.c2w.tobytes()
    for a, b in zip(scene.images, loaded.images):
        assert np.max(np.abs(a - b)) <= 0.5 / 255.0 + 1e-9


def test_load_minimal_identity_manifest(tmp_path):
    write_image(str(tmp_path / "r_0.png"), np.full((8, 8, 3), 0.5))
    manifest = {"camera_angle_x": 0.6,
                "frames": [{"file_path": "./r_0",
                            "transform_matrix": np.eye(4).tolist()}]}
    with open(tmp_path / "transforms_train.json", "w") as fh:
        json.dump(manifest, fh)
    scene = load_blender_scene(str(tmp_path))
    cam = scene.cameras[0]
    assert np.allclose(cam.c2w[:3, 3], 0.0)          # camera at origin
    origins, dirs = generate_rays(cam)
    center = dirs.reshape(8, 8, 3)[4, 4]
    assert center[2] < 0                              # looking down -z
    assert abs(center[0]) < 0.1 and abs(center[1]) < 0.1


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_blender_scene(str(tmp_path / "nope"))

    bad = {"camera_angle_x": 0.6,
           "frames": [{"file_path": "./r_0",
                       "transform_matrix": [[1, 0], [0, 1]]}]}
    with open(tmp_path / "transforms_train.json", "w") as fh:
        json.dump(bad, fh)
    with pytest.raises(ValueError, match="4x4"):
        load_blender_scene(str(tmp_path))

    skewed = np.eye(4)
    skewed[0, 1] = 0.5
    bad["frames"][0]["transform_matrix"] = skewed.tolist()
    with open(tmp_path / "transforms_train.json", "w") as fh:
        json.dump(bad, fh)
    with pytest.raises(ValueError, match="orthonormal"):
        load_blender_scene(str(tmp_path))

    bad["frames"][0]["transform_matrix"] = np.eye(4).tolist()
    with open(tmp_path / "transforms_train.json", "w") as fh:
        json.dump(bad, fh)
    with pytest.raises(FileNotFoundError, match="image"):
        load_blender_scene(str(tmp_path))


def test_load_rejects_size_mismatch(tmp_path):
    write_image(str(tmp_path / "r_0.png"), np.full((8, 8, 3), 0.5))
    write_image(str(tmp_path / "r_1.png"), np.full((9, 8, 3), 0.5))
    manifest = {"camera_angle_x": 0.6,
                "frames": [{"file_path": f"./r_{i}",
                            "transform_matrix": np.eye(4).tolist()}
                           for i in range(2)]}
    with open(tmp_path / "transforms_train.json", "w") as fh:
        json.dump(manifest, fh)
    with pytest.raises(ValueError, match="size"):
        load_blender_scene(str(tmp_path))


def test_scene_shape_guard():
    cam = make_toy_scene(1, seed=0, image_size=8).cameras[0]
    with pytest.raises(ValueError):
        Scene([cam], [np.zeros((4, 4, 3), dtype=np.float32)])


# -------------------------------------------------------------- ray-sphere

def test_ray_sphere_depth_matches_quadratic_oracle():
    r = rng(7)
    center = np.array([0.2, -0.3, 0.4])
    radius = 0.8
    origins = r.normal(0, 1, (500, 3))
    origins *= (3.0 + 2.0 * r.random((500, 1))) / np.linalg.norm(
        origins, axis=1, keepdims=True)
    dirs = r.normal(0, 1, (500, 3))
    # aim the first half roughly at the sphere so hits are plentiful
    dirs[:250] = center + r.normal(0, 0.4, (250, 3)) - origins[:250]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    t = ray_sphere_depth(origins, dirs, center, radius)

    # literal quadratic-formula oracle: a t^2 + b t + c = 0
    a = np.sum(dirs * dirs, axis=1)
    b = 2.0 * np.sum(dirs * (origins - center), axis=1)
    c = np.sum((origins - center) ** 2, axis=1) - radius ** 2
    disc = b * b - 4.0 * a * c
    hit = disc >= 0
    t_near = np.where(hit, (-b - np.sqrt(np.abs(disc))) / (2.0 * a), np.nan)
    t_near = np.where(hit & (t_near > 0), t_near, np.nan)

    assert np.array_equal(np.isnan(t), np.isnan(t_near))
    both = ~np.isnan(t)
    assert both.sum() > 20
    assert np.max(np.abs(t[both] - t_near[both])) < 1e-9


# ---------------------------------------------------------------- toy scene

def test_toy_scene_centered_disk_and_exact_background():
    scene = make_toy_scene(
        n_views=4, seed=3, image_size=16,
        spheres=(Sphere((0.0, 0.0, 0.0), 0.9, (0.8, 0.3, 0.2)),))
    for img in scene.images:
        assert img.shape == (16, 16, 3)
        center = img[8, 8]
        assert not np.allclose(center, 1.0)           # sphere covers center
        for corner in (img[0, 0], img[0, -1], img[-1, 0], img[-1, -1]):
            assert np.array_equal(corner, np.ones(3, dtype=np.float32))


def test_toy_scene_custom_background_exact():
    bg = (0.2, 0.3, 0.4)
    scene = make_toy_scene(n_views=1, seed=5, image_size=12, background=bg)
    img = scene.images[0]
    assert np.array_equal(img[0, 0],
                          np.asarray(bg, dtype=np.float64).astype(np.float32))


def test_toy_scene_deterministic_in_seed():
    a = make_toy_scene(n_views=3, seed=9, image_size=12)
    b = make_toy_scene(n_views=3, seed=9, image_size=12)
    c = make_toy_scene(n_views=3, seed=10, image_size=12)
    for ia, ib in zip(a.images, b.images):
        assert ia.tobytes() == ib.tobytes()
    assert not np.allclose(a.camera_positions(), c.camera_positions())


def test_toy_scene_cameras_on_radius_sphere_looking_in():
    scene = make_toy_scene(n_views=5, seed=2, image_size=8)
    pos = scene.camera_positions()
    assert np.allclose(np.linalg.norm(pos, axis=1), 6.0)  # 4 x 1.5
    for cam in scene.cameras:
        view_dir = -cam.c2w[:3, 2]                        # camera -z in world
        toward = -cam.c2w[:3, 3] / np.linalg.norm(cam.c2w[:3, 3])
        assert np.allclose(view_dir, toward, atol=1e-12)
        rot = cam.c2w[:3, :3]
        assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-12)


def test_toy_scene_validation():
    with pytest.raises(ValueError, match="outside"):
        make_toy_scene(1, seed=0,
                       spheres=(Sphere((1.2, 0, 0), 0.5, (1, 1, 1)),))
    with pytest.raises(ValueError, match="1-4"):
        make_toy_scene(1, seed=0, spheres=tuple(
            Sphere((0, 0, 0), 0.1, (1, 1, 1)) for _ in range(5)))


# ------------------------------------------------------------ view selection

def test_kmeans_select_all_when_k_equals_n():
    pts = rng(1).normal(0, 1, (6, 3))
    assert select_views_kmeans(pts, 6, seed=0) == list(range(6))
    with pytest.raises(ValueError):
        select_views_kmeans(pts, 7, seed=0)


def test_kmeans_deterministic_in_seed():
    pts = rng(2).normal(0, 1, (20, 3))
    a = select_views_kmeans(pts, 5, seed=42)
    b = select_views_kmeans(pts, 5, seed=42)
    assert a == b
    assert len(set(a)) == 5


def test_kmeans_two_separated_groups():
    r = rng(3)
    left = r.normal(0, 0.1, (4, 3)) + np.array([-10.0, 0, 0])
    right = r.normal(0, 0.1, (4, 3)) + np.array([10.0, 0, 0])
    pts = np.concatenate([left, right])
    for seed in range(5):
        sel = select_views_kmeans(pts, 2, seed=seed)
        groups = {int(i) // 4 for i in sel}
        assert groups == {0, 1}, f"seed {seed}: {sel}"


def test_kmeans_duplicate_positions_yield_distinct_indices():
    pts = np.zeros((5, 3))
    sel = select_views_kmeans(pts, 3, seed=0)
    assert len(sel) == len(set(sel)) == 3


def test_kmeans_selection_tracks_clusters_under_permutation():
    r = rng(4)
    clusters = [r.normal(0, 0.05, (3, 3)) + c
                for c in ([8, 0, 0], [-8, 0, 0], [0, 8, 0])]
    pts = np.concatenate(clusters)
    sel = select_views_kmeans(pts, 3, seed=1)
    perm = r.permutation(9)
    sel_perm = select_views_kmeans(pts[perm], 3, seed=1)
    # the same physical points are chosen regardless of input order
    chosen_original = {tuple(np.round(pts[i], 12)) for i in sel}
    chosen_permuted = {tuple(np.round(pts[perm][i], 12)) for i in sel_perm}
    assert chosen_original == chosen_permuted
