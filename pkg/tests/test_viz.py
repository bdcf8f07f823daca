"""Tests for feature-plane export and report figures."""

import os

import numpy as np
import pytest
from PIL import Image

from deepfield.viz import (export_feature_plane, normalize_plane,
                           save_comparison_chart, save_feature_montage,
                           save_training_curve, save_view_bars)


def test_constant_plane_exports_mid_gray(tmp_path):
    plane = np.full((2, 6, 5), 3.7)
    path = str(tmp_path / "flat.png")
    out = export_feature_plane(plane, 0, path)
    assert np.all(out == 0.5)
    px = np.asarray(Image.open(path))
    assert px.shape == (6, 5)
    assert px.min() == px.max()
    assert px[0, 0] in (127, 128)


def test_single_max_entry_is_single_white_pixel(tmp_path):
    plane = np.zeros((1, 4, 4))
    plane[0, 2, 1] = 5.0
    path = str(tmp_path / "spike.png")
    export_feature_plane(plane, 0, path)
    px = np.asarray(Image.open(path))
    assert px[2, 1] == 255
    assert (px == 255).sum() == 1
    assert (px == 0).sum() == 15


def test_normalization_inverse_map(tmp_path):
    rng = np.random.Generator(np.random.PCG64(0))
    plane = rng.normal(0, 2.0, (3, 8, 7))
    path = str(tmp_path / "plane.png")
    out = export_feature_plane(plane, 1, path)
    lo, hi = plane[1].min(), plane[1].max()
    assert np.allclose(out * (hi - lo) + lo, plane[1], atol=1e-12)
    png = np.asarray(Image.open(path)) / 255.0
    assert np.max(np.abs(png * (hi - lo) + lo - plane[1])) <= (hi - lo) / 255.0


def test_export_channel_bounds(tmp_path):
    with pytest.raises(ValueError):
        export_feature_plane(np.zeros((2, 4, 4)), 2, str(tmp_path / "x.png"))
    with pytest.raises(ValueError):
        export_feature_plane(np.zeros((2, 3, 4, 4)), 0, str(tmp_path / "x.png"))


def test_normalize_plane_handles_constant():
    assert np.all(normalize_plane(np.ones((3, 3))) == 0.5)
    ramp = normalize_plane(np.arange(9.0).reshape(3, 3))
    assert ramp.min() == 0.0 and ramp.max() == 1.0


def test_report_figures_write_files(tmp_path):
    history = [{"iter": i, "loss": 1.0 / (i + 1), "train_psnr": 10 + 0.1 * i}
               for i in range(0, 500, 100)]
    curve = save_training_curve(history, str(tmp_path / "curve.png"))
    bars = save_view_bars([0, 1, 2], [21.0, 24.5, 19.8],
                          str(tmp_path / "bars.png"), ssims=[0.8, 0.9, 0.75])
    comp = save_comparison_chart(["seed 0", "seed 1"], [24.0, 23.5],
                                 [22.0, 23.9], str(tmp_path / "comp.png"))
    rng = np.random.Generator(np.random.PCG64(1))
    montage = save_feature_montage(
        {"plane0": rng.normal(0, 1, (16, 12, 12)),
         "plane1": rng.normal(0, 1, (16, 12, 12))},
        str(tmp_path / "montage.png"))
    for path in (curve, bars, comp, montage):
        assert os.path.exists(path)
        assert os.path.getsize(path) > 1024
