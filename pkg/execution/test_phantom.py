#!/usr/bin/env python3
"""
Tests for the synthetic head phantoms: geometry, atrophy truth, acquisition
effects and cohort files.
"""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from imgvol import Grid, Volume, load_volume, read_nifti
from phantom import (
    PhantomSpec, apply_acquisition, apply_atrophy, generate_cohort, grid_center, make_head_phantom,
    rigid_transform,
)
from segment import GM, WM


@pytest.fixture(scope="module")
def spec():
    return PhantomSpec(dims=(64, 64, 64), spacing=(2.0, 2.0, 2.0), brain_radius_mm=40.0)


@pytest.fixture(scope="module")
def phantom(spec):
    return make_head_phantom(spec, 1.0)


def radius_map(grid: Grid) -> np.ndarray:
    rel = grid.world_coordinates() - grid_center(grid).reshape(3, 1, 1, 1)
    return np.sqrt((rel ** 2).sum(axis=0))


# ========== GEOMETRY ==========


def test_spec_rejects_head_that_does_not_fit():
    with pytest.raises(ValueError, match="does not fit"):
        PhantomSpec(dims=(32, 32, 32), spacing=(2.0, 2.0, 2.0), brain_radius_mm=40.0)


def test_spec_rejects_bad_intensity_order():
    intensities = {"background": 0, "CSF": 30, "skull": 100, "GM": 90, "WM": 130, "scalp": 110}
    with pytest.raises(ValueError, match="intensities"):
        PhantomSpec(dims=(64, 64, 64), spacing=(2.0, 2.0, 2.0), brain_radius_mm=40.0, intensities=intensities)


def test_brain_mask_volume_matches_analytic(spec, phantom):
    _, mask, _ = phantom
    measured = mask.data.sum() * spec.grid.voxel_volume
    assert measured == pytest.approx(spec.brain_volume_mm3(), rel=0.02)


def test_ellipsoidal_head_volume():
    oblate = PhantomSpec(dims=(64, 64, 64), spacing=(2.0, 2.0, 2.0), brain_radius_mm=40.0,
                         axis_ratios=(1.0, 0.9, 0.8))
    _, mask, _ = make_head_phantom(oblate)
    measured = mask.data.sum() * oblate.grid.voxel_volume
    assert measured == pytest.approx(oblate.brain_volume_mm3(), rel=0.03)
    assert oblate.brain_volume_mm3() == pytest.approx(0.72 * 4.0 / 3.0 * np.pi * 40.0 ** 3)


def test_layer_fractions_shape_the_tissue_counts():
    thin_wm = PhantomSpec(dims=(64, 64, 64), spacing=(2.0, 2.0, 2.0), brain_radius_mm=40.0,
                          layer_fracs=(0.1, 0.4, 0.5))
    _, _, seg = make_head_phantom(thin_wm)
    assert 0 < seg.count(WM) < seg.count(GM)


def test_background_is_zero_outside_the_head(spec, phantom):
    volume, _, _ = phantom
    outside = radius_map(spec.grid) > spec.head_radius_mm + spec.spacing[0]
    assert outside.any()
    assert np.all(volume.data[outside] == 0.0)


# ========== ATROPHY ==========


def test_unit_scale_gives_identical_volumes(spec):
    t0, t1, truth = apply_atrophy(spec, 1.0)
    assert np.array_equal(t0.data, t1.data)
    assert truth.pbvc_true_percent == 0.0


@pytest.mark.parametrize("s,expected", [(0.99, -2.9701), (1.01, 3.0301)])
def test_truth_pbvc(spec, s, expected):
    _, _, truth = apply_atrophy(spec, s)
    assert truth.pbvc_true_percent == pytest.approx(expected, abs=1e-9)
    assert truth.applied_scale == s


@pytest.mark.parametrize("s", [0.89, 1.11])
def test_atrophy_scale_range(spec, s):
    with pytest.raises(ValueError, match="outside"):
        apply_atrophy(spec, s)


def test_mask_volume_ratio_follows_cube_of_scale(spec, phantom):
    _, mask0, _ = phantom
    _, mask1, _ = make_head_phantom(spec, 0.95)
    assert mask1.data.sum() / mask0.data.sum() == pytest.approx(0.95 ** 3, rel=0.01)


def test_skull_and_scalp_are_untouched_by_atrophy(spec):
    t0, t1, _ = apply_atrophy(spec, 1.05)
    shell = radius_map(spec.grid) >= spec.skull_inner_mm
    assert np.array_equal(t0.data[shell], t1.data[shell])
    assert not np.array_equal(t0.data, t1.data)


def test_default_spec_rejects_scale_that_reaches_the_skull():
    default = PhantomSpec()
    assert default.max_scale == pytest.approx(64.0 / 60.0)
    with pytest.raises(ValueError, match="into the skull"):
        apply_atrophy(default, 1.1)
    with pytest.raises(ValueError, match="into the skull"):
        make_head_phantom(default, 1.07)


def test_cohort_rejects_scales_beyond_the_skull(tmp_path):
    with pytest.raises(ValueError, match="exceed max"):
        generate_cohort(PhantomSpec(), [1.0, 1.1], tmp_path)
    assert not (tmp_path / "manifest.csv").exists()


def test_largest_allowed_scale_keeps_cube_ratio(spec, phantom):
    assert spec.max_scale == pytest.approx(1.1)
    _, mask0, _ = phantom
    _, mask1, _ = make_head_phantom(spec, 1.08)
    assert mask1.data.sum() / mask0.data.sum() == pytest.approx(1.08 ** 3, rel=0.01)


def test_phantom_is_deterministic(spec, phantom):
    volume, mask, seg = make_head_phantom(spec, 1.0)
    assert np.array_equal(volume.data, phantom[0].data)
    assert np.array_equal(mask.data, phantom[1].data)
    assert np.array_equal(seg.labels, phantom[2].labels)


# ========== ACQUISITION ==========


def test_identity_acquisition_returns_input(phantom):
    volume, _, _ = phantom
    assert apply_acquisition(volume, 0.0, 0.0, np.eye(4), seed=1) is volume


def test_noise_standard_deviation():
    grid = Grid.from_spacing((32, 32, 32), (1.0, 1.0, 1.0))
    flat = Volume(grid, np.full(grid.dims, 100.0))
    noisy = apply_acquisition(flat, 5.0, 0.0, np.eye(4), seed=7)
    assert noisy.data.std() == pytest.approx(5.0, rel=0.1)
    again = apply_acquisition(flat, 5.0, 0.0, np.eye(4), seed=7)
    assert np.array_equal(noisy.data, again.data)


def test_rigid_translation_moves_content():
    grid = Grid.from_spacing((32, 32, 32), (1.0, 1.0, 1.0))
    x, y, z = grid.world_coordinates()
    ramp = Volume(grid, 2.0 * x + y - z + 100.0)
    moved = apply_acquisition(ramp, 0.0, 0.0, rigid_transform((5.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0, 0, 0)), seed=0)
    interior = moved.data[8:, :, :]
    assert np.allclose(interior, ramp.data[8:, :, :] - 10.0, atol=1e-9)


def test_non_rigid_transform_rejected(phantom):
    volume, _, _ = phantom
    scaled = np.diag([1.05, 1.0, 1.0, 1.0])
    with pytest.raises(ValueError, match="non-rigid"):
        apply_acquisition(volume, 0.0, 0.0, scaled, seed=0)


# ========== COHORT ==========


def test_generate_cohort_writes_manifest_truth_and_labelmaps(tmp_path):
    small = PhantomSpec(dims=(48, 48, 48), spacing=(3.0, 3.0, 3.0), brain_radius_mm=40.0, seed=5)
    manifest_path, truth_path = generate_cohort(small, [0.99, 1.0], tmp_path, noise_frac=0.02,
                                                rigid_mm=2.0, rigid_rad=0.01)

    manifest = pd.read_csv(manifest_path)
    assert list(manifest.columns) == ["subject_id", "t0", "mask_t0", "labelmap_t0", "t1", "mask_t1", "labelmap_t1"]
    assert len(manifest) == 2
    for column in manifest.columns[1:]:
        for path in manifest[column]:
            assert Path(path).exists()

    labels, code = read_nifti(manifest.loc[0, "labelmap_t0"])
    assert code == 4
    assert set(np.unique(labels.data).astype(int)) <= {0, 2, 3, 24, 41, 42}

    mask = load_volume(manifest.loc[0, "mask_t1"])
    assert set(np.unique(mask.data)) <= {0.0, 1.0}

    with open(truth_path, encoding="utf-8") as f:
        truth = json.load(f)
    by_scale = {s["applied_scale"]: s for s in truth["subjects"]}
    assert by_scale[0.99]["pbvc_true_percent"] == pytest.approx(-2.9701, abs=1e-9)
    assert by_scale[1.0]["pbvc_true_percent"] == 0.0
    assert truth["spec"]["brain_radius_mm"] == 40.0


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
