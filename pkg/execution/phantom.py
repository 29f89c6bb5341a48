#!/usr/bin/env python3
"""
Synthetic head phantoms - Layer 3 Execution Script
Concentric ellipsoidal heads with analytically known atrophy.

Shells from the centre outward: WM core, GM, CSF rim (together the brain),
a CSF-intensity gap, dark skull, bright scalp, zero background. Every voxel
is the average of a 3x3x3 sub-sample grid so edges carry partial volume.

Usage:
    python execution/phantom.py --scales 0.98 0.99 1.0 1.01 --out tmp/phantoms
"""

import argparse
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import polar
from scipy.spatial.transform import Rotation

from imgvol import Grid, Volume, check_affine, resample, save_volume
from run_log import log
from segment import BG, CSF, GM, WM, TissueSegmentation

BASE_DIR = Path(__file__).parent.parent
TMP_DIR = BASE_DIR / "tmp"

DEFAULT_INTENSITIES = {
    "background": 0.0,
    "CSF": 30.0,
    "skull": 34.0,
    "GM": 90.0,
    "WM": 130.0,
    "scalp": 110.0,
}

# Region codes used while sub-sampling
_WM, _GM, _CSF, _GAP, _SKULL, _SCALP, _BG = range(7)
_SUB_OFFSETS = (-1.0 / 3.0, 0.0, 1.0 / 3.0)
MARGIN_VOXELS = 3

# Codes written into the synthetic anatomical label map (left, right)
LABELMAP_CODES = {WM: (2, 41), GM: (3, 42), CSF: (24, 24)}


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (128, 128, 128)
    spacing: Tuple[float, float, float] = (1.5, 1.5, 1.5)
    brain_radius_mm: float = 60.0
    layer_fracs: Tuple[float, float, float] = (0.02, 0.38, 0.60)  # csf, gm, wm
    skull_inner_offset_mm: float = 4.0
    skull_thickness_mm: float = 6.0
    scalp_thickness_mm: float = 5.0
    intensities: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    axis_ratios: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if len(self.layer_fracs) != 3 or min(self.layer_fracs) < 0:
            raise ValueError(f"layer_fracs must be three nonnegative fractions, got {self.layer_fracs}")
        if abs(sum(self.layer_fracs) - 1.0) > 1e-9:
            raise ValueError(f"layer_fracs must sum to 1, got {sum(self.layer_fracs)}")
        if min(self.axis_ratios) <= 0:
            raise ValueError(f"axis_ratios must be > 0, got {self.axis_ratios}")
        if min(self.brain_radius_mm, self.skull_thickness_mm) <= 0:
            raise ValueError("brain radius and skull thickness must be > 0")
        if min(self.skull_inner_offset_mm, self.scalp_thickness_mm) < 0:
            raise ValueError("skull offset and scalp thickness must be >= 0")

        i = self.intensities
        missing = set(DEFAULT_INTENSITIES) - set(i)
        if missing:
            raise ValueError(f"intensities missing {sorted(missing)}")
        if not (i["background"] < i["CSF"] < i["skull"] < i["GM"] < i["WM"] and i["scalp"] > i["skull"]):
            raise ValueError(f"intensities must follow background < CSF < skull < GM < WM, scalp > skull: {i}")

        # head must fit with a margin along every axis
        for k in range(3):
            half_extent = ((self.dims[k] - 1) / 2.0 - MARGIN_VOXELS) * self.spacing[k]
            if self.head_radius_mm * self.axis_ratios[k] > half_extent:
                raise ValueError(
                    f"phantom does not fit: head radius {self.head_radius_mm * self.axis_ratios[k]:.1f} mm "
                    f"along axis {k} exceeds {half_extent:.1f} mm"
                )

    @property
    def skull_inner_mm(self) -> float:
        return self.brain_radius_mm + self.skull_inner_offset_mm

    @property
    def max_scale(self) -> float:
        """Largest brain scale that keeps the brain inside the inner skull surface."""
        return self.skull_inner_mm / self.brain_radius_mm

    @property
    def head_radius_mm(self) -> float:
        return self.skull_inner_mm + self.skull_thickness_mm + self.scalp_thickness_mm

    @property
    def grid(self) -> Grid:
        return Grid.from_spacing(self.dims, self.spacing)

    def brain_volume_mm3(self, scale: float = 1.0) -> float:
        r = self.brain_radius_mm * scale
        return 4.0 / 3.0 * np.pi * r ** 3 * float(np.prod(self.axis_ratios))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intensities"] = dict(sorted(self.intensities.items()))
        return d


@dataclass(frozen=True)
class PhantomTruth:
    brain_volume_mm3: float
    pbvc_true_percent: float
    applied_scale: float

    def to_dict(self) -> dict:
        return asdict(self)


def grid_center(grid: Grid) -> np.ndarray:
    mid = (np.array(grid.dims, dtype=np.float64) - 1.0) / 2.0
    return grid.voxel_to_world(mid).ravel()


def _classify(rho: np.ndarray, spec: PhantomSpec, scale: float) -> np.ndarray:
    """Region code per sample from the normalized ellipsoidal radius."""
    csf_f, gm_f, wm_f = spec.layer_fracs
    r = spec.brain_radius_mm * scale
    gap_end = spec.skull_inner_mm
    skull_end = gap_end + spec.skull_thickness_mm
    scalp_end = skull_end + spec.scalp_thickness_mm

    bounds = [
        wm_f * r,
        (wm_f + gm_f) * r,
        r,
        gap_end,
        skull_end,
        scalp_end,
    ]
    return np.searchsorted(np.array(bounds), rho, side="left").astype(np.int8)


def make_head_phantom(spec: PhantomSpec, scale: float = 1.0):
    """
    Build one phantom.

    Raises ValueError when the scaled brain would reach the skull.

    Returns:
        (Volume, brain mask Volume (0/1), TissueSegmentation truth)
    """
    if not 0.0 < scale <= spec.max_scale:
        raise ValueError(
            f"scale {scale} would push the brain into the skull: "
            f"max {spec.max_scale:.4f} for brain radius {spec.brain_radius_mm} mm"
        )
    grid = spec.grid
    center = grid_center(grid)
    world = grid.world_coordinates()
    a3 = grid.affine[:3, :3]
    axes = np.array(spec.axis_ratios, dtype=np.float64).reshape(3, 1, 1, 1)

    region_intensity = np.array([
        spec.intensities["WM"],
        spec.intensities["GM"],
        spec.intensities["CSF"],
        spec.intensities["CSF"],
        spec.intensities["skull"],
        spec.intensities["scalp"],
        spec.intensities["background"],
    ])

    total = np.zeros(grid.dims)
    counts = np.zeros((4,) + grid.dims, dtype=np.int16)  # wm, gm, csf, non-brain
    for ox in _SUB_OFFSETS:
        for oy in _SUB_OFFSETS:
            for oz in _SUB_OFFSETS:
                shift = a3 @ np.array([ox, oy, oz])
                rel = (world + shift.reshape(3, 1, 1, 1) - center.reshape(3, 1, 1, 1)) / axes
                rho = np.sqrt(np.einsum("a...,a...->...", rel, rel))
                region = _classify(rho, spec, scale)
                total += region_intensity[region]
                counts[0] += region == _WM
                counts[1] += region == _GM
                counts[2] += region == _CSF
                counts[3] += region > _CSF

    n_sub = len(_SUB_OFFSETS) ** 3
    data = total / n_sub

    brain = (counts[0] + counts[1] + counts[2]) * 2 > n_sub
    # argmax over (CSF, GM, WM) counts, ties resolved towards CSF
    tissue_counts = np.stack([counts[2], counts[1], counts[0]])
    labels = np.where(brain, np.argmax(tissue_counts, axis=0) + 1, BG).astype(np.uint8)

    volume = Volume(grid, data)
    mask = Volume(grid, brain.astype(np.float64))
    return volume, mask, TissueSegmentation(grid, labels)


def apply_atrophy(spec: PhantomSpec, s: float):
    """
    Baseline phantom and a follow-up with brain radii scaled by s.

    Skull and scalp geometry stay fixed. Returns (t0, t1, PhantomTruth).
    """
    if not 0.9 <= s <= 1.1:
        raise ValueError(f"atrophy scale {s} outside [0.9, 1.1]")
    if s > spec.max_scale:
        raise ValueError(f"atrophy scale {s} would push the brain into the skull (max {spec.max_scale:.4f})")
    t0, _, _ = make_head_phantom(spec, 1.0)
    t1, _, _ = make_head_phantom(spec, s)
    truth = PhantomTruth(
        brain_volume_mm3=spec.brain_volume_mm3(1.0),
        pbvc_true_percent=100.0 * (s ** 3 - 1.0),
        applied_scale=float(s),
    )
    return t0, t1, truth


# ========== ACQUISITION ==========


def rigid_transform(translation_mm, rotation_rad, center) -> np.ndarray:
    """x' = R (x - c) + c + t with R = Rz Ry Rx."""
    r = Rotation.from_euler("xyz", rotation_rad).as_matrix()
    c = np.asarray(center, dtype=np.float64)
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = c - r @ c + np.asarray(translation_mm, dtype=np.float64)
    return m


def check_rigid(rigid, tol: float = 1e-6) -> np.ndarray:
    """Reject transforms with scale or shear (polar decomposition)."""
    m = check_affine(rigid)
    u, p = polar(m[:3, :3])
    if np.max(np.abs(p - np.eye(3))) > tol or np.linalg.det(u) <= 0:
        raise ValueError("non-rigid transform: scale, shear or reflection detected")
    return m


def bias_profile(grid: Grid) -> np.ndarray:
    """Fixed separable cosine field in [-1, 1] across the field of view."""
    profiles = [np.cos(np.pi * np.linspace(0.0, 1.0, n)) for n in grid.dims]
    return profiles[0][:, None, None] * profiles[1][None, :, None] * profiles[2][None, None, :]


def apply_acquisition(v: Volume, noise_sigma: float, bias_amp: float, rigid, seed: int) -> Volume:
    """Rigid resample, multiplicative bias 1 + amp*g(x), then seeded Gaussian noise."""
    if noise_sigma < 0 or bias_amp < 0:
        raise ValueError("noise_sigma and bias_amp must be >= 0")
    rigid = check_rigid(rigid)

    out = resample(v, rigid, v.grid)
    data = out.data
    if bias_amp > 0:
        data = data * (1.0 + bias_amp * bias_profile(v.grid))
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        data = data + rng.normal(0.0, noise_sigma, size=v.grid.dims)
    return out if data is out.data else Volume(v.grid, data)


# ========== COHORT GENERATION ==========


def synthetic_labelmap(seg: TissueSegmentation, center) -> np.ndarray:
    """Tissue truth rewritten as anatomical codes, left/right split at the centre."""
    world_x = seg.grid.world_coordinates()[0]
    left = world_x < center[0]
    out = np.zeros(seg.grid.dims, dtype=np.int16)
    for tissue, (code_left, code_right) in LABELMAP_CODES.items():
        sel = seg.labels == tissue
        out[sel & left] = code_left
        out[sel & ~left] = code_right
    return out


def generate_pair(spec: PhantomSpec, scale: float, out_dir, subject_id: str,
                  noise_frac: float = 0.0, bias_amp: float = 0.0,
                  rigid_mm: float = 0.0, rigid_rad: float = 0.0) -> dict:
    """
    Write one subject's t0/t1 scans, truth masks and label maps.

    Returns:
        Manifest row plus truth record
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not 0.9 <= scale <= 1.1:
        raise ValueError(f"atrophy scale {scale} outside [0.9, 1.1]")

    rng = np.random.default_rng(spec.seed)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    center = grid_center(spec.grid)
    rigid = rigid_transform(rigid_mm * direction, rigid_rad * axis, center)

    noise_sigma = noise_frac * spec.intensities["WM"]
    t0, mask0, seg0 = make_head_phantom(spec, 1.0)
    t1, mask1, seg1 = make_head_phantom(spec, scale)

    scans = {
        "t0": apply_acquisition(t0, noise_sigma, bias_amp, np.eye(4), spec.seed * 2 + 1),
        "t1": apply_acquisition(t1, noise_sigma, bias_amp, rigid, spec.seed * 2 + 2),
    }
    masks = {"t0": mask0, "t1": resample(mask1, rigid, order=0)}
    labels = {
        "t0": Volume(spec.grid, synthetic_labelmap(seg0, center)),
        "t1": resample(Volume(spec.grid, synthetic_labelmap(seg1, center)), rigid, order=0),
    }

    row = {"subject_id": subject_id}
    for tp in ("t0", "t1"):
        scan_path = out_dir / f"{subject_id}_{tp}.nii.gz"
        mask_path = out_dir / f"{subject_id}_{tp}_brainmask.nii.gz"
        label_path = out_dir / f"{subject_id}_{tp}_labels.nii.gz"
        save_volume(scans[tp], scan_path)
        save_volume(masks[tp], mask_path, dtype=np.uint8)
        save_volume(labels[tp], label_path, dtype=np.int16)
        row[tp] = str(scan_path)
        row[f"mask_{tp}"] = str(mask_path)
        row[f"labelmap_{tp}"] = str(label_path)

    truth = PhantomTruth(spec.brain_volume_mm3(1.0), 100.0 * (scale ** 3 - 1.0), float(scale))
    return {
        "manifest": row,
        "truth": {
            "subject_id": subject_id,
            **truth.to_dict(),
            "noise_sigma": noise_sigma,
            "bias_amp": bias_amp,
            "rigid": rigid.tolist(),
            "seed": spec.seed,
        },
    }


def generate_cohort(spec: PhantomSpec, scales: List[float], out_dir, replicates: int = 1,
                    noise_frac: float = 0.02, bias_amp: float = 0.0,
                    rigid_mm: float = 2.0, rigid_rad: float = 0.02) -> Tuple[Path, Path]:
    """
    Generate a phantom cohort, one subject per (replicate, scale).

    Returns:
        (manifest CSV path, truth JSON path)
    """
    too_large = [s for s in scales if s > spec.max_scale]
    if too_large:
        raise ValueError(f"scales {too_large} exceed max {spec.max_scale:.4f} (brain would reach the skull)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, truths = [], []
    total = len(scales) * replicates
    k = 0
    for rep in range(replicates):
        for scale in scales:
            k += 1
            subject_id = f"phantom_r{rep:02d}_s{scale:.3f}"
            log(f"[{k}/{total}] Generating {subject_id}")
            sub_spec = replace(spec, seed=spec.seed + 1000 * rep + k)
            result = generate_pair(sub_spec, scale, out_dir, subject_id, noise_frac, bias_amp, rigid_mm, rigid_rad)
            rows.append(result["manifest"])
            truths.append(result["truth"])

    manifest_path = out_dir / "manifest.csv"
    pd.DataFrame(rows).to_csv(manifest_path, index=False)
    truth_path = out_dir / "truth.json"
    with open(truth_path, "w", encoding="utf-8") as f:
        json.dump({"spec": spec.to_dict(), "subjects": truths}, f, indent=2, ensure_ascii=False)
    return manifest_path, truth_path


def main(argv: Optional[List[str]] = None):
    """CLI entry point."""
    parser = argparse.ArgumentParser(description="Generate synthetic head phantom pairs")
    add_generate_arguments(parser)
    args = parser.parse_args(argv)
    run_generate(args)


def add_generate_arguments(parser):
    parser.add_argument("--scales", type=float, nargs="+", default=[0.98, 0.99, 1.0, 1.01],
                        help="Brain scale factors, one subject each (default 0.98 0.99 1.0 1.01)")
    parser.add_argument("--replicates", type=int, default=1, help="Subjects per scale")
    parser.add_argument("--dims", type=int, nargs=3, default=[128, 128, 128])
    parser.add_argument("--spacing", type=float, nargs=3, default=[1.5, 1.5, 1.5])
    parser.add_argument("--brain-radius", type=float, default=60.0)
    parser.add_argument("--noise-frac", type=float, default=0.02, help="Noise SD as a fraction of WM intensity")
    parser.add_argument("--bias-amp", type=float, default=0.0)
    parser.add_argument("--rigid-mm", type=float, default=2.0)
    parser.add_argument("--rigid-rad", type=float, default=0.02)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=str(TMP_DIR / "phantoms"))


def run_generate(args):
    spec = PhantomSpec(
        dims=tuple(args.dims),
        spacing=tuple(args.spacing),
        brain_radius_mm=args.brain_radius,
        seed=args.seed,
    )
    manifest_path, truth_path = generate_cohort(
        spec, args.scales, args.out, args.replicates,
        noise_frac=args.noise_frac, bias_amp=args.bias_amp,
        rigid_mm=args.rigid_mm, rigid_rad=args.rigid_rad,
    )
    print(f"\n  Manifest: {manifest_path}")
    print(f"  Truth: {truth_path}")
    return manifest_path, truth_path


if __name__ == "__main__":
    main()
