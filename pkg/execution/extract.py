#!/usr/bin/env python3
"""
Brain extraction and skull-mask derivation - Layer 3 Execution Script

Two ways to get a brain mask:
- threshold_brain_extract: built-in stand-in for a skull stripper
- load_external_mask: ingest the mask file written by an external tool

Shared surface machinery (boundary voxels, outward normals) is also used by
pbvc for the tissue boundary.

Usage:
    python execution/extract.py scan.nii.gz --out tmp/masks
    python execution/extract.py scan.nii.gz --brain-mask ss_mask.nii.gz --out tmp/masks
"""

import argparse
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from imgvol import Grid, Volume, gaussian_smooth, read_nifti, sample_voxel_coords, save_volume, voxels_in_order
from run_log import log

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)
CUBE_3 = np.ones((3, 3, 3), dtype=bool)

# Ray ladder for the skull search: 0.0, 0.5, ..., 30.0 mm
RAY_MAX_MM = 30.0
RAY_STEP_MM = 0.5
RAY_OFFSETS_MM = np.arange(int(round(RAY_MAX_MM / RAY_STEP_MM)) + 1) * RAY_STEP_MM
SKULL_MIN_POINTS = 100
SKULL_RISE_RATIO = 1.2
NORMAL_MIN_NORM = 1e-6


@dataclass(frozen=True, eq=False)
class BrainMask:
    grid: Grid
    mask: np.ndarray
    discarded_fraction: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool).copy()
        if m.shape != self.grid.dims:
            raise ValueError(f"mask shape {m.shape} does not match grid dims {self.grid.dims}")
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)

    @property
    def n_voxels(self) -> int:
        return int(self.mask.sum())

    @property
    def volume_mm3(self) -> float:
        return self.n_voxels * self.grid.voxel_volume

    def as_volume(self) -> Volume:
        return Volume(self.grid, self.mask.astype(np.float64))

    def centroid_world(self) -> np.ndarray:
        ijk = np.argwhere(self.mask).astype(np.float64)
        return self.grid.voxel_to_world(ijk.mean(axis=0)).ravel()

    def digest(self) -> str:
        return mask_digest(self.mask)


@dataclass(frozen=True, eq=False)
class SkullMask:
    grid: Grid
    mask: np.ndarray
    n_points: int = 0
    n_rays: int = 0
    points_world: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool).copy()
        if m.shape != self.grid.dims:
            raise ValueError(f"mask shape {m.shape} does not match grid dims {self.grid.dims}")
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)

    def digest(self) -> str:
        return mask_digest(self.mask)


@dataclass(frozen=True, eq=False)
class SurfacePointSet:
    """
    Boundary voxels in ascending linear index order.

    normals is None until estimate_normals fills it; n_dropped counts points
    removed there because the smoothed-mask gradient vanished.
    """
    grid: Grid
    indices: np.ndarray
    positions: np.ndarray
    normals: Optional[np.ndarray] = None
    n_dropped: int = 0

    def __len__(self):
        return len(self.indices)

    @property
    def linear(self) -> np.ndarray:
        nx, ny, _ = self.grid.dims
        return self.indices[:, 0] + nx * (self.indices[:, 1] + ny * self.indices[:, 2])


def mask_digest(mask: np.ndarray) -> str:
    """Stable content hash of a binary mask (provenance records)."""
    packed = np.packbits(np.asarray(mask, dtype=bool).ravel(order="F"))
    return hashlib.sha256(packed.tobytes()).hexdigest()[:16]


def largest_component(mask: np.ndarray):
    """
    Keep the largest 6-connected component.

    Returns:
        (component mask, fraction of foreground voxels discarded)
    """
    labeled, n = ndimage.label(mask, structure=SIX_CONNECTED)
    if n == 0:
        return np.zeros_like(mask, dtype=bool), 0.0
    sizes = np.bincount(labeled.ravel())
    sizes[0] = 0
    keep = labeled == int(np.argmax(sizes))
    total = int(sizes.sum())
    return keep, (total - int(keep.sum())) / total


# ========== EXTRACTION ==========


def threshold_brain_extract(v: Volume, frac: float = 0.35) -> BrainMask:
    """
    Built-in brain extraction.

    Threshold at frac * 98th percentile of nonzero intensities, keep the
    largest 6-connected component, close once with a 3x3x3 element, fill
    holes.
    """
    if not 0.0 < frac < 1.0:
        raise ValueError(f"frac must lie in (0, 1), got {frac}")
    nonzero = v.data[v.data != 0]
    if nonzero.size == 0:
        raise ValueError("empty extraction: volume has no nonzero intensities")

    threshold = frac * float(np.percentile(nonzero, 98))
    above = v.data > threshold
    mask, _ = largest_component(above)
    if not mask.any():
        raise ValueError(f"empty extraction: nothing above threshold {threshold:.4g}")

    mask = ndimage.binary_closing(mask, structure=CUBE_3, border_value=0)
    mask = ndimage.binary_fill_holes(mask)
    mask, _ = largest_component(mask)
    return BrainMask(v.grid, mask)


def load_external_mask(path, expected: Grid, tol: float = 1e-3) -> BrainMask:
    """Ingest an external brain mask; nonzero -> brain, largest component kept."""
    volume, _ = read_nifti(path)
    grid = volume.grid
    if grid.dims != expected.dims or not np.allclose(grid.spacing, expected.spacing, atol=tol):
        raise ValueError(
            f"grid mismatch: mask {Path(path).name} has dims {grid.dims} spacing {grid.spacing}, "
            f"scan has dims {expected.dims} spacing {expected.spacing}"
        )
    mask = volume.data != 0
    if not mask.any():
        raise ValueError(f"empty mask: {Path(path).name} has no nonzero voxels")

    mask, discarded = largest_component(mask)
    if discarded > 0:
        log(f"  Mask {Path(path).name}: dropped {discarded:.4%} of voxels outside the largest component")
    return BrainMask(expected, mask, discarded_fraction=discarded)


# ========== SURFACE POINTS ==========


def boundary_of(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour (grid exterior counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=SIX_CONNECTED, border_value=0)
    return mask & ~eroded


def surface_points(grid: Grid, boundary: np.ndarray) -> SurfacePointSet:
    ijk = voxels_in_order(boundary)
    return SurfacePointSet(grid, ijk, grid.voxel_to_world(ijk.astype(np.float64)))


def mask_boundary(mask: BrainMask) -> SurfacePointSet:
    """Boundary voxels of a brain mask, normals unset."""
    if not mask.mask.any():
        raise ValueError("mask_boundary needs a nonempty mask")
    return surface_points(mask.grid, boundary_of(mask.mask))


def estimate_normals(mask, pts: SurfacePointSet, sigma_mm: float = 1.0) -> SurfacePointSet:
    """
    Outward unit normals from the gradient of the smoothed mask.

    Args:
        mask: BrainMask or a boolean array on pts.grid
        pts: boundary points of that mask
        sigma_mm: Gaussian sigma applied to the mask indicator

    Returns:
        SurfacePointSet with normals; points whose gradient norm is below
        1e-6 are dropped and counted in n_dropped
    """
    indicator = mask.mask if isinstance(mask, BrainMask) else np.asarray(mask, dtype=bool)
    smooth = gaussian_smooth(Volume(pts.grid, indicator.astype(np.float64)), sigma_mm).data

    # central differences only at the boundary voxels (one-sided at the border)
    grads_idx = np.empty((len(pts), 3))
    for axis in range(3):
        n = smooth.shape[axis]
        idx = pts.indices
        lo = idx.copy()
        hi = idx.copy()
        lo[:, axis] = np.maximum(idx[:, axis] - 1, 0)
        hi[:, axis] = np.minimum(idx[:, axis] + 1, n - 1)
        span = (hi[:, axis] - lo[:, axis]).astype(np.float64)
        diff = smooth[hi[:, 0], hi[:, 1], hi[:, 2]] - smooth[lo[:, 0], lo[:, 1], lo[:, 2]]
        grads_idx[:, axis] = np.divide(diff, span, out=np.zeros_like(diff), where=span > 0)
    a_inv_t = np.linalg.inv(pts.grid.affine[:3, :3]).T
    grads = grads_idx @ a_inv_t.T

    norms = np.linalg.norm(grads, axis=1)
    keep = norms >= NORMAL_MIN_NORM
    if not keep.any():
        raise ValueError(f"all {len(pts)} boundary points have a vanishing mask gradient")
    normals = -grads[keep] / norms[keep, None]
    return SurfacePointSet(
        pts.grid,
        pts.indices[keep],
        pts.positions[keep],
        normals,
        n_dropped=int((~keep).sum()),
    )


# ========== SKULL MASK ==========


def find_skull_offsets(intensity: np.ndarray, mask_profile: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """
    Intensity-gradient heuristic along each ray.

    Args:
        intensity: (N, S) image samples along the ray ladder
        mask_profile: (N, S) brain-mask samples on the same ladder

    Returns:
        (N,) skull offsets in mm, NaN for rejected rays
    """
    n_rays, n_samples = intensity.shape
    out = np.full(n_rays, np.nan)
    outside = mask_profile < 0.5
    has_edge = outside.any(axis=1)
    edge = np.argmax(outside, axis=1)

    for r in np.flatnonzero(has_edge):
        e = edge[r]
        prof = intensity[r]
        peak = e + int(np.argmax(prof[e:]))
        low = e + int(np.argmin(prof[e:peak + 1]))
        if peak <= low or prof[peak] < SKULL_RISE_RATIO * max(prof[low], eps):
            continue
        rise = np.diff(prof[low:peak + 1])
        k = low + int(np.argmax(rise))
        out[r] = 0.5 * (RAY_OFFSETS_MM[k] + RAY_OFFSETS_MM[k + 1])
    return out


def derive_skull_mask(v: Volume, brain: BrainMask, sigma_mm: float = 1.0) -> SkullMask:
    """
    Skull mask from rays cast outward along the brain-surface normals.

    Each ray samples v from 0 to 30 mm in 0.5 mm steps; the accepted skull
    point is marked at its nearest voxel, the marks are dilated once (3x3x3)
    and any voxel of the eroded brain is removed.
    """
    if not v.grid.matches(brain.grid):
        raise ValueError("derive_skull_mask: brain mask is not on the image grid")

    pts = estimate_normals(brain, mask_boundary(brain), sigma_mm=sigma_mm)
    inv = v.grid.inverse_affine
    mask_data = brain.mask.astype(np.float64)

    offsets = np.empty(len(pts))
    chunk = 4096
    for start in range(0, len(pts), chunk):
        p = pts.positions[start:start + chunk]
        n = pts.normals[start:start + chunk]
        world = p[:, None, :] + RAY_OFFSETS_MM[None, :, None] * n[:, None, :]
        vox = world @ inv[:3, :3].T + inv[:3, 3]
        intensity = sample_voxel_coords(v.data, vox, oob=0.0)
        mask_profile = sample_voxel_coords(mask_data, vox, oob=0.0)
        offsets[start:start + chunk] = find_skull_offsets(intensity, mask_profile)

    accepted = np.isfinite(offsets)
    n_points = int(accepted.sum())
    if n_points < SKULL_MIN_POINTS:
        raise ValueError(
            f"skull detection failed: {n_points} of {len(pts)} rays found a skull point "
            f"(minimum {SKULL_MIN_POINTS})"
        )

    points = pts.positions[accepted] + offsets[accepted, None] * pts.normals[accepted]
    vox = np.rint(v.grid.world_to_voxel(points)).astype(np.int64)
    inside = np.all((vox >= 0) & (vox < np.array(v.grid.dims)), axis=1)
    marked = np.zeros(v.grid.dims, dtype=bool)
    marked[vox[inside, 0], vox[inside, 1], vox[inside, 2]] = True

    skull = ndimage.binary_dilation(marked, structure=CUBE_3)
    eroded_brain = ndimage.binary_erosion(brain.mask, structure=SIX_CONNECTED, border_value=0)
    skull &= ~eroded_brain
    return SkullMask(v.grid, skull, n_points=n_points, n_rays=len(pts), points_world=points)


def main():
    """CLI entry point."""
    parser = argparse.ArgumentParser(description="Brain mask and skull mask for one scan")
    parser.add_argument("scan", help="Scan volume (.nii / .nii.gz)")
    parser.add_argument("--brain-mask", help="External brain mask (skips threshold extraction)")
    parser.add_argument("--frac", type=float, default=0.35, help="Threshold fraction (default 0.35)")
    parser.add_argument("--out", default="tmp/masks", help="Output directory")
    args = parser.parse_args()

    volume, _ = read_nifti(args.scan)
    if args.brain_mask:
        brain = load_external_mask(args.brain_mask, volume.grid)
    else:
        brain = threshold_brain_extract(volume, args.frac)
    skull = derive_skull_mask(volume, brain)

    out_dir = Path(args.out)
    stem = Path(args.scan).name.split(".")[0]
    save_volume(brain.as_volume(), out_dir / f"{stem}_brain.nii.gz", dtype=np.uint8)
    save_volume(Volume(skull.grid, skull.mask.astype(np.float64)), out_dir / f"{stem}_skull.nii.gz", dtype=np.uint8)

    print(f"\n  Brain voxels: {brain.n_voxels} ({brain.volume_mm3:.0f} mm3)")
    print(f"  Skull points: {skull.n_points}/{skull.n_rays} rays")
    print(f"  Saved masks to: {out_dir}")


if __name__ == "__main__":
    main()
