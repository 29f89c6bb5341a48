#!/usr/bin/env python3
"""
Percentage brain volume change - Layer 3 Execution Script

Boundary voxels of the brain tissue (GM/WM next to BG or CSF) are probed
along their outward normals in both halfway images; the profile shift that
best aligns the two is the local edge motion. Summing motion times surface
element over the boundary, divided by the GM+WM volume, gives a directional
PBVC. The pipeline runs it from both time points and averages.

Sign: a positive displacement means B's edge lies outward of A's (growth),
so atrophy gives a negative forward PBVC.

Usage:
    python execution/pbvc.py t0.nii.gz t1.nii.gz
"""

import argparse
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from extract import (
    BrainMask, SurfacePointSet, boundary_of, derive_skull_mask, estimate_normals, surface_points,
    threshold_brain_extract,
)
from imgvol import Volume, gaussian_smooth, read_nifti, resample, sample_voxel_coords
from pipeline_config import EdgeOptions, PipelineConfig, Variant, timed_stage
from register import register_symmetric, to_halfway
from run_log import log
from segment import AnatomicalLabelMap, TissueSegmentation, aggregate_labels, intensity_segment3

CUBE_3 = np.ones((3, 3, 3), dtype=bool)
POINT_CHUNK = 2048


@dataclass(frozen=True)
class EdgeSample:
    point: Tuple[float, float, float]
    normal: Tuple[float, float, float]
    displacement_mm: float
    quality: float
    accepted: bool


@dataclass(eq=False)
class EdgeSamples:
    """Column arrays for every probed boundary point, ascending voxel order."""
    positions: np.ndarray
    normals: np.ndarray
    displacement: np.ndarray
    quality: np.ndarray
    accepted: np.ndarray
    area: np.ndarray

    def __len__(self):
        return len(self.displacement)

    def sample(self, i: int) -> EdgeSample:
        return EdgeSample(
            tuple(float(x) for x in self.positions[i]),
            tuple(float(x) for x in self.normals[i]),
            float(self.displacement[i]),
            float(self.quality[i]),
            bool(self.accepted[i]),
        )


@dataclass
class DirectionalPBVC:
    pbvc_percent: float
    n_boundary: int
    n_accepted: int
    mean_disp_mm: float
    brain_volume_mm3: float
    delta_volume_mm3: float = 0.0
    n_dropped_normals: int = 0
    edges: Optional[EdgeSamples] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "pbvc_percent": self.pbvc_percent,
            "n_boundary": self.n_boundary,
            "n_accepted": self.n_accepted,
            "mean_disp_mm": self.mean_disp_mm,
            "brain_volume_mm3": self.brain_volume_mm3,
            "delta_volume_mm3": self.delta_volume_mm3,
            "n_dropped_normals": self.n_dropped_normals,
        }


@dataclass
class PBVCResult:
    forward: DirectionalPBVC
    backward: DirectionalPBVC
    final_percent: float
    calibration_factor: float = 1.0
    details: Dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "final_percent": self.final_percent,
            "calibration_factor": self.calibration_factor,
            "forward": self.forward.to_dict(),
            "backward": self.backward.to_dict(),
            **self.details,
        }


def combine_directions(forward: float, backward: float, factor: float = 1.0) -> float:
    return factor * (forward - backward) / 2.0


# ========== BOUNDARY ==========


def tissue_boundary(seg: TissueSegmentation, sigma_mm: float = 1.0) -> SurfacePointSet:
    """GM/WM voxels with a BG or CSF 6-neighbour, with outward normals of the tissue indicator."""
    tissue = seg.brain_tissue()
    if not tissue.any():
        raise ValueError("empty boundary: segmentation holds no GM or WM")
    pts = surface_points(seg.grid, boundary_of(tissue))
    if len(pts) == 0:
        raise ValueError("empty boundary")
    return estimate_normals(tissue, pts, sigma_mm=sigma_mm)


def area_elements(pts: SurfacePointSet, mode: str = "isotropic") -> np.ndarray:
    """
    Surface element per boundary voxel (mm^2).

    isotropic: voxel_volume^(2/3)
    normal:    voxel_volume / max_k(|n_k| * s_k), n in the voxel-axis frame
    """
    grid = pts.grid
    if mode == "isotropic":
        return np.full(len(pts), grid.voxel_volume ** (2.0 / 3.0))
    if mode != "normal":
        raise ValueError(f"unknown area element {mode!r}")
    cols = grid.affine[:3, :3]
    axes = cols / np.linalg.norm(cols, axis=0)
    extent = np.abs(pts.normals @ axes) * np.array(grid.spacing)
    return grid.voxel_volume / np.max(extent, axis=1)


# ========== EDGE MOTION ==========


def profile_plan(opts: EdgeOptions):
    """
    Sample positions for every (shift, offset) pair.

    A is read at o - delta/2 and B at o + delta/2, so both images share one
    ladder of distinct positions.

    Returns:
        (positions, index_a (J, K), index_b (J, K), shifts (J,))
    """
    n_off = int(round(2 * opts.profile_half_length_mm / opts.profile_step_mm)) + 1
    n_shift = int(round(2 * opts.search_limit_mm / opts.shift_step_mm)) + 1
    offsets = -opts.profile_half_length_mm + opts.profile_step_mm * np.arange(n_off)
    shifts = -opts.search_limit_mm + opts.shift_step_mm * np.arange(n_shift)

    pos_a = np.round(offsets[None, :] - shifts[:, None] / 2.0, 9)
    pos_b = np.round(offsets[None, :] + shifts[:, None] / 2.0, 9)
    positions, inverse = np.unique(np.concatenate([pos_a.ravel(), pos_b.ravel()]), return_inverse=True)
    index_a = inverse[:pos_a.size].reshape(pos_a.shape)
    index_b = inverse[pos_a.size:].reshape(pos_b.shape)
    return positions, index_a, index_b, shifts


def profile_ncc(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """
    NCC over the last axis, ignoring positions where either profile is NaN.

    Fewer than 3 shared samples or a flat profile gives NaN.
    """
    valid = np.isfinite(xa) & np.isfinite(xb)
    count = valid.sum(axis=-1)
    xa = np.where(valid, xa, 0.0)
    xb = np.where(valid, xb, 0.0)
    safe = np.maximum(count, 1)
    da = np.where(valid, xa - (xa.sum(axis=-1) / safe)[..., None], 0.0)
    db = np.where(valid, xb - (xb.sum(axis=-1) / safe)[..., None], 0.0)
    cov = (da * db).sum(axis=-1)
    va = (da * da).sum(axis=-1)
    vb = (db * db).sum(axis=-1)
    ok = (count >= 3) & (va > 1e-12) & (vb > 1e-12)
    out = np.full(cov.shape, np.nan)
    out[ok] = cov[ok] / np.sqrt(va[ok] * vb[ok])
    return out


def edge_displacements(a_h: Volume, b_h: Volume, points: np.ndarray, normals: np.ndarray,
                       opts: Optional[EdgeOptions] = None):
    """
    Vectorised edge motion for many boundary points.

    Returns:
        (displacement_mm, quality, accepted) arrays
    """
    opts = opts or EdgeOptions()
    if not a_h.grid.matches(b_h.grid):
        raise ValueError("edge_displacement needs both halfway images on one grid")
    positions, index_a, index_b, shifts = profile_plan(opts)
    inv = a_h.grid.inverse_affine
    n = len(points)
    disp = np.zeros(n)
    quality = np.full(n, np.nan)
    n_shift = len(shifts)

    for start in range(0, n, POINT_CHUNK):
        p = points[start:start + POINT_CHUNK]
        nrm = normals[start:start + POINT_CHUNK]
        world = p[:, None, :] + positions[None, :, None] * nrm[:, None, :]
        vox = world @ inv[:3, :3].T + inv[:3, 3]
        samples_a = sample_voxel_coords(a_h.data, vox, oob=np.nan)
        samples_b = sample_voxel_coords(b_h.data, vox, oob=np.nan)

        ncc = profile_ncc(samples_a[:, index_a], samples_b[:, index_b])  # (n, J)
        scored = np.where(np.isfinite(ncc), ncc, -np.inf)
        best = np.argmax(scored, axis=1)
        rows = np.arange(len(p))
        peak = scored[rows, best]
        found = np.isfinite(peak)

        # parabola through the peak and its neighbours, only where concave
        offset = np.zeros(len(p))
        inner = found & (best > 0) & (best < n_shift - 1)
        lo = np.where(inner, scored[rows, np.clip(best - 1, 0, n_shift - 1)], np.nan)
        hi = np.where(inner, scored[rows, np.clip(best + 1, 0, n_shift - 1)], np.nan)
        denom = lo - 2.0 * peak + hi
        refine = inner & np.isfinite(lo) & np.isfinite(hi) & (denom < 0)
        offset[refine] = np.clip(0.5 * (lo[refine] - hi[refine]) / denom[refine], -0.5, 0.5)

        d = shifts[best] + offset * opts.shift_step_mm
        disp[start:start + POINT_CHUNK] = np.where(found, d, 0.0)
        quality[start:start + POINT_CHUNK] = np.where(found, peak, np.nan)

    accepted = np.isfinite(quality) & (quality >= opts.quality_floor)
    return disp, quality, accepted


def edge_displacement(a_h: Volume, b_h: Volume, point, normal, opts: Optional[EdgeOptions] = None) -> EdgeSample:
    """Edge motion of B relative to A at one boundary point."""
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    nrm = np.asarray(normal, dtype=np.float64).reshape(1, 3)
    disp, quality, accepted = edge_displacements(a_h, b_h, p, nrm, opts)
    return EdgeSample(tuple(p[0]), tuple(nrm[0]), float(disp[0]), float(quality[0]), bool(accepted[0]))


def pbvc_directional(a_h: Volume, b_h: Volume, seg_src: TissueSegmentation,
                     opts: Optional[EdgeOptions] = None) -> DirectionalPBVC:
    """PBVC of b_h relative to a_h from the boundary of seg_src (which segments a_h)."""
    opts = opts or EdgeOptions()
    pts = tissue_boundary(seg_src, opts.normal_sigma_mm)
    disp, quality, accepted = edge_displacements(a_h, b_h, pts.positions, pts.normals, opts)
    area = area_elements(pts, opts.area_element)

    n_boundary = len(pts)
    n_accepted = int(accepted.sum())
    if n_accepted < opts.min_accept_fraction * n_boundary:
        raise ValueError(
            f"insufficient reliable edges: {n_accepted} of {n_boundary} accepted "
            f"(minimum fraction {opts.min_accept_fraction})"
        )

    delta_v = float(np.sum(disp[accepted] * area[accepted]))
    volume = seg_src.tissue_volume_mm3()
    return DirectionalPBVC(
        pbvc_percent=100.0 * delta_v / volume,
        n_boundary=n_boundary,
        n_accepted=n_accepted,
        mean_disp_mm=float(disp[accepted].mean()) if n_accepted else 0.0,
        brain_volume_mm3=volume,
        delta_volume_mm3=delta_v,
        n_dropped_normals=pts.n_dropped,
        edges=EdgeSamples(pts.positions, pts.normals, disp, quality, accepted, area),
    )


# ========== FULL PIPELINE ==========


def _halfway_mask(vol: Volume) -> BrainMask:
    return BrainMask(vol.grid, vol.data > 0.5)


def pbvc_symmetric(a: Volume, b: Volume, cfg: PipelineConfig,
                   masks: Tuple[Optional[BrainMask], Optional[BrainMask]] = (None, None),
                   labelmaps: Tuple[Optional[AnatomicalLabelMap], Optional[AnatomicalLabelMap]] = (None, None),
                   timings: Optional[dict] = None,
                   calibration_factor: Optional[float] = None) -> PBVCResult:
    """
    Extraction -> skull mask -> registration -> halfway -> segmentation ->
    forward and backward edge passes -> calibrated average.

    Args:
        masks: external brain masks (A, B) when cfg uses the external extractor
        labelmaps: external label maps (A, B) when cfg uses the external segmenter
        timings: dict receiving per-stage seconds
        calibration_factor: fixed factor; None calibrates when cfg.calibrate is set

    Returns:
        PBVCResult; stage failures raise PipelineError
    """
    with timed_stage("extract", timings):
        if cfg.extractor == "external":
            if masks[0] is None or masks[1] is None:
                raise ValueError("external extractor selected but no brain masks supplied")
            brain_a, brain_b = masks
        else:
            brain_a = threshold_brain_extract(a, cfg.extract.frac)
            brain_b = threshold_brain_extract(b, cfg.extract.frac)

    with timed_stage("skull", timings):
        skull_a = derive_skull_mask(a, brain_a, cfg.extract.skull_sigma_mm)
        skull_b = derive_skull_mask(b, brain_b, cfg.extract.skull_sigma_mm)

    with timed_stage("register", timings):
        reg = register_symmetric(a, b, brain_a, skull_a, brain_b, skull_b, cfg.registration)

    with timed_stage("halfway", timings):
        hw = to_halfway(a, b, reg.forward, extras_a=[brain_a.as_volume()], extras_b=[brain_b.as_volume()])

    with timed_stage("segment", timings):
        if cfg.segmenter == "external":
            if labelmaps[0] is None or labelmaps[1] is None:
                raise ValueError("external segmenter selected but no label maps supplied")
            native_a, native_b = aggregate_labels(labelmaps[0]), aggregate_labels(labelmaps[1])
            seg_a = TissueSegmentation(
                hw.grid, resample(native_a.as_volume(), hw.half, hw.grid, order=0).data,
                unmapped_codes=native_a.unmapped_codes)
            seg_b = TissueSegmentation(
                hw.grid, resample(native_b.as_volume(), hw.back, hw.grid, order=0).data,
                unmapped_codes=native_b.unmapped_codes)
        else:
            seg_a = intensity_segment3(hw.a, _halfway_mask(hw.extras_a[0]), cfg.seed)
            seg_b = intensity_segment3(hw.b, _halfway_mask(hw.extras_b[0]), cfg.seed)

    with timed_stage("edges", timings):
        forward = pbvc_directional(hw.a, hw.b, seg_a, cfg.edges)
        backward = pbvc_directional(hw.b, hw.a, seg_b, cfg.edges)

    if calibration_factor is None:
        with timed_stage("calibrate", timings):
            if cfg.calibrate:
                # both time points, so reversing the scan order keeps the factor
                factor_a = calibrate_pbvc(a, cfg, cfg.calibration_scale)
                factor_b = calibrate_pbvc(b, cfg, cfg.calibration_scale)
                calibration_factor = 0.5 * (factor_a + factor_b)
            else:
                calibration_factor = 1.0

    details = {
        "registration": reg.to_dict(),
        "halfway_grid": "A",
        "provenance": {
            "extractor": cfg.extractor,
            "segmenter": cfg.segmenter,
            "brain_mask_t0": brain_a.digest(),
            "brain_mask_t1": brain_b.digest(),
            "skull_mask_t0": skull_a.digest(),
            "skull_mask_t1": skull_b.digest(),
            "skull_points_t0": skull_a.n_points,
            "skull_points_t1": skull_b.n_points,
            "skull_mask_kind": "dilated detected skull points",
            "discarded_mask_fraction_t0": brain_a.discarded_fraction,
            "discarded_mask_fraction_t1": brain_b.discarded_fraction,
            "unmapped_codes_t0": list(seg_a.unmapped_codes),
            "unmapped_codes_t1": list(seg_b.unmapped_codes),
        },
        "area_element": cfg.edges.area_element,
    }
    return PBVCResult(
        forward=forward,
        backward=backward,
        final_percent=combine_directions(forward.pbvc_percent, backward.pbvc_percent, calibration_factor),
        calibration_factor=float(calibration_factor),
        details=details,
    )


# ========== SELF-CALIBRATION ==========


def scale_brain(a: Volume, brain: BrainMask, s: float, sigma_mm: float = 1.0) -> Volume:
    """
    Copy of a with the brain region radially scaled by s about its centroid.

    The blend weight is the dilated, smoothed extraction mask, so skull and
    scalp stay where they were.
    """
    c = brain.centroid_world()
    t = np.eye(4)
    t[:3, :3] *= s
    t[:3, 3] = c - s * c
    scaled = resample(a, t, a.grid)

    dilated = ndimage.binary_dilation(brain.mask, structure=CUBE_3)
    w = np.clip(gaussian_smooth(Volume(a.grid, dilated.astype(np.float64)), sigma_mm).data, 0.0, 1.0)
    return Volume(a.grid, w * scaled.data + (1.0 - w) * a.data)


def calibrate_pbvc(a: Volume, cfg: PipelineConfig, s_cal: float = 0.995) -> float:
    """
    Calibration factor 100*(s_cal^3 - 1) / measured PBVC of a against its
    own brain-scaled copy. Runs the built-in stages with calibration off.
    """
    if not 0.98 <= s_cal < 1.0:
        raise ValueError(f"s_cal must lie in [0.98, 1), got {s_cal}")
    cal_cfg = replace(cfg, variant=Variant.VANILLA, calibrate=False)
    brain = threshold_brain_extract(a, cfg.extract.frac)
    b = scale_brain(a, brain, s_cal)
    measured = pbvc_symmetric(a, b, cal_cfg, calibration_factor=1.0).final_percent
    if abs(measured) < 0.1:
        raise ValueError(f"uninformative calibration: measured {measured:.4f} pp for scale {s_cal}")
    factor = 100.0 * (s_cal ** 3 - 1.0) / measured
    log(f"  Calibration: expected {100.0 * (s_cal ** 3 - 1.0):.4f} pp, measured {measured:.4f} pp, factor {factor:.4f}")
    return factor


def main():
    """CLI entry point: PBVC of one pair with the built-in stages."""
    parser = argparse.ArgumentParser(description="PBVC between two scans (built-in stages)")
    parser.add_argument("t0", help="Baseline scan")
    parser.add_argument("t1", help="Follow-up scan")
    parser.add_argument("--no-calibrate", action="store_true", help="Skip self-calibration")
    args = parser.parse_args()

    a, _ = read_nifti(args.t0)
    b, _ = read_nifti(args.t1)
    cfg = PipelineConfig(calibrate=not args.no_calibrate)
    result = pbvc_symmetric(a, b, cfg)
    print(f"\n  Forward PBVC:  {result.forward.pbvc_percent:+.4f} %")
    print(f"  Backward PBVC: {result.backward.pbvc_percent:+.4f} %")
    print(f"  Final PBVC:    {result.final_percent:+.4f} % (factor {result.calibration_factor:.4f})")


if __name__ == "__main__":
    main()
