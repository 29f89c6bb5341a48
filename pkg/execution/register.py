#!/usr/bin/env python3
"""
Skull-constrained affine registration and halfway space - Layer 3 Execution Script

Cost: weighted NCC over the dilated brain mask plus weighted NCC over the
dilated skull mask, minimised over 12 affine parameters with a 3-level
pyramid and cyclic coordinate descent (golden-section line search per
parameter). Scale and shear are searched on the skull term only, so brain
shrinkage is not absorbed into the transform.

Usage:
    python execution/register.py fixed.nii.gz moving.nii.gz --out tmp/reg
"""

import argparse
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from extract import BrainMask, SkullMask, derive_skull_mask, threshold_brain_extract
from imgvol import (
    MIN_DIM, Grid, Volume, check_affine, downsample, invert_affine, read_nifti, resample,
    sample_voxel_coords, save_affine,
)
from pipeline_config import RegistrationOptions
from run_log import log

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
CUBE_3 = np.ones((3, 3, 3), dtype=bool)
MIN_SUPPORT_FRACTION = 0.1


# ========== PARAMETERS ==========


@dataclass
class AffineParams:
    """
    12-parameter affine about a centre c:
        x' = A (x - c) + c + t,  A = Rz Ry Rx . K . diag(exp(s))
    K is unit upper-triangular with (k0, k1, k2) at [0,1], [0,2], [1,2].
    """
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: np.ndarray = field(default_factory=lambda: np.zeros(3))
    k: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.r, self.s, self.k]).astype(np.float64)

    @classmethod
    def from_vector(cls, p, center) -> "AffineParams":
        p = np.asarray(p, dtype=np.float64)
        return cls(p[0:3].copy(), p[3:6].copy(), p[6:9].copy(), p[9:12].copy(),
                   np.asarray(center, dtype=np.float64).copy())

    def linear(self) -> np.ndarray:
        rot = Rotation.from_euler("xyz", self.r).as_matrix()
        shear = np.eye(3)
        shear[0, 1], shear[0, 2], shear[1, 2] = self.k
        return rot @ shear @ np.diag(np.exp(self.s))

    def to_matrix(self) -> np.ndarray:
        a = self.linear()
        m = np.eye(4)
        m[:3, :3] = a
        m[:3, 3] = self.center - a @ self.center + self.t
        return m

    @classmethod
    def from_matrix(cls, m, center) -> "AffineParams":
        m = check_affine(m)
        a = m[:3, :3]
        if np.linalg.det(a) <= 0:
            raise ValueError("from_matrix needs a positive-determinant transform")
        q, u = np.linalg.qr(a)
        signs = np.sign(np.diag(u))
        q = q * signs
        u = signs[:, None] * u

        scales = np.diag(u)
        k = np.array([u[0, 1] / u[1, 1], u[0, 2] / u[2, 2], u[1, 2] / u[2, 2]])
        ry = -np.arcsin(np.clip(q[2, 0], -1.0, 1.0))
        rx = np.arctan2(q[2, 1], q[2, 2])
        rz = np.arctan2(q[1, 0], q[0, 0])

        c = np.asarray(center, dtype=np.float64)
        t = m[:3, 3] - c + a @ c
        return cls(t, np.array([rx, ry, rz]), np.log(scales), k, c.copy())


@dataclass
class RegistrationResult:
    forward: np.ndarray
    cost_final: float
    iterations: int
    pyramid_trace: List[dict]
    center: Optional[np.ndarray] = None
    params: Optional[np.ndarray] = None
    forward_raw: Optional[np.ndarray] = None
    backward_raw: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        out = {
            "forward": np.asarray(self.forward).tolist(),
            "cost_final": self.cost_final,
            "iterations": self.iterations,
            "pyramid_trace": self.pyramid_trace,
        }
        if self.params is not None:
            out["params"] = np.asarray(self.params).tolist()
        return out


# ========== COST ==========


def weighted_ncc(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """Weighted normalized cross-correlation of two sample vectors."""
    total = float(w.sum())
    if total <= 0:
        raise ValueError("weight is identically zero")
    mx = float((w * x).sum()) / total
    my = float((w * y).sum()) / total
    dx = x - mx
    dy = y - my
    vx = float((w * dx * dx).sum())
    vy = float((w * dy * dy).sum())
    scale = max(abs(mx), abs(my), 1.0) ** 2 * total * 1e-20
    if vx <= scale or vy <= scale:
        raise ValueError("zero-variance region under the weight")
    cov = float((w * dx * dy).sum())
    return float(np.clip(cov / np.sqrt(vx * vy), -1.0, 1.0))


def masked_ncc(a: Volume, b: Volume, weight: Volume) -> float:
    """Negated weighted NCC of two volumes on a shared grid (a minimisation cost)."""
    if not (a.grid.matches(b.grid) and a.grid.matches(weight.grid)):
        raise ValueError("masked_ncc needs a, b and weight on one grid")
    w = weight.data
    if np.any(w < 0):
        raise ValueError("weight must be >= 0")
    sel = w > 0
    if not sel.any():
        raise ValueError("weight is identically zero")
    return -weighted_ncc(a.data[sel], b.data[sel], w[sel])


class LevelCost:
    """Cost terms of one pyramid level, restricted to voxels with nonzero weight."""

    def __init__(self, fixed: Volume, moving: Volume, terms: Sequence[Tuple[str, float, Volume]]):
        self.moving = moving
        self.moving_inv = moving.grid.inverse_affine
        self.terms = []
        ijk_all = []
        for name, term_weight, w_vol in terms:
            w = w_vol.data
            sel = w > 1e-3
            if term_weight <= 0 or not sel.any():
                continue
            ijk = np.argwhere(sel)
            ijk_all.append(ijk)
            self.terms.append({
                "name": name,
                "weight": term_weight,
                "world": fixed.grid.voxel_to_world(ijk.astype(np.float64)),
                "fixed": fixed.data[sel],
                "w": w[sel],
            })
        if not self.terms:
            raise ValueError("registration has no cost support (empty brain and skull weights)")
        self.evaluations = 0

    def has_term(self, name: str) -> bool:
        return any(t["name"] == name for t in self.terms)

    def _term_ncc(self, term: dict, m: np.ndarray) -> float:
        combo = self.moving_inv @ m
        vox = term["world"] @ combo[:3, :3].T + combo[:3, 3]
        moved = sample_voxel_coords(self.moving.data, vox, oob=np.nan)
        valid = np.isfinite(moved)
        if valid.sum() < MIN_SUPPORT_FRACTION * len(valid):
            raise ValueError(f"{term['name']} support left the moving image")
        return weighted_ncc(term["fixed"][valid], moved[valid], term["w"][valid])

    def cost(self, m: np.ndarray, only: Optional[str] = None) -> float:
        """Weighted mean of negated NCC terms; +inf when undefined."""
        self.evaluations += 1
        if np.linalg.det(m[:3, :3]) <= 0:
            return np.inf
        total, norm = 0.0, 0.0
        try:
            for term in self.terms:
                if only is not None and term["name"] != only:
                    continue
                total += term["weight"] * self._term_ncc(term, m)
                norm += term["weight"]
        except ValueError:
            return np.inf
        return -total / norm if norm > 0 else np.inf


# ========== OPTIMISER ==========


def golden_line_search(f: Callable[[float], float], x0: float, f0: float, step: float,
                       stop_frac: float = 0.1) -> Tuple[float, float]:
    """
    Golden-section search on [x0 - step, x0 + step].

    Returns:
        (x, f(x)) of the best point seen; the incumbent x0 unless a strictly
        lower value was found
    """
    a, b = x0 - step, x0 + step
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    best_x, best_f = x0, f0
    for x, fx in ((c, fc), (d, fd)):
        if fx < best_f:
            best_x, best_f = x, fx

    while (b - a) >= stop_frac * step:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
            if fc < best_f:
                best_x, best_f = c, fc
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
            if fd < best_f:
                best_x, best_f = d, fd
    return best_x, best_f


def coordinate_descent(level: LevelCost, p0: np.ndarray, center: np.ndarray,
                       opts: RegistrationOptions) -> Tuple[np.ndarray, float, int]:
    """
    Cyclic per-parameter golden-section descent.

    Translations and rotations use the combined cost; scales and shears use
    the skull term and are accepted only when the combined cost does not rise.
    """
    p = np.array(p0, dtype=np.float64)
    steps = np.repeat(np.asarray(opts.initial_steps, dtype=np.float64), 3)
    tols = np.repeat(np.asarray(opts.tolerances, dtype=np.float64), 3)
    skull_only = level.has_term("skull") and level.has_term("brain")

    def matrix(vec):
        return AffineParams.from_vector(vec, center).to_matrix()

    current = level.cost(matrix(p))
    if not np.isfinite(current):
        raise ValueError("cost evaluation failure at the initial transform")

    sweeps = 0
    for sweeps in range(1, opts.max_sweeps + 1):
        for j in range(12):
            only = "skull" if (j >= 6 and skull_only) else None

            def f(x, j=j, only=only):
                trial = p.copy()
                trial[j] = x
                return level.cost(matrix(trial), only=only)

            old = p[j]
            start = current if only is None else f(old)
            x_best, f_best = golden_line_search(f, old, start, steps[j], opts.bracket_stop_frac)
            moved = False
            if x_best != old and f_best < start:
                trial = p.copy()
                trial[j] = x_best
                combined = f_best if only is None else level.cost(matrix(trial))
                if combined <= current:
                    p, current, moved = trial, combined, True
            # a move to the bracket edge keeps the step, anything else narrows it
            if not (moved and abs(x_best - old) >= 0.9 * steps[j]):
                steps[j] *= 0.5
        if np.all(steps < tols):
            break
    return p, current, sweeps


def _pyramid_levels(grid: Grid, factors: Sequence[int]) -> List[int]:
    usable = []
    for f in factors:
        f = int(f)
        dims = [len(range(0, d, f)) for d in grid.dims]
        if min(dims) >= MIN_DIM:
            usable.append(f)
        else:
            log(f"  Pyramid factor {f} skipped: level dims {dims} below {MIN_DIM}")
    if not usable:
        usable = [1]
    return usable


def register_affine(fixed: Volume, moving: Volume, fixed_brain: BrainMask, fixed_skull: SkullMask,
                    moving_brain: BrainMask, moving_skull: Optional[SkullMask] = None,
                    opts: Optional[RegistrationOptions] = None) -> RegistrationResult:
    """
    Affine transform mapping fixed-world coordinates to moving-world coordinates.

    Centre = fixed brain centroid; initial translation aligns the brain-mask
    centroids.
    """
    opts = opts or RegistrationOptions()
    for vol, mask, tag in ((fixed, fixed_brain, "fixed"), (moving, moving_brain, "moving")):
        if not vol.grid.matches(mask.grid):
            raise ValueError(f"{tag} brain mask is not on the {tag} image grid")

    center = fixed_brain.centroid_world()
    p = np.zeros(12)
    p[0:3] = moving_brain.centroid_world() - center

    brain_w = Volume(fixed.grid, ndimage.binary_dilation(fixed_brain.mask, structure=CUBE_3).astype(np.float64))
    skull_w = Volume(fixed.grid, ndimage.binary_dilation(fixed_skull.mask, structure=CUBE_3).astype(np.float64))

    trace = []
    total_sweeps = 0
    cost = np.inf
    for factor in _pyramid_levels(fixed.grid, opts.pyramid_factors):
        level = LevelCost(
            downsample(fixed, factor),
            downsample(moving, factor),
            [("brain", opts.brain_weight, downsample(brain_w, factor)),
             ("skull", opts.skull_weight, downsample(skull_w, factor))],
        )
        initial = level.cost(AffineParams.from_vector(p, center).to_matrix())
        p, cost, sweeps = coordinate_descent(level, p, center, opts)
        total_sweeps += sweeps
        trace.append({
            "factor": factor,
            "initial_cost": initial,
            "final_cost": cost,
            "sweeps": sweeps,
            "evaluations": level.evaluations,
        })

    forward = AffineParams.from_vector(p, center).to_matrix()
    return RegistrationResult(forward, float(cost), total_sweeps, trace, center=center, params=p)


def register_symmetric(a: Volume, b: Volume, brain_a: BrainMask, skull_a: SkullMask,
                       brain_b: BrainMask, skull_b: SkullMask,
                       opts: Optional[RegistrationOptions] = None) -> RegistrationResult:
    """
    Register both ways and combine: forward = sqrt(T_ab . T_ba^-1).

    Swapping the inputs yields exactly the inverse forward transform.
    """
    opts = opts or RegistrationOptions()
    ab = register_affine(a, b, brain_a, skull_a, brain_b, skull_b, opts)
    if not opts.symmetric:
        return ab
    ba = register_affine(b, a, brain_b, skull_b, brain_a, skull_a, opts)
    forward = sqrt_affine(ab.forward @ invert_affine(ba.forward))
    return RegistrationResult(
        forward=forward,
        cost_final=max(ab.cost_final, ba.cost_final),
        iterations=ab.iterations + ba.iterations,
        pyramid_trace=[dict(t, direction="ab") for t in ab.pyramid_trace]
        + [dict(t, direction="ba") for t in ba.pyramid_trace],
        center=ab.center,
        params=AffineParams.from_matrix(forward, ab.center).as_vector(),
        forward_raw=ab.forward,
        backward_raw=ba.forward,
    )


# ========== HALFWAY SPACE ==========


def sqrt_affine(t, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """Principal square root of an affine via the Denman-Beavers iteration."""
    t = check_affine(t)
    if np.linalg.det(t[:3, :3]) <= 0:
        raise ValueError("sqrt_affine needs a positive-determinant transform")
    eig = np.linalg.eigvals(t[:3, :3])
    if np.any((np.abs(eig.imag) < 1e-12) & (eig.real < 0)):
        raise ValueError("sqrt_affine: transform has a negative real eigenvalue")

    y = t.copy()
    z = np.eye(4)
    for _ in range(max_iter):
        y_next = 0.5 * (y + np.linalg.inv(z))
        z = 0.5 * (z + np.linalg.inv(y))
        delta = np.max(np.abs(y_next - y))
        y = y_next
        if delta <= tol * max(1.0, np.max(np.abs(y))):
            break
    else:
        raise ValueError(f"sqrt_affine did not converge in {max_iter} iterations")

    y[3] = [0.0, 0.0, 0.0, 1.0]
    residual = np.max(np.abs(y @ y - t))
    if residual > 1e-9 * max(1.0, np.max(np.abs(t))):
        raise ValueError(f"sqrt_affine did not converge (residual {residual:.3g})")
    return y


@dataclass
class Halfway:
    a: Volume
    b: Volume
    half: np.ndarray
    back: np.ndarray
    extras_a: List[Volume]
    extras_b: List[Volume]

    @property
    def grid(self) -> Grid:
        return self.a.grid


def to_halfway(a: Volume, b: Volume, forward, extras_a: Sequence[Volume] = (),
               extras_b: Sequence[Volume] = (), target: Optional[Grid] = None) -> Halfway:
    """
    Resample both scans into the halfway space of forward (A-world -> B-world).

    A is pushed by H = sqrt(forward), B by H . forward^-1; extras (masks and
    label images) go through the same transforms with nearest-neighbour
    sampling. Target grid defaults to the A grid.
    """
    forward = check_affine(forward)
    target = target or a.grid
    half = sqrt_affine(forward)
    back = half @ invert_affine(forward)
    return Halfway(
        a=resample(a, half, target),
        b=resample(b, back, target),
        half=half,
        back=back,
        extras_a=[resample(x, half, target, order=0) for x in extras_a],
        extras_b=[resample(x, back, target, order=0) for x in extras_b],
    )


def main():
    """CLI entry point."""
    parser = argparse.ArgumentParser(description="Skull-constrained symmetric affine registration")
    parser.add_argument("fixed", help="Scan A")
    parser.add_argument("moving", help="Scan B")
    parser.add_argument("--out", default="tmp/registration", help="Output directory")
    args = parser.parse_args()

    a, _ = read_nifti(args.fixed)
    b, _ = read_nifti(args.moving)
    brain_a, brain_b = threshold_brain_extract(a), threshold_brain_extract(b)
    skull_a, skull_b = derive_skull_mask(a, brain_a), derive_skull_mask(b, brain_b)
    reg = register_symmetric(a, b, brain_a, skull_a, brain_b, skull_b)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_affine(reg.forward, out_dir / "forward.mat")
    print(f"\n  Final cost: {reg.cost_final:.6f} after {reg.iterations} sweeps")
    print(f"  Saved transform: {out_dir / 'forward.mat'}")


if __name__ == "__main__":
    main()
