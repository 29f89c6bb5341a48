#!/usr/bin/env python3
"""
Volume data model - Layer 3 Execution Script
Grids, volumes, affines, interpolation, smoothing, gradients and NIfTI I/O.

Conventions:
- Arrays are indexed [i, j, k] along (x, y, z).
- Linear voxel index = i + nx * (j + ny * k), i.e. x fastest (Fortran order).
  Every ordered iteration over voxels (boundary points, edge samples) uses it.
- All intensities are held as float64 in memory; files are written as float32
  unless a label dtype is requested.
"""

import argparse
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import nibabel as nib
import numpy as np
from scipy import ndimage

MIN_DIM = 8
SUPPORTED_DATATYPES = {16: "float32", 4: "int16", 2: "uint8"}
BOUNDS_TOL = 1e-9  # voxel units

# ========== AFFINES ==========


def check_affine(m) -> np.ndarray:
    """Validate a 4x4 homogeneous transform and return it as float64."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("affine has non-finite entries")
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError(f"affine last row must be (0,0,0,1), got {m[3].tolist()}")
    if abs(np.linalg.det(m[:3, :3])) < 1e-12:
        raise ValueError("singular transform: upper-left 3x3 block is not invertible")
    return m


def identity_affine() -> np.ndarray:
    return np.eye(4)


def translation_affine(t) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = np.asarray(t, dtype=np.float64)
    return m


def invert_affine(m) -> np.ndarray:
    """Invert an affine, keeping the last row exact."""
    m = check_affine(m)
    a_inv = np.linalg.inv(m[:3, :3])
    out = np.eye(4)
    out[:3, :3] = a_inv
    out[:3, 3] = -a_inv @ m[:3, 3]
    return out


def apply_affine(m, points) -> np.ndarray:
    """Apply a 4x4 affine to an (N, 3) array of points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts @ m[:3, :3].T + m[:3, 3]


def format_affine(m) -> str:
    """Sidecar text: 16 whitespace-separated numbers, row-major."""
    return "\n".join(" ".join(f"{x:.17g}" for x in row) for row in np.asarray(m))


def save_affine(m, path):
    Path(path).write_text(format_affine(m) + "\n", encoding="utf-8")


def load_affine(path) -> np.ndarray:
    values = [float(x) for x in Path(path).read_text(encoding="utf-8").split()]
    if len(values) != 16:
        raise ValueError(f"transform file {path} must hold 16 numbers, found {len(values)}")
    return check_affine(np.array(values).reshape(4, 4))


# ========== DATA MODEL ==========


@dataclass(frozen=True, eq=False)
class Grid:
    """Voxel lattice: dims, spacing in mm, and the voxel-to-world affine."""
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValueError("grid needs three dims and three spacings")
        if min(dims) < MIN_DIM:
            raise ValueError(f"grid dims {dims} below pipeline minimum {MIN_DIM}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"grid spacing {spacing} must be finite and > 0")
        affine = check_affine(self.affine).copy()
        if np.linalg.det(affine[:3, :3]) <= 0:
            raise ValueError("grid affine must have a positive determinant (no flipped axes)")
        affine.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def from_spacing(cls, dims, spacing, origin=(0.0, 0.0, 0.0)) -> "Grid":
        """Axis-aligned grid whose voxel (0,0,0) sits at origin."""
        m = np.diag(list(spacing) + [1.0])
        m[:3, 3] = origin
        return cls(tuple(dims), tuple(spacing), m)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def inverse_affine(self) -> np.ndarray:
        return invert_affine(self.affine)

    def voxel_to_world(self, ijk) -> np.ndarray:
        return apply_affine(self.affine, ijk)

    def world_to_voxel(self, xyz) -> np.ndarray:
        return apply_affine(self.inverse_affine, xyz)

    def matches(self, other: "Grid", tol: float = 1e-3) -> bool:
        """Same dims, spacing and affine within tol."""
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.affine, other.affine, atol=tol)
        )

    def world_coordinates(self) -> np.ndarray:
        """World coordinates of every voxel, shape (3, nx, ny, nz)."""
        ijk = np.indices(self.dims, dtype=np.float64)
        a = self.affine
        return np.einsum("ab,b...->a...", a[:3, :3], ijk) + a[:3, 3].reshape(3, 1, 1, 1)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "affine": np.asarray(self.affine).tolist(),
        }


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar image on a grid. Data is float64, shape grid.dims, immutable."""
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.shape != self.grid.dims:
            raise ValueError(f"data shape {data.shape} does not match grid dims {self.grid.dims}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume holds non-finite values")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    def with_data(self, data) -> "Volume":
        return Volume(self.grid, data)

    def flat(self) -> np.ndarray:
        """Data in linear voxel order (x fastest)."""
        return self.data.ravel(order="F")


@dataclass(frozen=True, eq=False)
class VectorField:
    """One world-space 3-vector per voxel, shape (nx, ny, nz, 3)."""
    grid: Grid
    vectors: np.ndarray

    def __post_init__(self):
        vec = np.array(self.vectors, dtype=np.float64)
        if vec.shape != self.grid.dims + (3,):
            raise ValueError(f"vector field shape {vec.shape} does not match grid {self.grid.dims}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("vector field holds non-finite components")
        vec.flags.writeable = False
        object.__setattr__(self, "vectors", vec)


def linear_index(dims, ijk) -> np.ndarray:
    """Linear voxel index (x fastest) of integer voxel coordinates (N, 3)."""
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    return ijk[:, 0] + dims[0] * (ijk[:, 1] + dims[1] * ijk[:, 2])


def voxels_in_order(mask: np.ndarray) -> np.ndarray:
    """Integer coordinates (N, 3) of True voxels, ascending linear index."""
    lin = np.flatnonzero(np.asarray(mask).ravel(order="F"))
    return np.stack(np.unravel_index(lin, mask.shape, order="F"), axis=1)


# ========== INTERPOLATION ==========


def sample_voxel_coords(data: np.ndarray, coords, oob: float = 0.0, order: int = 1) -> np.ndarray:
    """
    Sample an array at voxel coordinates.

    Args:
        data: 3-D array
        coords: (..., 3) voxel coordinates
        oob: value returned outside [0, n-1] on any axis
        order: 1 = trilinear, 0 = nearest neighbour

    Returns:
        Array of shape coords.shape[:-1]
    """
    coords = np.asarray(coords, dtype=np.float64)
    flat = coords.reshape(-1, 3)
    shape = np.array(data.shape, dtype=np.float64)
    outside = np.any((flat < -BOUNDS_TOL) | (flat > shape - 1 + BOUNDS_TOL), axis=1)

    values = ndimage.map_coordinates(data, flat.T, order=order, mode="nearest", prefilter=False)
    values = values.astype(np.float64, copy=False)
    values[outside] = oob
    return values.reshape(coords.shape[:-1])


def sample_world(v: Volume, points, oob: float = 0.0, order: int = 1) -> np.ndarray:
    """Trilinear samples of v at world points (..., 3)."""
    points = np.asarray(points, dtype=np.float64)
    vox = v.grid.world_to_voxel(points.reshape(-1, 3)).reshape(points.shape)
    return sample_voxel_coords(v.data, vox, oob=oob, order=order)


def trilinear_sample(v: Volume, p_world, oob: float = 0.0) -> float:
    """Trilinear interpolation at a single world point (mm)."""
    return float(sample_world(v, np.asarray(p_world, dtype=np.float64).reshape(1, 3), oob=oob)[0])


def resample(v: Volume, t, target: Optional[Grid] = None, oob: float = 0.0, order: int = 1) -> Volume:
    """
    Push v through transform t onto target.

    Output voxel i holds v sampled at t^-1 * world(i). Use order=0 for masks and
    label images so the discrete label set is preserved.
    """
    target = target or v.grid
    t_inv = invert_affine(t)  # raises on singular transforms
    if np.array_equal(t_inv, np.eye(4)) and target.matches(v.grid, tol=0.0):
        return v
    world = target.world_coordinates()
    m = v.grid.inverse_affine @ t_inv
    vox = np.einsum("ab,b...->...a", m[:3, :3], world) + m[:3, 3]
    return Volume(target, sample_voxel_coords(v.data, vox, oob=oob, order=order))


# ========== FILTERING ==========


def gaussian_smooth(v: Volume, sigma_mm: float) -> Volume:
    """Separable Gaussian, sigma in mm, truncated at 4 sigma, edge replication."""
    if sigma_mm < 0:
        raise ValueError(f"negative sigma {sigma_mm}")
    if sigma_mm == 0:
        return v
    sigmas = [sigma_mm / s for s in v.grid.spacing]
    out = ndimage.gaussian_filter(v.data, sigma=sigmas, mode="nearest", truncate=4.0)
    return v.with_data(out)


def gradient(v: Volume) -> VectorField:
    """Central differences in world units (per mm), one-sided at borders."""
    if min(v.grid.dims) < 3:
        raise ValueError("gradient needs at least 3 voxels along each axis")
    g_idx = np.stack(np.gradient(v.data), axis=-1)  # d/d(index)
    # chain rule: grad_world = A^-T grad_index
    a_inv_t = np.linalg.inv(v.grid.affine[:3, :3]).T
    g_world = g_idx @ a_inv_t.T
    return VectorField(v.grid, g_world)


def downsample(v: Volume, factor: int) -> Volume:
    """Pre-smooth with sigma = factor/2 voxels, then keep every factor-th voxel."""
    if factor == 1:
        return v
    smoothed = ndimage.gaussian_filter(v.data, sigma=factor / 2.0, mode="nearest", truncate=4.0)
    return Volume(downsample_grid(v.grid, factor), smoothed[::factor, ::factor, ::factor])


def downsample_grid(grid: Grid, factor: int) -> Grid:
    dims = tuple(len(range(0, d, factor)) for d in grid.dims)
    affine = grid.affine @ np.diag([factor, factor, factor, 1.0])
    return Grid(dims, tuple(s * factor for s in grid.spacing), affine)


# ========== NIFTI I/O ==========


def _is_nifti_name(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def read_nifti(path) -> Tuple[Volume, int]:
    """
    Read a NIfTI-1 file.

    Returns:
        (Volume, datatype code from the header)
    """
    path = Path(path)
    if not path.exists():
        raise OSError(f"file not found: {path}")
    if not _is_nifti_name(path):
        raise ValueError(f"unsupported file format: {path.name} (expected .nii or .nii.gz)")

    try:
        img = nib.load(str(path))
    except Exception as e:
        raise ValueError(f"unreadable NIfTI file {path}: {e}") from e
    if not isinstance(img, nib.Nifti1Image) or isinstance(img, nib.Nifti2Image):
        raise ValueError(f"unsupported file format: {path.name} is not NIfTI-1 single-file")

    hdr = img.header
    code = int(hdr["datatype"])
    if code not in SUPPORTED_DATATYPES:
        raise ValueError(f"unsupported datatype code {code} in {path.name} "
                         f"(accepted: {sorted(SUPPORTED_DATATYPES)})")
    if len(hdr.extensions) > 0:
        raise ValueError(f"NIfTI extensions are not supported ({path.name})")

    shape = img.shape
    if len(shape) < 3 or any(d != 1 for d in shape[3:]):
        raise ValueError(f"multi-frame or non-3-D image not supported: shape {shape}")

    data = np.asarray(img.get_fdata(dtype=np.float64)).reshape(shape[:3])
    if not np.all(np.isfinite(data)):
        raise ValueError(f"non-finite values in {path.name}")

    spacing = tuple(float(z) for z in hdr.get_zooms()[:3])
    if int(hdr["sform_code"]) > 0:
        affine = hdr.get_sform()
    elif int(hdr["qform_code"]) > 0:
        affine = hdr.get_qform()
    else:
        affine = np.diag(list(spacing) + [1.0])
    affine = np.asarray(affine, dtype=np.float64)
    affine[3] = [0.0, 0.0, 0.0, 1.0]

    grid = Grid(tuple(int(d) for d in shape[:3]), spacing, affine)
    return Volume(grid, data), code


def load_volume(path) -> Volume:
    """Load a NIfTI-1 volume (float32, int16 or uint8; .nii or .nii.gz)."""
    volume, _ = read_nifti(path)
    return volume


def save_volume(v: Volume, path, dtype=np.float32):
    """Save as single-file NIfTI-1; .nii.gz names are gzip-compressed."""
    path = Path(path)
    if not _is_nifti_name(path):
        raise ValueError(f"unsupported file format: {path.name} (expected .nii or .nii.gz)")
    path.parent.mkdir(parents=True, exist_ok=True)

    data = v.data
    if np.issubdtype(np.dtype(dtype), np.integer):
        data = np.rint(data)
    img = nib.Nifti1Image(data.astype(dtype), np.asarray(v.grid.affine))
    img.header.set_data_dtype(dtype)
    img.set_sform(np.asarray(v.grid.affine), code=1)
    img.set_qform(np.asarray(v.grid.affine), code=1)
    img.header.set_zooms(v.grid.spacing)
    nib.save(img, str(path))


def main():
    """CLI entry point: print the header geometry of a volume."""
    parser = argparse.ArgumentParser(description="Inspect a NIfTI-1 volume")
    parser.add_argument("path", help="Volume file (.nii or .nii.gz)")
    args = parser.parse_args()

    v, code = read_nifti(args.path)
    print(f"  File: {args.path}")
    print(f"  Datatype: {SUPPORTED_DATATYPES[code]} (code {code})")
    print(f"  Dims: {v.grid.dims}")
    print(f"  Spacing (mm): {v.grid.spacing}")
    print(f"  Affine:\n{format_affine(v.grid.affine)}")
    print(f"  Intensity range: {v.data.min():.4g} .. {v.data.max():.4g}")


if __name__ == "__main__":
    main()
