#!/usr/bin/env python3
"""
Tissue segmentation - Layer 3 Execution Script
Three-class CSF / GM / WM labelling from either:
- intensity_segment3: 1-D k-means on in-mask intensities (built-in)
- aggregate_labels: merging an external anatomical label map into tissues

Usage:
    python execution/segment.py scan.nii.gz --brain-mask brain.nii.gz --out seg.nii.gz
    python execution/segment.py --labelmap synthseg.nii.gz --codebook data/synthseg_codebook.csv --out seg.nii.gz
"""

import argparse
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans

from extract import BrainMask
from imgvol import Grid, Volume, read_nifti, save_volume
from run_log import log

BASE_DIR = Path(__file__).parent.parent
DEFAULT_CODEBOOK = BASE_DIR / "data" / "synthseg_codebook.csv"

BG, CSF, GM, WM = 0, 1, 2, 3
TISSUE_NAMES = {BG: "BG", CSF: "CSF", GM: "GM", WM: "WM"}

# Structure -> tissue. Hemisphere prefixes are stripped before lookup, so
# left and right variants of a structure always land on the same tissue.
CANONICAL_TABLE = {
    "lateral ventricle": CSF,
    "inferior lateral ventricle": CSF,
    "third ventricle": CSF,
    "fourth ventricle": CSF,
    "outer csf": CSF,
    "cerebral cortex": GM,
    "thalamus": GM,
    "caudate": GM,
    "putamen": GM,
    "pallidum": GM,
    "hippocampus": GM,
    "amygdala": GM,
    "cerebellar cortex": GM,
    "accumbens": GM,
    "ventral diencephalon": GM,
    "cerebral white matter": WM,
    "cerebellar white matter": WM,
    "brainstem": WM,
}

# Spellings found in common lookup tables
ALIASES = {
    "inf lat vent": "inferior lateral ventricle",
    "3rd ventricle": "third ventricle",
    "4th ventricle": "fourth ventricle",
    "csf": "outer csf",
    "thalamus proper": "thalamus",
    "cerebellum cortex": "cerebellar cortex",
    "cerebellum white matter": "cerebellar white matter",
    "accumbens area": "accumbens",
    "ventraldc": "ventral diencephalon",
    "ventral dc": "ventral diencephalon",
    "brain stem": "brainstem",
}

HEMISPHERE_PREFIX = re.compile(r"^(left|right|lh|rh)\s+")


@dataclass(frozen=True, eq=False)
class TissueSegmentation:
    grid: Grid
    labels: np.ndarray
    unmapped_codes: Tuple[int, ...] = ()
    centroids: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.grid.dims:
            raise ValueError(f"label shape {labels.shape} does not match grid dims {self.grid.dims}")
        if labels.size and (labels.min() < BG or labels.max() > WM):
            raise ValueError(f"tissue labels must lie in {{0,1,2,3}}, found {np.unique(labels).tolist()}")
        labels = labels.astype(np.uint8)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    def brain_tissue(self) -> np.ndarray:
        """GM or WM indicator."""
        return (self.labels == GM) | (self.labels == WM)

    def count(self, tissue: int) -> int:
        return int((self.labels == tissue).sum())

    def tissue_volume_mm3(self) -> float:
        """GM + WM volume."""
        return int(self.brain_tissue().sum()) * self.grid.voxel_volume

    def as_volume(self) -> Volume:
        return Volume(self.grid, self.labels.astype(np.float64))


@dataclass(frozen=True, eq=False)
class AnatomicalLabelMap:
    grid: Grid
    labels: np.ndarray
    code_names: Dict[int, str]

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != self.grid.dims:
            raise ValueError(f"label shape {labels.shape} does not match grid dims {self.grid.dims}")
        if labels.size and labels.min() < 0:
            raise ValueError("anatomical labels must be nonnegative")
        missing = sorted(int(c) for c in np.unique(labels) if c != 0 and int(c) not in self.code_names)
        if missing:
            raise ValueError(f"label codes {missing} are not named in the codebook")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)


def normalize_structure(name: str) -> str:
    """Lowercase, unify separators, drop the hemisphere prefix, apply aliases."""
    text = re.sub(r"[-_\s]+", " ", str(name).strip().lower())
    text = HEMISPHERE_PREFIX.sub("", text)
    return ALIASES.get(text, text)


def tissue_for_structure(name: str) -> Optional[int]:
    """Tissue class of a structure name, None when the table does not list it."""
    return CANONICAL_TABLE.get(normalize_structure(name))


# ========== EXTERNAL LABEL MAPS ==========


def load_codebook(path) -> Dict[int, str]:
    """Read a `code,name` CSV into {code: name}."""
    try:
        df = pd.read_csv(path, skipinitialspace=True, dtype={"code": "int64", "name": "string"})
    except (ValueError, pd.errors.ParserError) as e:
        raise ValueError(f"codebook parse failure in {path}: {e}") from e
    if list(df.columns[:2]) != ["code", "name"]:
        raise ValueError(f"codebook parse failure in {path}: header must be 'code,name', got {list(df.columns)}")
    if df["code"].duplicated().any():
        dupes = sorted(df.loc[df["code"].duplicated(), "code"].tolist())
        raise ValueError(f"codebook parse failure in {path}: duplicate codes {dupes}")
    return {int(code): str(name).strip() for code, name in zip(df["code"], df["name"])}


def load_external_labelmap(path, codebook=DEFAULT_CODEBOOK) -> AnatomicalLabelMap:
    """Ingest an integer anatomical label volume and name its codes."""
    volume, datatype = read_nifti(path)
    if datatype not in (2, 4):
        raise ValueError(f"non-integer labels: {Path(path).name} is stored as datatype code {datatype}")
    code_names = load_codebook(codebook)
    return AnatomicalLabelMap(volume.grid, np.rint(volume.data).astype(np.int64), code_names)


def aggregate_labels(a: AnatomicalLabelMap) -> TissueSegmentation:
    """
    Merge anatomical structures into CSF / GM / WM.

    Codes whose name is not in the canonical table become BG and are listed
    in unmapped_codes.
    """
    codes = np.unique(a.labels)
    lut = np.zeros(int(codes.max()) + 1 if codes.size else 1, dtype=np.uint8)
    unmapped = []
    for code in codes:
        code = int(code)
        if code == 0:
            continue
        tissue = tissue_for_structure(a.code_names[code])
        if tissue is None:
            unmapped.append(code)
        else:
            lut[code] = tissue

    if unmapped:
        names = ", ".join(f"{c}={a.code_names[c]}" for c in unmapped)
        log(f"  Unmapped label codes set to BG: {names}")
    return TissueSegmentation(a.grid, lut[a.labels], unmapped_codes=tuple(unmapped))


# ========== K-MEANS ==========


def initial_centroids(values: np.ndarray) -> np.ndarray:
    """10th/50th/90th percentiles; falls back to percentiles of the distinct values when they collide."""
    init = np.percentile(values, [10, 50, 90])
    if len(np.unique(init)) < 3:
        init = np.percentile(np.unique(values), [10, 50, 90])
    return init


def intensity_segment3(v: Volume, brain: BrainMask, seed: int = 0) -> TissueSegmentation:
    """
    Three-cluster 1-D k-means inside the brain mask.

    Clusters sorted by ascending centroid become CSF, GM, WM; voxels outside
    the mask are BG.
    """
    if not v.grid.matches(brain.grid):
        raise ValueError("intensity_segment3: brain mask is not on the image grid")
    if not brain.mask.any():
        raise ValueError("intensity_segment3 needs a nonempty brain mask")

    # fixed (Fortran) order so the clusterer always sees the same sequence
    inside = brain.mask.ravel(order="F")
    values = v.data.ravel(order="F")[inside]
    n_distinct = len(np.unique(values))
    if n_distinct < 3:
        raise ValueError(f"degenerate intensity distribution: {n_distinct} distinct values inside the mask")

    init = initial_centroids(values)
    x = values.reshape(-1, 1)
    variance = float(values.var())
    km = KMeans(
        n_clusters=3,
        init=init.reshape(-1, 1),
        n_init=1,
        max_iter=100,
        tol=(1e-6 ** 2) / variance,
        random_state=seed,
    )
    assignment = km.fit_predict(x)

    centers = km.cluster_centers_.ravel()
    order = np.argsort(centers, kind="stable")
    if not np.all(np.diff(centers[order]) > 0):
        raise ValueError(f"degenerate intensity distribution: cluster centroids {centers.tolist()}")
    rank = np.empty(3, dtype=np.uint8)
    rank[order] = np.array([CSF, GM, WM], dtype=np.uint8)

    flat = np.zeros(v.grid.n_voxels, dtype=np.uint8)
    flat[inside] = rank[assignment]
    labels = flat.reshape(v.grid.dims, order="F")
    return TissueSegmentation(v.grid, labels, centroids=tuple(float(c) for c in centers[order]))


def main():
    """CLI entry point."""
    parser = argparse.ArgumentParser(description="Three-class tissue segmentation")
    parser.add_argument("scan", nargs="?", help="Scan volume for k-means segmentation")
    parser.add_argument("--brain-mask", help="Brain mask for k-means segmentation")
    parser.add_argument("--labelmap", help="External anatomical label map")
    parser.add_argument("--codebook", default=str(DEFAULT_CODEBOOK), help="code,name CSV")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True, help="Output tissue label volume")
    args = parser.parse_args()

    if args.labelmap:
        seg = aggregate_labels(load_external_labelmap(args.labelmap, args.codebook))
    elif args.scan and args.brain_mask:
        volume, _ = read_nifti(args.scan)
        from extract import load_external_mask
        seg = intensity_segment3(volume, load_external_mask(args.brain_mask, volume.grid), args.seed)
    else:
        parser.error("give either --labelmap or a scan with --brain-mask")

    save_volume(seg.as_volume(), args.out, dtype=np.uint8)
    for tissue in (CSF, GM, WM):
        print(f"  {TISSUE_NAMES[tissue]}: {seg.count(tissue)} voxels")
    if seg.unmapped_codes:
        print(f"  Unmapped codes: {list(seg.unmapped_codes)}")
    print(f"  Saved: {args.out}")


if __name__ == "__main__":
    main()
