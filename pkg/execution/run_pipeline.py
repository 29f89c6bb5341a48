#!/usr/bin/env python3
"""
Pipeline runner - Layer 3 Execution Script
Runs the staged PBVC pipeline for one scan pair or a whole manifest.

Batch runs isolate failures per subject: a failed (subject, variant) cell is
recorded under `failures` and the batch keeps going. Output rows are ordered
by (subject_id, variant, order) whatever order the workers finish in.

Usage:
    python execution/run_pipeline.py --manifest tmp/phantoms/manifest.csv --variant VANILLA
"""

import argparse
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from extract import load_external_mask
from imgvol import load_volume, save_affine
from pbvc import PBVCResult, pbvc_symmetric
from pipeline_config import (
    ConfigError, PipelineConfig, PipelineError, ScanPair, Variant, timed_stage, validate_inputs,
)
from run_log import banner, log
from segment import load_external_labelmap
from stats import summarize

MANIFEST_REQUIRED = ["subject_id", "t0", "t1"]
MANIFEST_OPTIONAL = ["mask_t0", "mask_t1", "labelmap_t0", "labelmap_t1"]


def load_manifest(path) -> List[ScanPair]:
    """Parse `subject_id,t0,t1[,mask_t0,mask_t1,labelmap_t0,labelmap_t1]`."""
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ValueError(f"manifest parse error in {path}: {e}") from e
    missing = [c for c in MANIFEST_REQUIRED if c not in df.columns]
    if missing:
        raise ValueError(f"manifest parse error in {path}: missing column(s) {missing}")
    unknown = [c for c in df.columns if c not in MANIFEST_REQUIRED + MANIFEST_OPTIONAL]
    if unknown:
        raise ValueError(f"manifest parse error in {path}: unknown column(s) {unknown}")
    if df["subject_id"].duplicated().any():
        dupes = sorted(df.loc[df["subject_id"].duplicated(), "subject_id"].unique())
        raise ValueError(f"manifest parse error in {path}: duplicate subject_id {dupes}")

    base = path.parent

    def resolve(value: str) -> Optional[str]:
        value = value.strip()
        if not value:
            return None
        p = Path(value)
        return str(p if p.is_absolute() or p.exists() else base / p)

    pairs = []
    for row in df.to_dict(orient="records"):
        pairs.append(ScanPair(
            subject_id=row["subject_id"].strip(),
            t0=resolve(row["t0"]),
            t1=resolve(row["t1"]),
            **{k: resolve(row.get(k, "")) for k in MANIFEST_OPTIONAL},
        ))
    return pairs


def write_manifest(pairs: Sequence[ScanPair], path):
    rows = [{k: getattr(p, k) or "" for k in MANIFEST_REQUIRED + MANIFEST_OPTIONAL} for p in pairs]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=MANIFEST_REQUIRED + MANIFEST_OPTIONAL).to_csv(path, index=False)


def run_pipeline(pair: ScanPair, cfg: PipelineConfig) -> Tuple[PBVCResult, dict]:
    """
    Execute every stage for one pair with wall-clock timing per stage.

    Returns:
        (PBVCResult, {stage: seconds})
    """
    validate_inputs(pair, cfg)
    timings = {}
    with timed_stage("load", timings):
        a = load_volume(pair.t0)
        b = load_volume(pair.t1)
        masks = (None, None)
        labelmaps = (None, None)
        if cfg.extractor == "external":
            masks = (load_external_mask(pair.mask_t0, a.grid), load_external_mask(pair.mask_t1, b.grid))
        if cfg.segmenter == "external":
            labelmaps = (load_external_labelmap(pair.labelmap_t0, cfg.codebook),
                         load_external_labelmap(pair.labelmap_t1, cfg.codebook))
    result = pbvc_symmetric(a, b, cfg, masks, labelmaps, timings)
    return result, timings


def dump_edges(result: PBVCResult, path):
    """Per-edge CSV for both directions."""
    frames = []
    for direction, d in (("forward", result.forward), ("backward", result.backward)):
        e = d.edges
        if e is None:
            continue
        frames.append(pd.DataFrame({
            "direction": direction,
            "point_x": e.positions[:, 0],
            "point_y": e.positions[:, 1],
            "point_z": e.positions[:, 2],
            "normal_x": e.normals[:, 0],
            "normal_y": e.normals[:, 1],
            "normal_z": e.normals[:, 2],
            "displacement_mm": e.displacement,
            "quality": e.quality,
            "accepted": e.accepted,
        }))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)


def run_cell(pair: ScanPair, cfg: PipelineConfig, order: str = "forward",
             out_dir: Optional[str] = None, edges: bool = False) -> dict:
    """
    One (subject, variant, order) cell as a report row.

    Never raises: failures come back as {"success": False, ...}.
    """
    run_pair = pair if order == "forward" else pair.swapped()
    row = {
        "subject_id": pair.subject_id,
        "variant": cfg.variant.value,
        "order": order,
        "config_hash": cfg.config_hash(),
    }
    start = time.perf_counter()
    try:
        result, timings = run_pipeline(run_pair, cfg)
    except ConfigError as e:
        return {**row, "success": False, "stage": "config", "error": str(e)}
    except PipelineError as e:
        return {**row, "success": False, "stage": e.stage, "error": e.message}
    except Exception as e:
        return {**row, "success": False, "stage": "unknown", "error": f"{type(e).__name__}: {e}"}

    row.update({
        "success": True,
        "extractor": cfg.extractor,
        "segmenter": cfg.segmenter,
        "pbvc": result.to_dict(),
        "timings": timings,
        "total_seconds": time.perf_counter() - start,
    })
    if out_dir:
        stem = Path(out_dir) / "pairs" / f"{pair.subject_id}_{cfg.variant.value}_{order}"
        stem.parent.mkdir(parents=True, exist_ok=True)
        save_affine(np.asarray(result.details["registration"]["forward"]), f"{stem}_forward.mat")
        if edges:
            dump_edges(result, f"{stem}_edges.csv")
    return row


def _cell_job(job):
    return run_cell(*job)


def execute_cells(cells: Sequence[Tuple[ScanPair, PipelineConfig, str]], parallelism: int = 1,
                  out_dir: Optional[str] = None, edges: bool = False) -> Tuple[List[dict], List[dict]]:
    """
    Run cells sequentially or on a process pool.

    Returns:
        (successful rows, failure rows), both sorted by (subject_id, variant, order)
    """
    jobs = [(pair, cfg, order, str(out_dir) if out_dir else None, edges) for pair, cfg, order in cells]
    rows = []
    if parallelism <= 1:
        for i, job in enumerate(jobs, 1):
            log(f"[{i}/{len(jobs)}] {job[0].subject_id} {job[1].variant.value} ({job[2]})")
            rows.append(_cell_job(job))
            if not rows[-1]["success"]:
                log(f"  ERROR [{rows[-1]['stage']}]: {rows[-1]['error']}")
    else:
        log(f"Running {len(jobs)} cells on {parallelism} workers")
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            rows = list(pool.map(_cell_job, jobs))
        for r in rows:
            if not r["success"]:
                log(f"  ERROR {r['subject_id']} {r['variant']} [{r['stage']}]: {r['error']}")

    key = lambda r: (r["subject_id"], r["variant"], r["order"])
    results = sorted((r for r in rows if r["success"]), key=key)
    failures = sorted((r for r in rows if not r["success"]), key=key)
    return results, failures


def timing_aggregates(results: Sequence[dict]) -> dict:
    """Mean and SD of end-to-end seconds per variant."""
    out = {}
    for variant in sorted({r["variant"] for r in results}):
        mean, sd, n = summarize(r["total_seconds"] for r in results if r["variant"] == variant)
        out[variant] = {"mean_seconds": mean, "sd_seconds": sd, "n": n}
    return out


def run_batch(manifest: Sequence[ScanPair], cfgs: Sequence[PipelineConfig], parallelism: int = 1,
              out_dir: Optional[str] = None, edges: bool = False, seed: int = 0) -> dict:
    """
    Every (subject, config) cell of the manifest.

    Returns:
        RunReport dict with meta, results, failures, aggregates
    """
    from reports import build_meta

    banner(f"PIPELINE BATCH: {len(manifest)} subjects x {len(cfgs)} variants")
    cells = [(pair, cfg, "forward") for pair in manifest for cfg in cfgs]
    results, failures = execute_cells(cells, parallelism, out_dir, edges)
    log(f"Batch complete: {len(results)}/{len(cells)} successful")
    return {
        "meta": build_meta(cfgs, seed),
        "results": results,
        "failures": failures,
        "aggregates": {"timing": timing_aggregates(results)},
    }


def main():
    """CLI entry point."""
    from reports import write_report

    parser = argparse.ArgumentParser(description="Run the PBVC pipeline over a manifest")
    parser.add_argument("--manifest", required=True, help="Manifest CSV")
    parser.add_argument("--variant", action="append", help="Variant (repeatable, default VANILLA-ANALOG)")
    parser.add_argument("--parallelism", type=int, default=1)
    parser.add_argument("--no-calibrate", action="store_true")
    parser.add_argument("--out", default="tmp/batch")
    args = parser.parse_args()

    cfgs = [PipelineConfig(variant=Variant.parse(v), calibrate=not args.no_calibrate).validate()
            for v in (args.variant or [Variant.VANILLA.value])]
    report = run_batch(load_manifest(args.manifest), cfgs, args.parallelism, args.out)
    path = write_report(report, Path(args.out) / "run_report.json")
    print(f"\n  Report: {path}")


if __name__ == "__main__":
    main()
