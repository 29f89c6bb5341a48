#!/usr/bin/env python3
"""
Experiments - Layer 3 Execution Script
The three cohort experiments run on top of the pipeline batch runner:

  consistency   every pair processed as (A, B) and as (B, A); scan-order
                residuals, MFRR and improvement over the baseline variant
  correlate     PBVC against sign-standardised clinical change, with
                Steiger comparisons against the baseline variant
  bench         end-to-end wall-clock timing on a seeded subject sample

Usage:
    python execution/experiments.py correlate --pbvc-table tmp/pbvc_table.csv --clinical clinical.csv
"""

import argparse
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from pipeline_config import PipelineConfig, ScanPair, Variant
from run_log import banner, log
from run_pipeline import execute_cells, timing_aggregates
from stats import (
    ClinicalRecord, ConsistencyReport, CorrelationReport, Measure, compare_to_baseline,
    correlation_row, mfrr, progression_index, relative_improvement, scan_order_residual,
)

MIN_SUBJECTS = 10
PBVC_TABLE_COLUMNS = ["subject_id", "variant", "pbvc_forward_order", "pbvc_reverse_order"]
CLINICAL_COLUMNS = ["subject_id", "measure", "value_t0", "value_t1"]


# ========== SCAN-ORDER CONSISTENCY ==========


def consistency_from_table(table: pd.DataFrame, baseline: str,
                           excluded: Optional[List[dict]] = None) -> ConsistencyReport:
    """
    Residuals, MFRR and improvement per variant from a PBVC table.

    Args:
        table: rows of subject_id, variant, pbvc_forward_order, pbvc_reverse_order
        baseline: variant the improvements are measured against
        excluded: pairs dropped upstream, carried into the report
    """
    missing = [c for c in PBVC_TABLE_COLUMNS if c not in table.columns]
    if missing:
        raise ValueError(f"PBVC table is missing column(s) {missing}")
    baseline = Variant.parse(baseline).value
    variants = sorted(table["variant"].unique())
    if baseline not in variants:
        raise ValueError(f"baseline variant {baseline} absent from the run")

    report = ConsistencyReport(baseline=baseline, excluded=list(excluded or []))
    for variant in variants:
        rows = table[table["variant"] == variant].sort_values("subject_id")
        pairs = []
        for row in rows.itertuples(index=False):
            pairs.append({
                "subject_id": row.subject_id,
                "pbvc_forward_order": float(row.pbvc_forward_order),
                "pbvc_reverse_order": float(row.pbvc_reverse_order),
                "residual": scan_order_residual(float(row.pbvc_forward_order), float(row.pbvc_reverse_order)),
            })
        mean, sd = mfrr([p["residual"] for p in pairs])
        report.variants[variant] = {"pairs": pairs, "mfrr": mean, "sd": sd, "n": len(pairs)}

    base_mfrr = report.variants[baseline]["mfrr"]
    for variant, entry in report.variants.items():
        if variant == baseline:
            continue
        if base_mfrr > 0:
            entry["relative_improvement"] = relative_improvement(base_mfrr, entry["mfrr"])
        else:
            entry["relative_improvement"] = None
            log(f"  Baseline MFRR is 0, no relative improvement for {variant}")
    return report


def pbvc_table(results: Sequence[dict]):
    """
    Pair forward and reverse rows into the PBVC table.

    Returns:
        (DataFrame, excluded) where excluded lists cells missing a direction
    """
    cells = {}
    for r in results:
        cells.setdefault((r["subject_id"], r["variant"]), {})[r["order"]] = r["pbvc"]["final_percent"]
    rows, excluded = [], []
    for (subject_id, variant), orders in sorted(cells.items()):
        if "forward" in orders and "reverse" in orders:
            rows.append({
                "subject_id": subject_id,
                "variant": variant,
                "pbvc_forward_order": orders["forward"],
                "pbvc_reverse_order": orders["reverse"],
            })
        else:
            excluded.append({"subject_id": subject_id, "variant": variant,
                             "reason": f"only the {next(iter(orders))} order completed"})
    return pd.DataFrame(rows, columns=PBVC_TABLE_COLUMNS), excluded


def consistency_experiment(manifest: Sequence[ScanPair], cfgs: Sequence[PipelineConfig], parallelism: int = 1,
                           baseline: str = Variant.VANILLA.value, out_dir: Optional[str] = None):
    """
    Run every pair in both scan orders.

    Returns:
        (ConsistencyReport, PBVC table DataFrame, failure rows)
    """
    baseline = Variant.parse(baseline)
    if baseline not in {c.variant for c in cfgs}:
        raise ValueError(f"baseline variant {baseline.value} absent from the configured variants")

    banner(f"SCAN-ORDER CONSISTENCY: {len(manifest)} subjects x {len(cfgs)} variants x 2 orders")
    cells = [(pair, cfg, order) for pair in manifest for cfg in cfgs for order in ("forward", "reverse")]
    results, failures = execute_cells(cells, parallelism, out_dir)

    table, _ = pbvc_table(results)
    failed_keys = sorted({(f["subject_id"], f["variant"]) for f in failures})
    excluded = [{"subject_id": s, "variant": v,
                 "reason": "; ".join(f"{f['order']} [{f['stage']}] {f['error']}" for f in failures
                                     if (f["subject_id"], f["variant"]) == (s, v))}
                for s, v in failed_keys]
    if excluded:
        log(f"  Excluded {len(excluded)} pair(s) with a failed direction")
    if table.empty or baseline.value not in set(table["variant"]):
        raise ValueError(f"no complete pairs for the baseline variant {baseline.value}")

    report = consistency_from_table(table, baseline.value, excluded)
    for variant, entry in report.variants.items():
        log(f"  {variant}: MFRR {entry['mfrr']:.4f} pp (SD {entry['sd']:.4f}, n={entry['n']})")
    return report, table, failures


# ========== CLINICAL CORRELATION ==========


def load_clinical(path) -> List[ClinicalRecord]:
    """Parse `subject_id,measure,value_t0,value_t1`; unknown measure codes raise."""
    df = pd.read_csv(path, dtype={"subject_id": str, "measure": str})
    missing = [c for c in CLINICAL_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"clinical table is missing column(s) {missing}")
    df = df.dropna(subset=["value_t0", "value_t1"])
    return [ClinicalRecord(str(r.subject_id), Measure.parse(r.measure), float(r.value_t0), float(r.value_t1))
            for r in df.itertuples(index=False)]


def correlation_experiment(pbvc_table_df: pd.DataFrame, clinical: Sequence[ClinicalRecord],
                           baseline: str = Variant.VANILLA.value, alpha: float = 0.01,
                           m: Optional[int] = None, ci_alpha: float = 0.05) -> CorrelationReport:
    """
    Correlate forward-order PBVC with each clinical progression index.

    Measures with fewer than 10 subjects after the join are skipped and
    listed; an error is raised when every measure is skipped.

    Args:
        pbvc_table_df: PBVC table (pbvc_forward_order is used)
        clinical: clinical records
        baseline: reference variant for the Steiger comparisons
        alpha: significance level applied to Bonferroni-corrected p
        m: Bonferroni comparison count (default: non-baseline variants)
        ci_alpha: confidence-interval level for r
    """
    baseline = Variant.parse(baseline).value
    wide = pbvc_table_df.pivot(index="subject_id", columns="variant", values="pbvc_forward_order")
    variants = sorted(wide.columns)
    if baseline not in variants:
        raise ValueError(f"baseline variant {baseline} absent from the PBVC table")
    others = [v for v in variants if v != baseline]
    m = m if m is not None else max(1, len(others))

    deltas = pd.DataFrame([
        {"subject_id": p.subject_id, "measure": p.measure.value, "delta": p.delta}
        for p in map(progression_index, clinical)
    ])
    report = CorrelationReport(baseline=baseline, alpha=alpha)
    measures = [m_.value for m_ in Measure if not deltas.empty and m_.value in set(deltas["measure"])]

    for measure in measures:
        sub = deltas[deltas["measure"] == measure].set_index("subject_id")[["delta"]]
        joined = sub.join(wide, how="inner").dropna().sort_index()
        n = len(joined)
        if n < MIN_SUBJECTS:
            report.skipped.append({"measure": measure, "n": n, "reason": f"fewer than {MIN_SUBJECTS} subjects"})
            log(f"  {measure}: skipped, n={n}")
            continue
        delta = joined["delta"].to_numpy()
        for variant in variants:
            row = correlation_row(delta, joined[variant].to_numpy(), ci_alpha)
            report.correlations.append({"measure": measure, "variant": variant, **row})
        for variant in others:
            cmp = compare_to_baseline(delta, joined[variant].to_numpy(), joined[baseline].to_numpy(), m, alpha)
            report.comparisons.append({"measure": measure, "variant": variant, **cmp})
        log(f"  {measure}: n={n}")

    if not report.correlations:
        raise ValueError(f"join produces too few subjects: every measure has n < {MIN_SUBJECTS}")
    return report


# ========== TIMING ==========


def benchmark(manifest: Sequence[ScanPair], cfgs: Sequence[PipelineConfig], n_subjects: int = 30,
              seed: int = 0, parallelism: int = 1) -> dict:
    """
    Wall-clock timing on a seeded random subject sample.

    Returns:
        {"seed", "subjects", "timing": {variant: {mean_seconds, sd_seconds, n}}, "failures"}
    """
    if n_subjects < 1:
        raise ValueError(f"n_subjects must be >= 1, got {n_subjects}")
    if len(manifest) < n_subjects:
        raise ValueError(f"insufficient subjects: manifest has {len(manifest)}, benchmark needs {n_subjects}")
    rng = np.random.default_rng(seed)
    picked = sorted(rng.choice(len(manifest), size=n_subjects, replace=False).tolist())
    sample = [manifest[i] for i in picked]

    banner(f"BENCHMARK: {n_subjects} subjects x {len(cfgs)} variants (seed {seed})")
    results, failures = execute_cells([(p, c, "forward") for p in sample for c in cfgs], parallelism)
    return {
        "seed": seed,
        "subjects": [p.subject_id for p in sample],
        "timing": timing_aggregates(results),
        "failures": failures,
    }


def main():
    """CLI entry point: correlation experiment from existing tables."""
    from reports import format_correlation_table

    parser = argparse.ArgumentParser(description="PBVC experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    corr = sub.add_parser("correlate", help="Correlate PBVC with clinical change")
    corr.add_argument("--pbvc-table", required=True)
    corr.add_argument("--clinical", required=True)
    corr.add_argument("--baseline", default=Variant.VANILLA.value)
    args = parser.parse_args()

    table = pd.read_csv(args.pbvc_table, dtype={"subject_id": str})
    report = correlation_experiment(table, load_clinical(args.clinical), args.baseline)
    print(format_correlation_table(report))


if __name__ == "__main__":
    main()
