#!/usr/bin/env python3
"""
Reports - Layer 3 Execution Script
JSON run reports, printed tables and static figures.

Every float in a written report is rounded to 6 significant digits, and
non-finite values become null. Tables use the "r [lo, hi]" and
"Z (p = ...)" layout.

Usage:
    python execution/reports.py tmp/consistency_report.json --plot tmp/scan_order.png
"""

import argparse
import json
import math
from datetime import datetime
from pathlib import Path
from typing import Dict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from stats import ConsistencyReport, CorrelationReport

PIPELINE_VERSION = "1.0.0"
SIG_DIGITS = 6
VOLATILE_KEYS = {"timestamp", "timings", "total_seconds", "timing"}


def round_sig(value: float, digits: int = SIG_DIGITS):
    if not math.isfinite(value):
        return None
    return float(f"{value:.{digits}g}")


def round_report(obj, digits: int = SIG_DIGITS):
    """Recursively round floats (numpy scalars and arrays included)."""
    if isinstance(obj, dict):
        return {str(k): round_report(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_report(v, digits) for v in obj]
    if isinstance(obj, np.ndarray):
        return round_report(obj.tolist(), digits)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return round_sig(float(obj), digits)
    if hasattr(obj, "to_dict"):
        return round_report(obj.to_dict(), digits)
    return obj


def strip_volatile(obj):
    """Copy without timestamp and timing fields, for determinism comparisons."""
    if isinstance(obj, dict):
        return {k: strip_volatile(v) for k, v in obj.items() if k not in VOLATILE_KEYS}
    if isinstance(obj, list):
        return [strip_volatile(v) for v in obj]
    return obj


def build_meta(cfgs, seed: int, **extra) -> dict:
    """Report header: version, per-variant config hash, seed and timestamp."""
    return {
        "version": PIPELINE_VERSION,
        "variants_are_analogs": True,
        "config_hashes": {c.variant.value: c.config_hash() for c in cfgs},
        "configs": {c.variant.value: c.to_dict() for c in cfgs},
        "seed": seed,
        "timestamp": datetime.now().isoformat(timespec="seconds"),
        **extra,
    }


def write_report(report, path) -> Path:
    """Write a report as indented JSON with rounded floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(round_report(report), f, indent=2, ensure_ascii=False)
    print(f"💾 Saved report to {path}")
    return path


# ========== TABLES ==========


def format_r_ci(r: float, lo: float, hi: float) -> str:
    return f"{r:.3f} [{lo:.3f}, {hi:.3f}]"


def format_p(p: float) -> str:
    return "p < 0.001" if p < 0.001 else f"p = {p:.3f}"


def format_correlation_table(report: CorrelationReport) -> str:
    """
    One block per measure: an "r [95% CI]" row per variant column and a
    Steiger row with "Baseline" under the baseline column.
    """
    corr = pd.DataFrame(report.correlations)
    if corr.empty:
        return "(no correlations)"
    variants = [report.baseline] + sorted(v for v in corr["variant"].unique() if v != report.baseline)
    comps = {(c["measure"], c["variant"]): c for c in report.comparisons}

    rows = []
    for measure in corr["measure"].drop_duplicates():
        cells = corr[corr["measure"] == measure].set_index("variant")
        r_row = {"measure": f"Δ{measure}", "row": "r [95% CI]"}
        z_row = {"measure": "", "row": "Steiger's Z"}
        for v in variants:
            c = cells.loc[v]
            r_row[v] = format_r_ci(c["r"], c["ci_lo"], c["ci_hi"])
            if v == report.baseline:
                z_row[v] = "Baseline"
            else:
                cmp = comps[(measure, v)]
                mark = "*" if cmp["significant"] else ""
                z_row[v] = f"{cmp['steiger_z']:.2f}{mark} ({format_p(cmp['p_bonferroni'])})"
        rows += [r_row, z_row]
    table = pd.DataFrame(rows, columns=["measure", "row"] + variants).to_string(index=False)
    note = f"* significant at alpha = {report.alpha} after Bonferroni correction"
    if report.skipped:
        note += "\nskipped: " + ", ".join(f"{s['measure']} (n={s['n']})" for s in report.skipped)
    return f"{table}\n{note}"


def format_timing_table(summary: Dict[str, dict]) -> str:
    """Variant, mean seconds, SD seconds, n."""
    rows = [{"variant": v, "mean_s": f"{t['mean_seconds']:.1f}", "sd_s": f"{t['sd_seconds']:.1f}", "n": t["n"]}
            for v, t in sorted(summary.items())]
    return pd.DataFrame(rows, columns=["variant", "mean_s", "sd_s", "n"]).to_string(index=False)


def format_consistency_table(report: ConsistencyReport) -> str:
    rows = []
    for v, e in report.variants.items():
        imp = e.get("relative_improvement")
        rows.append({
            "variant": v,
            "MFRR_pp": f"{e['mfrr']:.3f}",
            "SD_pp": f"{e['sd']:.3f}",
            "n": e["n"],
            "improvement_%": "Baseline" if v == report.baseline else ("n/a" if imp is None else f"{imp:.1f}"),
        })
    text = pd.DataFrame(rows).to_string(index=False)
    if report.excluded:
        text += f"\nexcluded pairs: {len(report.excluded)}"
    return text


# ========== FIGURES ==========


def plot_scan_order(report: ConsistencyReport, path) -> Path:
    """PBVC(A,B) against PBVC(B,A) per variant, with the y = -x line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    variants = list(report.variants)
    fig, axes = plt.subplots(1, len(variants), figsize=(4.5 * len(variants), 4.5), squeeze=False)
    for ax, v in zip(axes[0], variants):
        e = report.variants[v]
        x = np.array([p["pbvc_forward_order"] for p in e["pairs"]])
        y = np.array([p["pbvc_reverse_order"] for p in e["pairs"]])
        lim = max(1e-3, float(np.abs(np.concatenate([x, y])).max()) * 1.1)
        ax.plot([-lim, lim], [lim, -lim], color="grey", linestyle="--", linewidth=1)
        ax.scatter(x, y, s=14, alpha=0.8)
        ax.set_xlim(-lim, lim)
        ax.set_ylim(-lim, lim)
        ax.set_xlabel("PBVC(A, B) [%]")
        ax.set_ylabel("PBVC(B, A) [%]")
        ax.set_title(f"{v}\nMFRR {e['mfrr']:.3f} ± {e['sd']:.3f} pp")
    fig.tight_layout()
    plt.savefig(str(path), dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_timing(summary: Dict[str, dict], path) -> Path:
    """Mean end-to-end seconds per variant with SD error bars."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    variants = sorted(summary)
    fig, ax = plt.subplots(figsize=(1.6 * len(variants) + 2, 4))
    ax.bar(variants, [summary[v]["mean_seconds"] for v in variants],
           yerr=[summary[v]["sd_seconds"] for v in variants], capsize=4)
    ax.set_ylabel("seconds per pair")
    fig.tight_layout()
    plt.savefig(str(path), dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def consistency_from_json(path) -> ConsistencyReport:
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    body = data.get("consistency", data)
    return ConsistencyReport(baseline=body["baseline"], variants=body["variants"], excluded=body.get("excluded", []))


def main():
    """CLI entry point: re-render a consistency report."""
    parser = argparse.ArgumentParser(description="Render a saved consistency report")
    parser.add_argument("report", help="consistency report JSON")
    parser.add_argument("--plot", help="scan-order figure path")
    args = parser.parse_args()

    report = consistency_from_json(args.report)
    print(format_consistency_table(report))
    if args.plot:
        print(f"💾 Saved figure to {plot_scan_order(report, args.plot)}")


if __name__ == "__main__":
    main()
