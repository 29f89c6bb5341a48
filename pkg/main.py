#!/usr/bin/env python3
"""
PBVC Toolkit - Main Orchestrator
Skull-constrained, scan-order symmetric estimation of percentage brain volume
change, with the phantom generator, batch runner and cohort experiments.

Usage:
    python main.py phantom generate --scales 0.98 0.99 1.0 1.01
    python main.py pipeline run --t0 a.nii.gz --t1 b.nii.gz
    python main.py pipeline batch --manifest tmp/phantoms/manifest.csv --variant VANILLA
    python main.py experiment consistency --manifest tmp/phantoms/manifest.csv
    python main.py experiment correlate --pbvc-table tmp/pbvc_table.csv --clinical clinical.csv
    python main.py experiment bench --manifest manifest.csv --n-subjects 30
    python main.py sessions pair sessions.csv
"""

import argparse
import sys
from dataclasses import replace
from datetime import datetime
from pathlib import Path

# Add execution directory to path
sys.path.insert(0, str(Path(__file__).parent / "execution"))

import pandas as pd

from experiments import benchmark, consistency_experiment, correlation_experiment, load_clinical
from phantom import add_generate_arguments, run_generate
from pipeline_config import ConfigError, ScanPair, Variant, resolve_settings
from reports import (
    build_meta, format_consistency_table, format_correlation_table, format_timing_table,
    plot_scan_order, plot_timing, write_report,
)
from run_log import ensure_dirs
from run_pipeline import load_manifest, run_batch, write_manifest
from sessions import pair_first_last


def header(title: str):
    print("\n" + "=" * 60)
    print(f"  {title}")
    print(f"  {datetime.now().strftime('%Y-%m-%d %H:%M')}")
    print("=" * 60)


def settings_from_args(args):
    """Resolve configs from CLI flags, --config, the environment and defaults."""
    variants = args.variant
    if args.extractor or args.segmenter:
        if variants:
            raise ConfigError("use either --variant or --extractor/--segmenter, not both")
        variants = [Variant.from_stages(args.extractor or "threshold", args.segmenter or "kmeans3").value]
    settings = resolve_settings(
        config_path=args.config,
        variants=variants,
        seed=args.seed,
        parallelism=args.parallelism,
        out_dir=args.out,
        calibrate=False if args.no_calibrate else None,
        baseline=getattr(args, "baseline", None),
    )
    if args.codebook:
        settings.configs = [replace(c, codebook=args.codebook).validate() for c in settings.configs]
    return settings


# ========== COMMANDS ==========


def cmd_pipeline_run(args):
    settings = settings_from_args(args)
    pair = ScanPair(
        subject_id=args.subject_id,
        t0=args.t0,
        t1=args.t1,
        mask_t0=args.brain_mask[0] if args.brain_mask else None,
        mask_t1=args.brain_mask[1] if args.brain_mask else None,
        labelmap_t0=args.labelmap[0] if args.labelmap else None,
        labelmap_t1=args.labelmap[1] if args.labelmap else None,
    )
    header(f"PBVC: {pair.subject_id}")
    report = run_batch([pair], settings.configs, 1, settings.out_dir, args.dump_edges, settings.seed)
    write_report(report, settings.out_dir / f"{pair.subject_id}_report.json")

    for row in report["results"]:
        pbvc = row["pbvc"]
        print(f"\n  ✅ {row['variant']}")
        print(f"    Forward PBVC:  {pbvc['forward']['pbvc_percent']:+.4f} %")
        print(f"    Backward PBVC: {pbvc['backward']['pbvc_percent']:+.4f} %")
        print(f"    Final PBVC:    {pbvc['final_percent']:+.4f} % (factor {pbvc['calibration_factor']:.4f})")
        print(f"    Time:          {row['total_seconds']:.1f} s")
    for row in report["failures"]:
        print(f"\n  ❌ {row['variant']} [{row['stage']}]: {row['error']}")
    return report


def cmd_pipeline_batch(args):
    settings = settings_from_args(args)
    manifest = load_manifest(args.manifest)
    report = run_batch(manifest, settings.configs, settings.parallelism, settings.out_dir,
                       args.dump_edges, settings.seed)
    write_report(report, settings.out_dir / "run_report.json")
    print("\n" + format_timing_table(report["aggregates"]["timing"]))
    if report["failures"]:
        print(f"\n  ❌ {len(report['failures'])} failed cell(s), see run_report.json")
    return report


def cmd_experiment_consistency(args):
    settings = settings_from_args(args)
    manifest = load_manifest(args.manifest)
    result, table, failures = consistency_experiment(
        manifest, settings.configs, settings.parallelism, settings.baseline.value, settings.out_dir)
    out = settings.out_dir
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "pbvc_table.csv", index=False)
    write_report({
        "meta": build_meta(settings.configs, settings.seed, baseline=settings.baseline.value),
        "results": table.to_dict(orient="records"),
        "failures": failures,
        "aggregates": {"consistency": result.to_dict()},
    }, out / "consistency_report.json")
    plot_scan_order(result, out / "scan_order.png")
    print("\n" + format_consistency_table(result))
    return result


def cmd_experiment_correlate(args):
    settings = settings_from_args(args)
    table = pd.read_csv(args.pbvc_table, dtype={"subject_id": str})
    result = correlation_experiment(table, load_clinical(args.clinical), settings.baseline.value,
                                    alpha=args.alpha, m=args.comparisons)
    write_report({
        "meta": build_meta(settings.configs, settings.seed, baseline=settings.baseline.value,
                           pbvc_table=str(args.pbvc_table), clinical=str(args.clinical)),
        "results": result.correlations,
        "failures": result.skipped,
        "aggregates": {"comparisons": result.comparisons},
    }, settings.out_dir / "correlation_report.json")
    print("\n" + format_correlation_table(result))
    return result


def cmd_experiment_bench(args):
    settings = settings_from_args(args)
    manifest = load_manifest(args.manifest)
    summary = benchmark(manifest, settings.configs, args.n_subjects, settings.seed, settings.parallelism)
    write_report({
        "meta": build_meta(settings.configs, settings.seed, sample_seed=summary["seed"]),
        "results": summary["subjects"],
        "failures": summary["failures"],
        "aggregates": {"timing": summary["timing"]},
    }, settings.out_dir / "bench_report.json")
    plot_timing(summary["timing"], settings.out_dir / "timing.png")
    print("\n" + format_timing_table(summary["timing"]))
    return summary


def cmd_sessions_pair(args):
    pairs, excluded = pair_first_last(args.sessions)
    write_manifest(pairs, args.manifest_out)
    print(f"\n✅ {len(pairs)} pairs written to {args.manifest_out}")
    for e in excluded:
        print(f"  ❌ {e['subject_id']}: {e['reason']}")
    return pairs


def cmd_phantom_generate(args):
    header("PHANTOM COHORT")
    return run_generate(args)


# ========== PARSER ==========


def common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="Run seed (default 0 or PBVC_SEED)")
    common.add_argument("--parallelism", type=int, help="Worker processes (default 1 or PBVC_PARALLELISM)")
    common.add_argument("--out", help="Output directory (default tmp/ or PBVC_OUT_DIR)")
    common.add_argument("--variant", action="append",
                        help="VANILLA-ANALOG, SS-ANALOG, SEG-ANALOG or SS-SEG-ANALOG (repeatable)")
    common.add_argument("--extractor", choices=["threshold", "external"], help="Brain extraction stage")
    common.add_argument("--segmenter", choices=["kmeans3", "external"], help="Tissue segmentation stage")
    common.add_argument("--codebook", help="Structure codebook CSV for external label maps")
    common.add_argument("--no-calibrate", action="store_true", help="Skip self-calibration")
    common.add_argument("--dump-edges", action="store_true", help="Write per-edge CSVs next to results")
    common.add_argument("--baseline", help="Baseline variant for experiments (default VANILLA-ANALOG)")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Percentage brain volume change between two scans",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py phantom generate --dims 64 64 64 --spacing 3 3 3 --brain-radius 40
  python main.py pipeline run --t0 t0.nii.gz --t1 t1.nii.gz --no-calibrate
  python main.py pipeline batch --manifest tmp/phantoms/manifest.csv --variant VANILLA --variant SS
  python main.py experiment consistency --manifest tmp/phantoms/manifest.csv --parallelism 4
  python main.py experiment correlate --pbvc-table tmp/pbvc_table.csv --clinical clinical.csv
  python main.py experiment bench --manifest manifest.csv --n-subjects 30 --seed 7
  python main.py sessions pair sessions.csv --manifest-out tmp/manifest.csv
        """
    )
    common = common_flags()
    groups = parser.add_subparsers(dest="group", required=True)

    phantom = groups.add_parser("phantom", help="Synthetic head phantoms").add_subparsers(dest="command", required=True)
    gen = phantom.add_parser("generate", help="Write a phantom cohort and its manifest")
    add_generate_arguments(gen)
    gen.set_defaults(func=cmd_phantom_generate)

    pipeline = groups.add_parser("pipeline", help="Run the PBVC pipeline").add_subparsers(dest="command", required=True)
    run = pipeline.add_parser("run", parents=[common], help="One scan pair")
    run.add_argument("--t0", required=True, help="Baseline scan")
    run.add_argument("--t1", required=True, help="Follow-up scan")
    run.add_argument("--subject-id", default="subject")
    run.add_argument("--brain-mask", nargs=2, metavar=("T0", "T1"), help="External brain masks")
    run.add_argument("--labelmap", nargs=2, metavar=("T0", "T1"), help="External label maps")
    run.set_defaults(func=cmd_pipeline_run)
    batch = pipeline.add_parser("batch", parents=[common], help="Every subject of a manifest")
    batch.add_argument("--manifest", required=True)
    batch.set_defaults(func=cmd_pipeline_batch)

    experiment = groups.add_parser("experiment", help="Cohort experiments").add_subparsers(dest="command", required=True)
    cons = experiment.add_parser("consistency", parents=[common], help="Scan-order consistency")
    cons.add_argument("--manifest", required=True)
    cons.set_defaults(func=cmd_experiment_consistency)
    corr = experiment.add_parser("correlate", parents=[common], help="Clinical correlation")
    corr.add_argument("--pbvc-table", required=True, help="subject_id,variant,pbvc_forward_order,pbvc_reverse_order")
    corr.add_argument("--clinical", required=True, help="subject_id,measure,value_t0,value_t1")
    corr.add_argument("--alpha", type=float, default=0.01)
    corr.add_argument("--comparisons", type=int, help="Bonferroni m (default: non-baseline variants)")
    corr.set_defaults(func=cmd_experiment_correlate)
    bench = experiment.add_parser("bench", parents=[common], help="Runtime benchmark")
    bench.add_argument("--manifest", required=True)
    bench.add_argument("--n-subjects", type=int, default=30)
    bench.set_defaults(func=cmd_experiment_bench)

    sessions = groups.add_parser("sessions", help="Session listings").add_subparsers(dest="command", required=True)
    pair = sessions.add_parser("pair", help="First and last scan per subject")
    pair.add_argument("sessions", help="subject_id,session_date,path[,mask_path,labelmap_path]")
    pair.add_argument("--manifest-out", default="tmp/manifest.csv")
    pair.set_defaults(func=cmd_sessions_pair)
    return parser


def main(argv=None):
    """CLI entry point."""
    args = build_parser().parse_args(argv)
    ensure_dirs()
    try:
        return args.func(args)
    except ValueError as e:
        print(f"\n❌ {e}")
        sys.exit(2)


if __name__ == "__main__":
    main()
