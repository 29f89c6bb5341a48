#!/usr/bin/env python3
"""
Tests for the consistency, correlation and timing experiments.
"""

import numpy as np
import pandas as pd
import pytest

from experiments import (
    PBVC_TABLE_COLUMNS, benchmark, consistency_experiment, consistency_from_table, correlation_experiment,
    load_clinical, pbvc_table,
)
from phantom import PhantomSpec, generate_cohort
from pipeline_config import PipelineConfig, ScanPair, Variant
from run_pipeline import load_manifest
from stats import ClinicalRecord, Measure, mfrr

VANILLA = Variant.VANILLA.value
SS = Variant.SS.value
SEG = Variant.SEG.value


def table_from(columns: dict, reverse: dict = None) -> pd.DataFrame:
    """columns: variant -> forward PBVC per subject; reverse defaults to the exact negation."""
    rows = []
    for variant, forward in columns.items():
        back = reverse.get(variant) if reverse and variant in reverse else -np.asarray(forward)
        for i, (f, b) in enumerate(zip(forward, back)):
            rows.append({"subject_id": f"s{i:03d}", "variant": variant,
                         "pbvc_forward_order": float(f), "pbvc_reverse_order": float(b)})
    return pd.DataFrame(rows, columns=PBVC_TABLE_COLUMNS)


def mmse_records(delta, measure=Measure.MMSE):
    return [ClinicalRecord(f"s{i:03d}", measure, 28.0, 28.0 - float(d)) for i, d in enumerate(delta)]


# ========== CONSISTENCY ==========


def test_injected_order_bias_gives_exact_mfrr():
    forward = np.linspace(-2.0, 0.5, 8)
    table = table_from({VANILLA: forward}, reverse={VANILLA: -forward + 0.2})
    report = consistency_from_table(table, VANILLA)
    entry = report.variants[VANILLA]
    assert entry["mfrr"] == pytest.approx(0.2, abs=1e-12)
    assert entry["sd"] == pytest.approx(0.0, abs=1e-12)
    assert "relative_improvement" not in entry


def test_half_residuals_give_fifty_percent():
    forward = np.linspace(-2.0, 0.0, 6)
    residuals = np.array([0.1, 0.3, 0.2, 0.4, 0.05, 0.15])
    table = table_from({VANILLA: forward, SS: forward},
                       reverse={VANILLA: -forward + residuals, SS: -forward - residuals / 2})
    report = consistency_from_table(table, VANILLA)
    assert report.variants[SS]["relative_improvement"] == pytest.approx(50.0, abs=1e-9)
    residual_list = [p["residual"] for p in report.variants[SS]["pairs"]]
    assert report.variants[SS]["mfrr"] == mfrr(residual_list)[0]


def test_zero_baseline_mfrr_has_no_improvement():
    forward = np.linspace(-1.0, 0.0, 4)
    report = consistency_from_table(table_from({VANILLA: forward, SS: forward}), VANILLA)
    assert report.variants[SS]["relative_improvement"] is None


def test_baseline_absent_from_table():
    with pytest.raises(ValueError, match="absent"):
        consistency_from_table(table_from({SS: [0.1, 0.2]}), VANILLA)


def test_pbvc_table_pairs_orders_and_excludes_incomplete():
    def row(subject, variant, order, value):
        return {"subject_id": subject, "variant": variant, "order": order, "pbvc": {"final_percent": value}}

    results = [row("s1", VANILLA, "forward", -1.0), row("s1", VANILLA, "reverse", 0.9),
               row("s2", VANILLA, "forward", -0.5)]
    table, excluded = pbvc_table(results)
    assert table.to_dict(orient="records") == [
        {"subject_id": "s1", "variant": VANILLA, "pbvc_forward_order": -1.0, "pbvc_reverse_order": 0.9},
    ]
    assert excluded == [{"subject_id": "s2", "variant": VANILLA, "reason": "only the forward order completed"}]


def test_consistency_experiment_needs_baseline():
    with pytest.raises(ValueError, match="absent"):
        consistency_experiment([], [PipelineConfig(variant=Variant.SS)], baseline=VANILLA)


def test_noiseless_phantom_is_scan_order_consistent(tmp_path):
    spec = PhantomSpec(dims=(64, 64, 64), spacing=(2.0, 2.0, 2.0), brain_radius_mm=40.0, seed=2)
    manifest_path, _ = generate_cohort(spec, [0.99], tmp_path, noise_frac=0.0, rigid_mm=0.0, rigid_rad=0.0)
    cfg = PipelineConfig(calibrate=False).validate()
    report, table, failures = consistency_experiment(load_manifest(manifest_path), [cfg])
    assert failures == []
    assert len(table) == 1
    assert report.variants[VANILLA]["mfrr"] <= 0.05


# ========== CORRELATION ==========


def test_constructed_cohort_marks_the_informative_variant():
    rng = np.random.default_rng(0)
    n = 120
    delta = rng.normal(2.0, 1.5, n)
    table = table_from({
        VANILLA: rng.normal(size=n),
        SS: -delta + rng.normal(scale=0.1 * delta.std(), size=n),
        SEG: rng.normal(size=n),
    })
    report = correlation_experiment(table, mmse_records(delta), VANILLA, alpha=0.01)

    corr = {c["variant"]: c for c in report.correlations}
    assert corr[SS]["r"] < -0.95
    assert corr[SS]["ci_lo"] <= corr[SS]["r"] <= corr[SS]["ci_hi"]
    comps = {c["variant"]: c for c in report.comparisons}
    assert comps[SS]["steiger_z"] < 0
    assert comps[SS]["p_bonferroni"] < 0.01
    assert comps[SS]["significant"]
    assert comps[SS]["m"] == 2
    assert not comps[SEG]["significant"]
    assert VANILLA not in comps


def test_identical_columns_give_null_comparisons():
    rng = np.random.default_rng(1)
    delta = rng.normal(size=30)
    column = -delta + rng.normal(size=30)
    table = table_from({VANILLA: column, SS: column, SEG: column})
    report = correlation_experiment(table, mmse_records(delta), VANILLA)
    for cmp in report.comparisons:
        assert cmp["steiger_z"] == 0.0
        assert cmp["p_raw"] == 1.0


def test_rescaled_variant_does_not_abort_the_experiment():
    rng = np.random.default_rng(3)
    delta = rng.normal(size=20)
    base = -delta + rng.normal(size=20)
    table = table_from({VANILLA: base, SS: 1.05 * base, SEG: base - 0.3})
    report = correlation_experiment(table, mmse_records(delta), VANILLA)
    comps = {c["variant"]: c for c in report.comparisons}
    assert set(comps) == {SS, SEG}
    for cmp in comps.values():
        assert cmp["steiger_z"] == 0.0
        assert cmp["degenerate"] == "exact linear map of the baseline"


def test_small_measures_are_skipped():
    rng = np.random.default_rng(2)
    delta = rng.normal(size=20)
    table = table_from({VANILLA: -delta + rng.normal(size=20), SS: -delta + rng.normal(size=20)})
    clinical = mmse_records(delta) + mmse_records(delta[:5], Measure.CDRSB)
    report = correlation_experiment(table, clinical, VANILLA)
    assert report.skipped == [{"measure": "CDRSB", "n": 5, "reason": "fewer than 10 subjects"}]
    assert {c["measure"] for c in report.correlations} == {"MMSE"}


def test_join_with_too_few_subjects():
    delta = np.arange(6, dtype=float)
    table = table_from({VANILLA: -delta, SS: delta})
    with pytest.raises(ValueError, match="join produces too few subjects"):
        correlation_experiment(table, mmse_records(delta), VANILLA)


def test_correlation_baseline_absent():
    delta = np.arange(12, dtype=float)
    with pytest.raises(ValueError, match="absent"):
        correlation_experiment(table_from({SS: -delta}), mmse_records(delta), VANILLA)


def test_load_clinical(tmp_path):
    path = tmp_path / "clinical.csv"
    path.write_text("subject_id,measure,value_t0,value_t1\n001,MMSE,29,25\n002,ADAS-13,10,14\n003,FAQ,2,\n",
                    encoding="utf-8")
    records = load_clinical(path)
    assert [(r.subject_id, r.measure) for r in records] == [("001", Measure.MMSE), ("002", Measure.ADAS13)]

    path.write_text("subject_id,measure,value_t0,value_t1\n001,UPDRS,10,12\n", encoding="utf-8")
    with pytest.raises(ValueError, match="unknown measure"):
        load_clinical(path)


# ========== TIMING ==========


def missing_pairs(n):
    return [ScanPair(f"s{i:02d}", f"/nonexistent/s{i:02d}_t0.nii.gz", f"/nonexistent/s{i:02d}_t1.nii.gz")
            for i in range(n)]


def test_benchmark_insufficient_subjects():
    with pytest.raises(ValueError, match="insufficient subjects"):
        benchmark(missing_pairs(5), [PipelineConfig()], n_subjects=30)


def test_benchmark_sample_is_seeded():
    manifest = missing_pairs(40)
    a = benchmark(manifest, [PipelineConfig()], n_subjects=30, seed=4)
    b = benchmark(manifest, [PipelineConfig()], n_subjects=30, seed=4)
    c = benchmark(manifest, [PipelineConfig()], n_subjects=30, seed=5)
    assert a["subjects"] == b["subjects"]
    assert a["subjects"] != c["subjects"]
    assert len(set(a["subjects"])) == 30
    assert a["seed"] == 4
    assert len(a["failures"]) == 30
    assert all(f["stage"] == "config" for f in a["failures"])


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
