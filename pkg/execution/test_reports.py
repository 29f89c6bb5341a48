#!/usr/bin/env python3
"""
Tests for report rounding, volatile-field stripping, tables and figures.
"""

import json

import numpy as np
import pytest

from reports import (
    build_meta, consistency_from_json, format_consistency_table, format_correlation_table, format_p,
    format_r_ci, format_timing_table, plot_scan_order, plot_timing, round_report, round_sig, strip_volatile,
    write_report,
)
from pipeline_config import PipelineConfig, Variant
from stats import ConsistencyReport, CorrelationReport, fisher_ci


def consistency_report() -> ConsistencyReport:
    pairs = [{"subject_id": f"s{i}", "pbvc_forward_order": -1.0 - 0.1 * i,
              "pbvc_reverse_order": 0.9 + 0.1 * i, "residual": 0.1} for i in range(4)]
    return ConsistencyReport(
        baseline="VANILLA-ANALOG",
        variants={
            "VANILLA-ANALOG": {"pairs": pairs, "mfrr": 0.1, "sd": 0.0, "n": 4},
            "SS-ANALOG": {"pairs": pairs, "mfrr": 0.05, "sd": 0.01, "n": 4, "relative_improvement": 50.0},
        },
        excluded=[{"subject_id": "s9", "variant": "SS-ANALOG", "reason": "reverse [register] failed"}],
    )


# ========== ROUNDING ==========


def test_fisher_row_formatting():
    lo, hi = fisher_ci(-0.226, 1006)
    assert format_r_ci(-0.226, lo, hi) == "-0.226 [-0.284, -0.167]"


def test_format_p():
    assert format_p(0.0004) == "p < 0.001"
    assert format_p(0.087) == "p = 0.087"


def test_round_sig():
    assert round_sig(1.23456789) == 1.23457
    assert round_sig(-0.000123456789) == -0.000123457
    assert round_sig(float("nan")) is None
    assert round_sig(float("inf")) is None


def test_round_report_handles_numpy_and_bools():
    out = round_report({
        "a": np.float64(2.0 / 3.0),
        "b": np.array([1.0 / 3.0, np.nan]),
        "flag": np.bool_(True),
        "count": np.int64(7),
        "nested": [{"x": 123456.789}],
        "label": "kept",
    })
    assert out == {"a": 0.666667, "b": [0.333333, None], "flag": True, "count": 7,
                   "nested": [{"x": 123457.0}], "label": "kept"}
    assert isinstance(out["flag"], bool)


def test_strip_volatile():
    report = {"meta": {"timestamp": "now", "seed": 1},
              "results": [{"pbvc": -1.0, "timings": {"load": 0.1}, "total_seconds": 3.2}],
              "aggregates": {"timing": {"x": 1}}}
    assert strip_volatile(report) == {"meta": {"seed": 1}, "results": [{"pbvc": -1.0}], "aggregates": {}}


def test_build_meta_names_analogs():
    cfgs = [PipelineConfig(), PipelineConfig(variant=Variant.SS)]
    meta = build_meta(cfgs, seed=3)
    assert meta["variants_are_analogs"] is True
    assert meta["config_hashes"]["SS-ANALOG"] == cfgs[1].config_hash()
    assert meta["seed"] == 3
    assert "timestamp" in meta


def test_write_report_is_valid_json(tmp_path):
    path = write_report({"meta": {"seed": 0}, "results": [{"v": np.float64(1.0 / 7.0), "bad": float("nan")}]},
                        tmp_path / "out" / "report.json")
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    assert data["results"][0] == {"v": 0.142857, "bad": None}


# ========== TABLES ==========


def test_correlation_table_layout():
    report = CorrelationReport(baseline="VANILLA-ANALOG", alpha=0.01)
    lo, hi = fisher_ci(-0.226, 1006)
    report.correlations = [
        {"measure": "MMSE", "variant": "VANILLA-ANALOG", "r": -0.226, "ci_lo": lo, "ci_hi": hi, "n": 1006},
        {"measure": "MMSE", "variant": "SS-ANALOG", "r": -0.31, "ci_lo": -0.36, "ci_hi": -0.25, "n": 1006},
    ]
    report.comparisons = [{"measure": "MMSE", "variant": "SS-ANALOG", "steiger_z": -8.84, "p_raw": 1e-18,
                           "p_bonferroni": 3e-18, "m": 1, "significant": True, "n": 1006}]
    text = format_correlation_table(report)
    assert "-0.226 [-0.284, -0.167]" in text
    assert "-8.84* (p < 0.001)" in text
    assert "Baseline" in text
    assert "ΔMMSE" in text


def test_consistency_and_timing_tables():
    text = format_consistency_table(consistency_report())
    assert "Baseline" in text and "50.0" in text
    assert "excluded pairs: 1" in text
    timing = format_timing_table({"VANILLA-ANALOG": {"mean_seconds": 41.25, "sd_seconds": 2.5, "n": 30}})
    assert "41.2" in timing or "41.3" in timing


# ========== FIGURES ==========


def test_plots_are_written(tmp_path):
    scan = plot_scan_order(consistency_report(), tmp_path / "figs" / "scan_order.png")
    timing = plot_timing({"VANILLA-ANALOG": {"mean_seconds": 40.0, "sd_seconds": 2.0, "n": 3},
                          "SS-ANALOG": {"mean_seconds": 45.0, "sd_seconds": 1.0, "n": 3}}, tmp_path / "timing.png")
    for path in (scan, timing):
        assert path.exists()
        assert path.stat().st_size > 0


def test_consistency_json_round_trip(tmp_path):
    report = consistency_report()
    path = write_report({"consistency": report.to_dict()}, tmp_path / "c.json")
    loaded = consistency_from_json(path)
    assert loaded.baseline == report.baseline
    assert loaded.variants["SS-ANALOG"]["relative_improvement"] == pytest.approx(50.0)
    assert len(loaded.excluded) == 1


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
