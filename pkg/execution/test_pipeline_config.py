#!/usr/bin/env python3
"""
Tests for variants, option validation, TOML loading and setting precedence.
"""

from dataclasses import replace
from pathlib import Path

import pytest

from pipeline_config import (
    BASE_DIR, ConfigError, EdgeOptions, PipelineConfig, PipelineError, RegistrationOptions, ScanPair,
    Variant, resolve_settings, timed_stage, validate_inputs,
)

EXAMPLE_CONFIG = BASE_DIR / "data" / "pipeline_config.example.toml"


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for key in ("PBVC_SEED", "PBVC_PARALLELISM", "PBVC_OUT_DIR"):
        monkeypatch.delenv(key, raising=False)


def write_toml(path: Path, text: str) -> str:
    path.write_text(text, encoding="utf-8")
    return str(path)


# ========== VARIANTS ==========


def test_variant_stage_mapping():
    assert (Variant.VANILLA.extractor, Variant.VANILLA.segmenter) == ("threshold", "kmeans3")
    assert (Variant.SS.extractor, Variant.SS.segmenter) == ("external", "kmeans3")
    assert (Variant.SEG.extractor, Variant.SEG.segmenter) == ("threshold", "external")
    assert (Variant.SS_SEG.extractor, Variant.SS_SEG.segmenter) == ("external", "external")
    for v in Variant:
        assert Variant.from_stages(v.extractor, v.segmenter) is v


def test_variant_parse():
    assert Variant.parse("ss-seg") is Variant.SS_SEG
    assert Variant.parse("VANILLA-ANALOG") is Variant.VANILLA
    assert Variant.parse("SEG") is Variant.SEG
    with pytest.raises(ConfigError, match="unknown variant"):
        Variant.parse("BET2")
    with pytest.raises(ConfigError):
        Variant.from_stages("external", "fast")


# ========== VALIDATION ==========


def test_default_config_is_valid():
    assert PipelineConfig().validate().variant is Variant.VANILLA


@pytest.mark.parametrize("cfg", [
    PipelineConfig(calibration_scale=1.0),
    PipelineConfig(calibration_scale=0.97),
    PipelineConfig(registration=RegistrationOptions(pyramid_factors=())),
    PipelineConfig(registration=RegistrationOptions(brain_weight=0.0, skull_weight=0.0)),
    PipelineConfig(edges=EdgeOptions(area_element="voronoi")),
    PipelineConfig(variant=Variant.SEG, codebook="/nonexistent/codebook.csv"),
])
def test_invalid_configs_rejected(cfg):
    with pytest.raises(ConfigError):
        cfg.validate()


def test_config_hash_is_stable_and_sensitive():
    a = PipelineConfig()
    assert a.config_hash() == PipelineConfig().config_hash()
    assert len(a.config_hash()) == 64
    assert a.config_hash() != replace(a, seed=1).config_hash()
    assert a.config_hash() != replace(a, edges=EdgeOptions(search_limit_mm=4.0)).config_hash()
    assert a.config_hash() != replace(a, variant=Variant.SS).config_hash()


def test_validate_inputs_before_compute(tmp_path):
    t0 = tmp_path / "t0.nii.gz"
    t1 = tmp_path / "t1.nii.gz"
    t0.write_bytes(b"")
    t1.write_bytes(b"")
    pair = ScanPair("s1", str(t0), str(t1))
    validate_inputs(pair, PipelineConfig())
    with pytest.raises(ConfigError, match="needs mask_t0"):
        validate_inputs(pair, PipelineConfig(variant=Variant.SS))
    missing = replace(pair, mask_t0=str(tmp_path / "nope.nii.gz"), mask_t1=str(t1))
    with pytest.raises(ConfigError, match="missing file"):
        validate_inputs(missing, PipelineConfig(variant=Variant.SS))


def test_swapped_pair_exchanges_time_points():
    pair = ScanPair("s1", "a", "b", "ma", "mb", "la", "lb")
    assert pair.swapped() == ScanPair("s1", "b", "a", "mb", "ma", "lb", "la")
    assert pair.swapped().swapped() == pair


def test_timed_stage_tags_failures():
    timings = {}
    with pytest.raises(PipelineError) as info:
        with timed_stage("register", timings):
            raise ValueError("boom")
    assert info.value.stage == "register"
    assert info.value.message == "boom"
    assert timings["register"] >= 0.0


# ========== LOADING AND PRECEDENCE ==========


def test_example_config_loads():
    settings = resolve_settings(str(EXAMPLE_CONFIG))
    assert [c.variant for c in settings.configs] == list(Variant)
    assert settings.configs[0].registration.pyramid_factors == (4, 2, 1)
    assert settings.configs[0].edges.area_element == "isotropic"
    assert Path(settings.configs[0].codebook).exists()
    assert len({c.config_hash() for c in settings.configs}) == 4


def test_unknown_section_and_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown section"):
        resolve_settings(write_toml(tmp_path / "a.toml", "[display]\ncolor = true\n"))
    with pytest.raises(ConfigError, match="unknown key"):
        resolve_settings(write_toml(tmp_path / "b.toml", "[edges]\nsearch_radius = 3.0\n"))
    with pytest.raises(ConfigError, match="unknown key"):
        resolve_settings(write_toml(tmp_path / "c.toml", "[pipeline]\nthreads = 3\n"))


def test_malformed_and_missing_files(tmp_path):
    with pytest.raises(ConfigError, match="parse error"):
        resolve_settings(write_toml(tmp_path / "bad.toml", "[pipeline\nseed = 1\n"))
    with pytest.raises(ConfigError, match="not found"):
        resolve_settings(str(tmp_path / "absent.toml"))


def test_precedence_cli_file_env_default(tmp_path, monkeypatch):
    assert resolve_settings().seed == 0

    monkeypatch.setenv("PBVC_SEED", "7")
    monkeypatch.setenv("PBVC_PARALLELISM", "3")
    settings = resolve_settings()
    assert (settings.seed, settings.parallelism) == (7, 3)

    path = write_toml(tmp_path / "run.toml", "[pipeline]\nseed = 11\n")
    settings = resolve_settings(path)
    assert (settings.seed, settings.parallelism) == (11, 3)
    assert settings.configs[0].seed == 11

    settings = resolve_settings(path, seed=5, parallelism=2)
    assert (settings.seed, settings.parallelism) == (5, 2)


def test_file_options_reach_every_variant(tmp_path):
    path = write_toml(tmp_path / "run.toml", "\n".join([
        "[pipeline]",
        'variants = ["VANILLA", "SS", "VANILLA"]',
        "calibrate = false",
        "[registration]",
        "pyramid_factors = [2, 1]",
        "[edges]",
        "search_limit_mm = 4",
    ]))
    settings = resolve_settings(path)
    assert [c.variant for c in settings.configs] == [Variant.VANILLA, Variant.SS]
    for cfg in settings.configs:
        assert cfg.registration.pyramid_factors == (2, 1)
        assert cfg.edges.search_limit_mm == 4.0
        assert cfg.calibrate is False
    assert resolve_settings(path, calibrate=True).configs[0].calibrate is True


def test_parallelism_must_be_positive():
    with pytest.raises(ConfigError, match="parallelism"):
        resolve_settings(parallelism=0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
