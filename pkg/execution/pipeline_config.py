#!/usr/bin/env python3
"""
Pipeline configuration - Layer 3 Execution Script
Variant definitions, option groups, TOML loading, environment overrides and
the config hash stamped on every report row.

Precedence: CLI flag > config file > environment > built-in default.

Environment:
    PBVC_OUT_DIR        output root (default tmp/)
    PBVC_SEED           run seed
    PBVC_PARALLELISM    worker count for batch runs

Usage:
    python execution/pipeline_config.py --config data/pipeline_config.example.toml
"""

import argparse
import hashlib
import json
import os
import time
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

from dotenv import load_dotenv

load_dotenv()

BASE_DIR = Path(__file__).parent.parent
TMP_DIR = BASE_DIR / "tmp"
DEFAULT_CODEBOOK = BASE_DIR / "data" / "synthseg_codebook.csv"


class ConfigError(ValueError):
    """Invalid configuration, raised before any computation starts."""


class PipelineError(Exception):
    """A pipeline stage failed; carries the stage tag."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message


@contextmanager
def timed_stage(stage: str, timings: Optional[dict] = None):
    """Record wall-clock seconds under stage and tag any failure with it."""
    start = time.perf_counter()
    try:
        yield
    except PipelineError:
        raise
    except Exception as e:
        raise PipelineError(stage, str(e)) from e
    finally:
        if timings is not None:
            timings[stage] = timings.get(stage, 0.0) + (time.perf_counter() - start)


class Variant(str, Enum):
    VANILLA = "VANILLA-ANALOG"
    SS = "SS-ANALOG"
    SEG = "SEG-ANALOG"
    SS_SEG = "SS-SEG-ANALOG"

    @property
    def extractor(self) -> str:
        return "external" if self in (Variant.SS, Variant.SS_SEG) else "threshold"

    @property
    def segmenter(self) -> str:
        return "external" if self in (Variant.SEG, Variant.SS_SEG) else "kmeans3"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, Variant):
            return value
        text = str(value).strip().upper()
        for v in cls:
            if text in (v.value, v.name, v.value.replace("-ANALOG", "")):
                return v
        raise ConfigError(f"unknown variant {value!r} (choose from {[v.value for v in cls]})")

    @classmethod
    def from_stages(cls, extractor: str, segmenter: str) -> "Variant":
        for v in cls:
            if v.extractor == extractor and v.segmenter == segmenter:
                return v
        raise ConfigError(f"no variant uses extractor={extractor!r} with segmenter={segmenter!r}")


@dataclass(frozen=True)
class RegistrationOptions:
    pyramid_factors: Tuple[int, ...] = (4, 2, 1)
    brain_weight: float = 1.0
    skull_weight: float = 1.0
    # translation mm, rotation rad, log-scale, shear
    initial_steps: Tuple[float, float, float, float] = (2.0, 0.05, 0.02, 0.02)
    tolerances: Tuple[float, float, float, float] = (0.01, 1e-4, 1e-4, 1e-4)
    max_sweeps: int = 50
    bracket_stop_frac: float = 0.1
    symmetric: bool = True

    def validate(self):
        if not self.pyramid_factors or any(int(f) < 1 for f in self.pyramid_factors):
            raise ConfigError(f"pyramid_factors must be positive integers, got {self.pyramid_factors}")
        if self.brain_weight < 0 or self.skull_weight < 0 or self.brain_weight + self.skull_weight <= 0:
            raise ConfigError("registration weights must be >= 0 and not both zero")
        if len(self.initial_steps) != 4 or len(self.tolerances) != 4:
            raise ConfigError("initial_steps and tolerances need four entries (translation, rotation, scale, shear)")
        if any(s <= 0 for s in self.initial_steps) or any(t <= 0 for t in self.tolerances):
            raise ConfigError("registration steps and tolerances must be > 0")
        if self.max_sweeps < 1:
            raise ConfigError("max_sweeps must be >= 1")
        if not 0 < self.bracket_stop_frac < 1:
            raise ConfigError("bracket_stop_frac must lie in (0, 1)")


@dataclass(frozen=True)
class EdgeOptions:
    profile_half_length_mm: float = 6.0
    profile_step_mm: float = 0.5
    search_limit_mm: float = 3.0
    shift_step_mm: float = 0.25
    quality_floor: float = 0.5
    min_accept_fraction: float = 0.2
    normal_sigma_mm: float = 1.0
    area_element: str = "isotropic"

    def validate(self):
        if self.profile_half_length_mm <= 0 or self.profile_step_mm <= 0:
            raise ConfigError("profile length and step must be > 0")
        if self.search_limit_mm <= 0 or self.shift_step_mm <= 0:
            raise ConfigError("search limit and shift step must be > 0")
        if not -1.0 <= self.quality_floor <= 1.0:
            raise ConfigError("quality_floor must lie in [-1, 1]")
        if not 0.0 <= self.min_accept_fraction <= 1.0:
            raise ConfigError("min_accept_fraction must lie in [0, 1]")
        if self.area_element not in ("isotropic", "normal"):
            raise ConfigError(f"area_element must be 'isotropic' or 'normal', got {self.area_element!r}")


@dataclass(frozen=True)
class ExtractOptions:
    frac: float = 0.35
    skull_sigma_mm: float = 1.0

    def validate(self):
        if not 0.0 < self.frac < 1.0:
            raise ConfigError(f"extract frac must lie in (0, 1), got {self.frac}")
        if self.skull_sigma_mm < 0:
            raise ConfigError("skull_sigma_mm must be >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    variant: Variant = Variant.VANILLA
    registration: RegistrationOptions = field(default_factory=RegistrationOptions)
    edges: EdgeOptions = field(default_factory=EdgeOptions)
    extract: ExtractOptions = field(default_factory=ExtractOptions)
    calibrate: bool = True
    calibration_scale: float = 0.995
    codebook: str = str(DEFAULT_CODEBOOK)
    seed: int = 0

    @property
    def extractor(self) -> str:
        return self.variant.extractor

    @property
    def segmenter(self) -> str:
        return self.variant.segmenter

    def validate(self) -> "PipelineConfig":
        if not isinstance(self.variant, Variant):
            raise ConfigError(f"variant must be a Variant, got {self.variant!r}")
        self.registration.validate()
        self.edges.validate()
        self.extract.validate()
        if not 0.98 <= self.calibration_scale < 1.0:
            raise ConfigError(f"calibration_scale must lie in [0.98, 1), got {self.calibration_scale}")
        if self.segmenter == "external" and not Path(self.codebook).exists():
            raise ConfigError(f"codebook not found: {self.codebook}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    def config_hash(self) -> str:
        """SHA-256 over canonical JSON of the resolved config."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=list)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ScanPair:
    """One subject: two scans plus optional external stage outputs per time point."""
    subject_id: str
    t0: str
    t1: str
    mask_t0: Optional[str] = None
    mask_t1: Optional[str] = None
    labelmap_t0: Optional[str] = None
    labelmap_t1: Optional[str] = None

    def swapped(self) -> "ScanPair":
        return ScanPair(self.subject_id, self.t1, self.t0, self.mask_t1, self.mask_t0,
                        self.labelmap_t1, self.labelmap_t0)


def validate_inputs(pair: ScanPair, cfg: PipelineConfig):
    """External stages need their files; checked before any compute."""
    required = [("t0", pair.t0), ("t1", pair.t1)]
    if cfg.extractor == "external":
        required += [("mask_t0", pair.mask_t0), ("mask_t1", pair.mask_t1)]
    if cfg.segmenter == "external":
        required += [("labelmap_t0", pair.labelmap_t0), ("labelmap_t1", pair.labelmap_t1)]
    for name, path in required:
        if not path:
            raise ConfigError(f"{cfg.variant.value} needs {name} for subject {pair.subject_id}")
        if not Path(path).exists():
            raise ConfigError(f"missing file for {name} of subject {pair.subject_id}: {path}")


# ========== LOADING ==========

SECTIONS = {
    "registration": RegistrationOptions,
    "edges": EdgeOptions,
    "extract": ExtractOptions,
}
PIPELINE_KEYS = {"variant", "variants", "calibrate", "calibration_scale", "codebook", "seed",
                 "parallelism", "out_dir", "baseline"}


def _coerce(cls, values: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {unknown}")
    out = {}
    for key, value in values.items():
        default = getattr(cls(), key)
        out[key] = tuple(value) if isinstance(default, tuple) else type(default)(value)
    return cls(**out)


def read_config_file(path) -> dict:
    """Parse a TOML config into plain dicts, rejecting unknown sections and keys."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config parse error in {path}: {e}") from e

    unknown = sorted(set(raw) - set(SECTIONS) - {"pipeline"})
    if unknown:
        raise ConfigError(f"unknown section(s) in {path.name}: {unknown}")
    pipeline = raw.get("pipeline", {})
    bad = sorted(set(pipeline) - PIPELINE_KEYS)
    if bad:
        raise ConfigError(f"unknown key(s) in [pipeline]: {bad}")
    return raw


def resolve_data_path(value) -> str:
    """Relative paths that do not exist from the cwd are taken from the repo root."""
    p = Path(value)
    if p.is_absolute() or p.exists():
        return str(p)
    return str(BASE_DIR / p)


def env_defaults() -> dict:
    """Settings taken from the environment (.env honoured)."""
    out = {}
    if os.getenv("PBVC_SEED"):
        out["seed"] = int(os.environ["PBVC_SEED"])
    if os.getenv("PBVC_PARALLELISM"):
        out["parallelism"] = int(os.environ["PBVC_PARALLELISM"])
    if os.getenv("PBVC_OUT_DIR"):
        out["out_dir"] = os.environ["PBVC_OUT_DIR"]
    return out


@dataclass
class RunSettings:
    """Everything a CLI run needs: one config per variant plus run-level knobs."""
    configs: List[PipelineConfig]
    seed: int = 0
    parallelism: int = 1
    out_dir: Path = TMP_DIR
    baseline: Variant = Variant.VANILLA


def resolve_settings(config_path: Optional[str] = None, variants: Optional[List[str]] = None,
                     seed: Optional[int] = None, parallelism: Optional[int] = None,
                     out_dir: Optional[str] = None, calibrate: Optional[bool] = None,
                     baseline: Optional[str] = None) -> RunSettings:
    """
    Merge CLI values, the config file, the environment and defaults.

    Returns:
        RunSettings with validated configs
    """
    merged = {"seed": 0, "parallelism": 1, "out_dir": str(TMP_DIR)}
    merged.update(env_defaults())

    raw = read_config_file(config_path) if config_path else {}
    pipeline = dict(raw.get("pipeline", {}))
    merged.update({k: pipeline[k] for k in ("seed", "parallelism", "out_dir") if k in pipeline})

    cli = {"seed": seed, "parallelism": parallelism, "out_dir": out_dir}
    merged.update({k: v for k, v in cli.items() if v is not None})

    if variants is None:
        if "variants" in pipeline:
            variants = list(pipeline["variants"])
        elif "variant" in pipeline:
            variants = [pipeline["variant"]]
        else:
            variants = [Variant.VANILLA.value]

    options = {name: _coerce(cls, raw.get(name, {}), name) for name, cls in SECTIONS.items()}
    base = PipelineConfig(
        registration=options["registration"],
        edges=options["edges"],
        extract=options["extract"],
        calibrate=bool(pipeline.get("calibrate", True)) if calibrate is None else calibrate,
        calibration_scale=float(pipeline.get("calibration_scale", 0.995)),
        codebook=resolve_data_path(pipeline.get("codebook", DEFAULT_CODEBOOK)),
        seed=int(merged["seed"]),
    )

    configs = []
    seen = set()
    for name in variants:
        variant = Variant.parse(name)
        if variant in seen:
            continue
        seen.add(variant)
        configs.append(replace(base, variant=variant).validate())

    parallelism_value = int(merged["parallelism"])
    if parallelism_value < 1:
        raise ConfigError(f"parallelism must be >= 1, got {parallelism_value}")
    return RunSettings(
        configs=configs,
        seed=int(merged["seed"]),
        parallelism=parallelism_value,
        out_dir=Path(merged["out_dir"]),
        baseline=Variant.parse(baseline or pipeline.get("baseline", Variant.VANILLA.value)),
    )


def main():
    """CLI entry point: print the resolved configuration and its hash."""
    parser = argparse.ArgumentParser(description="Show the resolved pipeline configuration")
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--variant", action="append", help="Variant (repeatable)")
    args = parser.parse_args()

    settings = resolve_settings(args.config, args.variant)
    for cfg in settings.configs:
        print(f"\n  {cfg.variant.value}  hash={cfg.config_hash()[:12]}")
        print(json.dumps(cfg.to_dict(), indent=2, ensure_ascii=False))
    print(f"\n  seed={settings.seed} parallelism={settings.parallelism} out={settings.out_dir}")


if __name__ == "__main__":
    main()
