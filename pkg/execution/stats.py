#!/usr/bin/env python3
"""
Evaluation statistics - Layer 3 Execution Script
Progression index, Pearson r with Fisher CIs, Steiger's Z for dependent
correlations, Bonferroni correction, and the scan-order consistency
metrics (residual, MFRR, relative improvement).
"""

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import erfc, ndtri

Z_975 = 1.959964
# |r_12| at or above 1 - R12_TOL: the variant is a linear map of the baseline
R12_TOL = 1e-9


class Measure(str, Enum):
    MMSE = "MMSE"
    MOCA = "MoCA"
    GM_VOLUME = "GM_VOLUME"
    BPF = "BPF"
    MSEADLG = "MSEADLG"
    ADAS13 = "ADAS13"
    CDRSB = "CDRSB"
    FAQ = "FAQ"

    @classmethod
    def parse(cls, value) -> "Measure":
        if isinstance(value, Measure):
            return value
        key = str(value).strip().upper().replace("-", "").replace(" ", "")
        for m in cls:
            if key in (m.name, m.value.upper()):
                return m
        raise ValueError(f"unknown measure {value!r}")


# "Decrease indicates worsening": delta = t0 - t1
DECREASE_WORSENS = {Measure.MMSE, Measure.MOCA, Measure.GM_VOLUME, Measure.BPF, Measure.MSEADLG}
# "Increase indicates worsening": delta = t1 - t0
INCREASE_WORSENS = {Measure.ADAS13, Measure.CDRSB, Measure.FAQ}


@dataclass(frozen=True)
class ClinicalRecord:
    subject_id: str
    measure: Measure
    v_t0: float
    v_t1: float

    def __post_init__(self):
        object.__setattr__(self, "measure", Measure.parse(self.measure))
        if not (math.isfinite(self.v_t0) and math.isfinite(self.v_t1)):
            raise ValueError(f"non-finite clinical values for {self.subject_id}")


@dataclass(frozen=True)
class ProgressionIndex:
    subject_id: str
    measure: Measure
    delta: float


@dataclass
class CorrelationReport:
    """r [CI] per (variant, measure); Steiger comparisons per non-baseline variant; measures skipped for small n."""
    baseline: str
    alpha: float
    correlations: List[dict] = field(default_factory=list)
    comparisons: List[dict] = field(default_factory=list)
    skipped: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConsistencyReport:
    """Per-variant scan-order residuals, MFRR, SD and improvement vs the baseline."""
    baseline: str
    variants: Dict[str, dict] = field(default_factory=dict)
    excluded: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def progression_index(rec: ClinicalRecord) -> ProgressionIndex:
    """Sign-standardised change: delta > 0 always means worsening."""
    if rec.measure in DECREASE_WORSENS:
        delta = rec.v_t0 - rec.v_t1
    elif rec.measure in INCREASE_WORSENS:
        delta = rec.v_t1 - rec.v_t0
    else:
        raise ValueError(f"unknown measure {rec.measure!r}")
    return ProgressionIndex(rec.subject_id, rec.measure, float(delta))


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if len(x) < 3:
        raise ValueError(f"pearson needs n >= 3, got {len(x)}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson undefined for a constant series")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def normal_quantile(alpha: float) -> float:
    """z_{1 - alpha/2}; the 95% value is the fixed constant 1.959964."""
    if alpha == 0.05:
        return Z_975
    return float(ndtri(1.0 - alpha / 2.0))


def fisher_ci(r: float, n: int, alpha: float = 0.05) -> Tuple[float, float]:
    """Confidence interval for r via Fisher's r-to-z transformation."""
    if not -1.0 < r < 1.0:
        raise ValueError(f"fisher_ci needs |r| < 1, got {r}")
    if n < 4:
        raise ValueError(f"fisher_ci needs n >= 4, got {n}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    z = math.atanh(r)
    half = normal_quantile(alpha) / math.sqrt(n - 3)
    return math.tanh(z - half), math.tanh(z + half)


def two_sided_p(z: float) -> float:
    """Two-sided standard-normal tail probability."""
    return float(min(1.0, erfc(abs(z) / math.sqrt(2.0))))


def steiger_z(r_1: float, r_2: float, r_12: float, n: int) -> Tuple[float, float]:
    """
    Steiger's Z for two dependent correlations sharing one variable.

    Args:
        r_1: corr(delta, PBVC of the variant)
        r_2: corr(delta, PBVC of the baseline)
        r_12: corr(PBVC of the variant, PBVC of the baseline)
        n: subjects

    Returns:
        (Z, two-sided p)
    """
    for name, r in (("r_1", r_1), ("r_2", r_2), ("r_12", r_12)):
        if not -1.0 < r < 1.0:
            raise ValueError(f"steiger_z needs |{name}| < 1, got {r}")
    if n < 10:
        raise ValueError(f"steiger_z needs n >= 10, got {n}")

    r_bar = (r_1 + r_2) / 2.0
    r_bar_sq = r_bar * r_bar
    c = (r_12 * (1.0 - 2.0 * r_bar_sq) - 0.5 * r_bar_sq * (1.0 - 2.0 * r_bar_sq - r_12 * r_12)) / (1.0 - r_bar_sq) ** 2
    if c >= 1.0:
        raise ValueError(f"steiger_z degenerate: covariance term c = {c} >= 1")

    z = (math.atanh(r_1) - math.atanh(r_2)) * math.sqrt(n - 3) / math.sqrt(2.0 - 2.0 * c)
    return z, two_sided_p(z)


def bonferroni(p: float, m: int) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    return min(1.0, m * p)


def scan_order_residual(pbvc_ab: float, pbvc_ba: float) -> float:
    """|PBVC(A,B) + PBVC(B,A)|; zero for a perfectly antisymmetric pipeline."""
    return abs(pbvc_ab + pbvc_ba)


def mfrr(residuals: Sequence[float]) -> Tuple[float, float]:
    """Mean forward-reverse residual and its sample SD (0 for a single residual)."""
    values = np.asarray(residuals, dtype=np.float64)
    if values.size == 0:
        raise ValueError("mfrr of an empty residual list")
    mean = float(values.mean())
    sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return mean, sd


def relative_improvement(mfrr_baseline: float, mfrr_pipe: float) -> float:
    """100 * (baseline - pipeline) / baseline."""
    if mfrr_baseline <= 0:
        raise ValueError(f"relative_improvement needs a positive baseline MFRR, got {mfrr_baseline}")
    return 100.0 * (mfrr_baseline - mfrr_pipe) / mfrr_baseline


def summarize(values: Sequence[float]) -> Tuple[float, float, int]:
    """(mean, sample SD, n) with SD 0 when n < 2."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan"), 0
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd, int(arr.size)


def correlation_row(delta: Sequence[float], pbvc: Sequence[float], alpha: float = 0.05) -> Dict:
    """r, CI bounds and n for one (variant, measure) cell."""
    r = pearson(delta, pbvc)
    n = len(delta)
    lo, hi = fisher_ci(r, n, alpha) if abs(r) < 1 and n >= 4 else (r, r)
    return {"r": r, "ci_lo": lo, "ci_hi": hi, "n": n}


def compare_to_baseline(delta, pbvc_variant, pbvc_baseline, m: int, alpha: float = 0.01) -> Dict:
    """
    Steiger comparison of one variant against the baseline with Bonferroni correction.

    A variant column that is an exact linear map of the baseline column
    (|r_12| = 1, e.g. a constant calibration factor) has no defined Steiger
    statistic; it is recorded as Z = 0, p = 1 with a `degenerate` reason.
    """
    r_1 = pearson(delta, pbvc_variant)
    r_2 = pearson(delta, pbvc_baseline)
    n = len(delta)
    degenerate = None
    if np.array_equal(np.asarray(pbvc_variant, dtype=float), np.asarray(pbvc_baseline, dtype=float)):
        degenerate = "identical to the baseline"
    else:
        r_12 = pearson(pbvc_variant, pbvc_baseline)
        if abs(r_12) >= 1.0 - R12_TOL:
            degenerate = "exact linear map of the baseline"
    if degenerate:
        z, p = 0.0, 1.0
    else:
        z, p = steiger_z(r_1, r_2, r_12, n)
    p_adj = bonferroni(p, m)
    return {
        "r_variant": r_1,
        "r_baseline": r_2,
        "steiger_z": z,
        "p_raw": p,
        "p_bonferroni": p_adj,
        "m": m,
        "significant": bool(p_adj < alpha),
        "n": n,
        "degenerate": degenerate,
    }
