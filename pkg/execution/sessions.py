#!/usr/bin/env python3
"""
Session pairing - Layer 3 Execution Script
Builds a subject manifest from a longitudinal session listing by keeping the
first and last available scan of every subject.

Input CSV: subject_id,session_date,path[,mask_path,labelmap_path]
Subjects with a single session are excluded and reported.

Usage:
    python execution/sessions.py sessions.csv --out tmp/manifest.csv
"""

import argparse
from pathlib import Path
from typing import List, Tuple

import pandas as pd

from pipeline_config import ScanPair
from run_log import log
from run_pipeline import write_manifest

SESSION_COLUMNS = ["subject_id", "session_date", "path"]


def pair_first_last(sessions_csv) -> Tuple[List[ScanPair], List[dict]]:
    """
    Returns:
        (pairs sorted by subject_id, excluded subjects with reasons)
    """
    sessions_csv = Path(sessions_csv)
    df = pd.read_csv(sessions_csv, dtype=str, keep_default_na=False)
    missing = [c for c in SESSION_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"session listing is missing column(s) {missing}")
    try:
        df["_date"] = pd.to_datetime(df["session_date"])
    except (ValueError, TypeError) as e:
        raise ValueError(f"unparseable session_date in {sessions_csv}: {e}") from e

    base = sessions_csv.parent

    def resolve(value: str):
        value = (value or "").strip()
        if not value:
            return None
        p = Path(value)
        return str(p if p.is_absolute() else base / p)

    pairs, excluded = [], []
    for subject_id, group in df.groupby("subject_id", sort=True):
        group = group.sort_values(["_date", "path"], kind="mergesort")
        if len(group) < 2:
            excluded.append({"subject_id": subject_id, "reason": "single session"})
            continue
        first, last = group.iloc[0], group.iloc[-1]
        if first["_date"] == last["_date"]:
            excluded.append({"subject_id": subject_id, "reason": "all sessions share one date"})
            continue
        pairs.append(ScanPair(
            subject_id=subject_id,
            t0=resolve(first["path"]),
            t1=resolve(last["path"]),
            mask_t0=resolve(first.get("mask_path", "")),
            mask_t1=resolve(last.get("mask_path", "")),
            labelmap_t0=resolve(first.get("labelmap_path", "")),
            labelmap_t1=resolve(last.get("labelmap_path", "")),
        ))
    log(f"Paired {len(pairs)} subjects, excluded {len(excluded)}")
    return pairs, excluded


def main():
    """CLI entry point."""
    parser = argparse.ArgumentParser(description="Pair first and last sessions per subject")
    parser.add_argument("sessions", help="Session listing CSV")
    parser.add_argument("--out", default="tmp/manifest.csv", help="Manifest CSV to write")
    args = parser.parse_args()

    pairs, excluded = pair_first_last(args.sessions)
    write_manifest(pairs, args.out)
    print(f"\n✅ {len(pairs)} pairs written to {args.out}")
    for e in excluded:
        print(f"  ❌ {e['subject_id']}: {e['reason']}")


if __name__ == "__main__":
    main()
