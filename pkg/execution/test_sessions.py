#!/usr/bin/env python3
"""
Tests for first/last session pairing.
"""

import pytest

from pipeline_config import ScanPair
from run_pipeline import load_manifest, write_manifest
from sessions import pair_first_last


def write_sessions(tmp_path, lines):
    path = tmp_path / "sessions.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_first_and_last_sessions_are_paired(tmp_path):
    path = write_sessions(tmp_path, [
        "subject_id,session_date,path",
        "002,2021-03-01,/data/002_b.nii.gz",
        "001,2020-06-15,/data/001_b.nii.gz",
        "001,2019-01-10,/data/001_a.nii.gz",
        "001,2022-11-30,/data/001_c.nii.gz",
        "002,2019-05-20,/data/002_a.nii.gz",
    ])
    pairs, excluded = pair_first_last(path)
    assert pairs == [
        ScanPair("001", "/data/001_a.nii.gz", "/data/001_c.nii.gz"),
        ScanPair("002", "/data/002_a.nii.gz", "/data/002_b.nii.gz"),
    ]
    assert excluded == []


def test_single_and_same_day_subjects_are_excluded(tmp_path):
    path = write_sessions(tmp_path, [
        "subject_id,session_date,path",
        "010,2020-01-01,/data/010.nii.gz",
        "011,2020-01-01,/data/011_a.nii.gz",
        "011,2020-01-01,/data/011_b.nii.gz",
        "012,2020-01-01,/data/012_a.nii.gz",
        "012,2021-01-01,/data/012_b.nii.gz",
    ])
    pairs, excluded = pair_first_last(path)
    assert [p.subject_id for p in pairs] == ["012"]
    assert excluded == [
        {"subject_id": "010", "reason": "single session"},
        {"subject_id": "011", "reason": "all sessions share one date"},
    ]


def test_relative_paths_and_external_outputs(tmp_path):
    path = write_sessions(tmp_path, [
        "subject_id,session_date,path,mask_path,labelmap_path",
        "s1,2020-01-01,scans/a.nii.gz,masks/a.nii.gz,",
        "s1,2021-01-01,scans/b.nii.gz,masks/b.nii.gz,labels/b.nii.gz",
    ])
    pairs, _ = pair_first_last(path)
    pair = pairs[0]
    assert pair.t0 == str(tmp_path / "scans/a.nii.gz")
    assert pair.mask_t1 == str(tmp_path / "masks/b.nii.gz")
    assert pair.labelmap_t0 is None
    assert pair.labelmap_t1 == str(tmp_path / "labels/b.nii.gz")

    write_manifest(pairs, tmp_path / "manifest.csv")
    assert load_manifest(tmp_path / "manifest.csv") == pairs


def test_bad_session_listing(tmp_path):
    with pytest.raises(ValueError, match="missing column"):
        pair_first_last(write_sessions(tmp_path, ["subject_id,path", "s1,a.nii.gz"]))
    with pytest.raises(ValueError, match="unparseable session_date"):
        pair_first_last(write_sessions(tmp_path, ["subject_id,session_date,path", "s1,someday,a.nii.gz"]))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
