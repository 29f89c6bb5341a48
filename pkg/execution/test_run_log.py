#!/usr/bin/env python3
"""
Tests for the shared run log.
"""

import re

import pytest

from run_log import banner, get_log_file, log


def test_log_writes_timestamped_lines(tmp_path, monkeypatch, capsys):
    path = tmp_path / "logs" / "run.log"
    monkeypatch.setenv("PBVC_LOG_FILE", str(path))
    monkeypatch.delenv("PBVC_QUIET", raising=False)
    log("registration done")
    line = path.read_text(encoding="utf-8").strip()
    assert re.fullmatch(r"\[\d{4}-\d{2}-\d{2} \d{2}:\d{2}:\d{2}\] registration done", line)
    assert capsys.readouterr().out.strip() == line


def test_quiet_keeps_the_file_sink(tmp_path, monkeypatch, capsys):
    path = tmp_path / "run.log"
    monkeypatch.setenv("PBVC_LOG_FILE", str(path))
    monkeypatch.setenv("PBVC_QUIET", "1")
    banner("BATCH")
    assert capsys.readouterr().out == ""
    assert path.read_text(encoding="utf-8").count("=" * 60) == 2


def test_empty_log_file_disables_sink(monkeypatch):
    monkeypatch.setenv("PBVC_LOG_FILE", "")
    assert get_log_file() is None


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
