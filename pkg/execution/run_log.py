#!/usr/bin/env python3
"""
Shared run log for the PBVC toolkit.

Every stage-level script logs through log() so that console output and the
run log file carry the same timestamped lines.

Environment:
    PBVC_LOG_FILE   log file path (default tmp/pbvc.log, empty disables)
    PBVC_QUIET      "1" silences stdout; the file still records
"""

import os
from datetime import datetime
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

# Paths
BASE_DIR = Path(__file__).parent.parent
TMP_DIR = BASE_DIR / "tmp"
DEFAULT_LOG_FILE = TMP_DIR / "pbvc.log"


def ensure_dirs():
    """Create output directories."""
    TMP_DIR.mkdir(parents=True, exist_ok=True)


def get_log_file():
    """Resolve the log file from the environment (None when disabled)."""
    value = os.getenv("PBVC_LOG_FILE")
    if value is None:
        return DEFAULT_LOG_FILE
    if not value.strip():
        return None
    return Path(value)


def log(message: str):
    """Log message with timestamp."""
    timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    log_line = f"[{timestamp}] {message}"

    if os.getenv("PBVC_QUIET", "0") != "1":
        print(log_line)

    log_file = get_log_file()
    if log_file is None:
        return
    try:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        with open(log_file, "a", encoding="utf-8") as f:
            f.write(log_line + "\n")
    except OSError:
        # best effort; stdout already has the line
        pass


def banner(title: str, width: int = 60):
    """Print a section banner the way the batch runners do."""
    log("=" * width)
    log(f"  {title}")
    log("=" * width)
