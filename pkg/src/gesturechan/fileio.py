"""Atomic file writes and small CSV helpers shared by pipeline outputs."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

from . import __version__ as PIPELINE_VERSION


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` via temp file + rename.

    Readers never observe a partially written file; an interrupted write
    leaves any previous version of the file untouched.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt_float(x) -> str:
    """Shortest round-trip decimal form of a float; deterministic."""
    return repr(float(x))


def version_header() -> str:
    return f"# pipeline_version={PIPELINE_VERSION}\n"


def iter_data_lines(fh):
    """Yield lines that are not comment (leading '#') or blank lines."""
    for line in fh:
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        yield line
