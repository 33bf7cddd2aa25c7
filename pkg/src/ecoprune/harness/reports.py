"""CSV sinks with a fixed header and stable number formatting."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        # shortest repr round-trips exactly, so equal values give equal text
        return repr(float(value))
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable) -> Path:
    """Write rows (dicts keyed by header, or sequences) as UTF-8, LF-terminated CSV."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                row = [row[h] for h in header]
            writer.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> tuple:
    """Return ``(header, rows)`` with every cell as a string."""
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)
