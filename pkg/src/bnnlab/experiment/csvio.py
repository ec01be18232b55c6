"""CSV output with a header row and deterministic formatting."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def to_csv(records: Iterable[dict], header: Sequence[str] = ()) -> str:
    """Render dict rows; columns are ``header`` followed by any other keys in
    first-seen order. Fields are quoted when needed (commas, quotes, newlines)."""
    records = list(records)
    cols = list(header)
    for r in records:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(cols)
    for r in records:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def emit_csv(records: Iterable[dict], path, header: Sequence[str] = ()) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        f.write(to_csv(records, header))
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
