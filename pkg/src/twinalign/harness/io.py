"""Track and log CSV files.

Track CSV: header ``x,y`` or ``x,y,v_target``, one waypoint per row, UTF-8,
LF line endings.  Floats are written with ``repr`` so reading a written
track gives back the identical path.

Log CSV: one row per runtime step with the :class:`LogRecord` columns.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path as FsPath

import numpy as np

from ..geometry import Path, PathError
from ..runtime import AlignmentEvent, LogRecord


class TrackFormatError(ValueError):
    pass


def write_track(path: Path, filename) -> None:
    cols = ["x", "y"] + (["v_target"] if path.v_target is not None else [])
    rows = [",".join(cols)]
    for i, (x, y) in enumerate(path.waypoints):
        vals = [repr(float(x)), repr(float(y))]
        if path.v_target is not None:
            vals.append(repr(float(path.v_target[i])))
        rows.append(",".join(vals))
    FsPath(filename).write_text("\n".join(rows) + "\n", encoding="utf-8", newline="\n")


def load_track(filename) -> Path:
    text = FsPath(filename).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise TrackFormatError(f"{filename}: empty track file") from None
    if header not in (["x", "y"], ["x", "y", "v_target"]):
        raise TrackFormatError(f"{filename}: header must be 'x,y' or 'x,y,v_target', got {','.join(header)!r}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise TrackFormatError(f"{filename}:{lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            vals = [float(v) for v in row]
        except ValueError as exc:
            raise TrackFormatError(f"{filename}:{lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise TrackFormatError(f"{filename}:{lineno}: non-finite value")
        rows.append(vals)
    arr = np.array(rows, dtype=float).reshape(-1, len(header))
    try:
        return Path(arr[:, :2], arr[:, 2] if len(header) == 3 else None)
    except PathError as exc:
        raise TrackFormatError(f"{filename}: {exc}") from None


def format_log(records) -> str:
    out = [",".join(LogRecord.CSV_COLUMNS)]
    for r in records:
        vals = []
        for col in LogRecord.CSV_COLUMNS:
            v = getattr(r, col)
            vals.append(str(v) if isinstance(v, AlignmentEvent) else repr(float(v)))
        out.append(",".join(vals))
    return "\n".join(out) + "\n"


def write_log(records, filename) -> None:
    FsPath(filename).write_text(format_log(records), encoding="utf-8", newline="\n")


def read_log(filename) -> list[LogRecord]:
    with open(filename, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LogRecord.CSV_COLUMNS:
            raise ValueError(f"{filename}: unexpected log columns {reader.fieldnames}")
        records = []
        for row in reader:
            kw = {k: float(v) for k, v in row.items() if k != "event"}
            kw["event"] = AlignmentEvent(row["event"])
            records.append(LogRecord(**kw))
    return records
