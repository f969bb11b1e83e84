"""Output formats: line-delimited JSON records, aligned text tables, CSV and manifests.

Floats are written with 17 significant digits so every value round-trips
exactly, and keys keep their insertion order, so identical runs produce
identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
from typing import Iterable, Sequence

import numpy as np


def _number(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        return "null"
    text = format(x, ".17g")
    if "e" not in text and "." not in text and "inf" not in text:
        text += ".0"
    return text


def to_json(obj) -> str:
    """Compact deterministic JSON with ``.17g`` floats; NaN and infinities become null."""
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _number(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {to_json(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(to_json(v) for v in obj) + "]"
    return json.dumps(str(obj))


def jsonl(records: Iterable[dict]) -> str:
    return "".join(to_json(r) + "\n" for r in records)


def atomic_write(path: str | os.PathLike, text: str) -> None:
    """Write via a temporary sibling file and rename it into place."""
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _cell(v, digits: int) -> str:
    if v is None:
        return "-"
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if not math.isfinite(v) else f"{float(v):.{digits}f}"
    return str(v)


def text_table(rows: Sequence[dict], columns: Sequence[str], digits: int = 4) -> str:
    """Left-aligned first column, right-aligned numbers."""
    cells = [[_cell(r.get(c), digits) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]

    def line(values):
        parts = [values[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(values[1:], widths[1:])]
        return "  ".join(parts).rstrip()

    out = [line(list(columns)), line(["-" * w for w in widths])]
    out.extend(line(row) for row in cells)
    return "\n".join(out) + "\n"


def csv_text(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_number(r[c]) if isinstance(r[c], (float, np.floating)) else r[c] for c in columns])
    return buf.getvalue()


def versions() -> dict:
    import numba
    import scipy

    from . import __version__

    return {
        "ssate": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }
