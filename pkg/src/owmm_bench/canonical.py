"""Canonical JSON dialect shared by every artifact the kit writes.

Keys are sorted, separators are compact, text is UTF-8 and every float is
rounded to 9 significant digits before encoding.  Two runs that produce the
same values therefore produce the same bytes.
"""

import dataclasses
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterable

import numpy as np

FLOAT_DIGITS = 9


def round_float(x: float) -> float:
    if not math.isfinite(x):
        raise ValueError(f"non-finite float {x!r} cannot be serialized canonically")
    r = float(f"{x:.{FLOAT_DIGITS}g}")
    return 0.0 if r == 0.0 else r


def canonicalize(obj: Any) -> Any:
    """Convert ``obj`` into plain JSON types with rounded floats."""
    if obj is None or isinstance(obj, (bool, str)):
        return obj
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return round_float(float(obj))
    if isinstance(obj, dict):
        return {str(k): canonicalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [canonicalize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return canonicalize(obj.tolist())
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return canonicalize(dataclasses.asdict(obj))
    raise TypeError(f"cannot canonicalize {type(obj).__name__}")


def dumps(obj: Any) -> str:
    return json.dumps(
        canonicalize(obj),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )


def digest(obj: Any) -> str:
    return hashlib.sha256(dumps(obj).encode("utf-8")).hexdigest()


def write_json(path, obj: Any) -> None:
    Path(path).write_text(dumps(obj) + "\n", encoding="utf-8")


def read_json(path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_jsonl(path, rows: Iterable[Any]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps(row))
            fh.write("\n")
            n += 1
    return n


def read_jsonl(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
