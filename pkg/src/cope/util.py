"""Small helpers shared across modules: hashing, canonical JSON, atomic writes, quantiles."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Sequence


def canonical_json(obj: Any) -> str:
    """JSON with sorted keys and no insignificant whitespace, for hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dump_json(obj: Any) -> str:
    """Pretty JSON with stable key order, used for every persisted report."""
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file in the same directory and ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile of an ascending sequence.

    The rank is ``ceil(pct/100 * n)``, clamped to ``[1, n]``; no interpolation.
    """
    n = len(sorted_values)
    if n == 0:
        raise ValueError("nearest_rank of an empty sequence")
    if not 0 <= pct <= 100:
        raise ValueError(f"percentile out of range: {pct}")
    # round() guards float noise such as 0.2 * 35 = 7.000000000000001
    rank = math.ceil(round(pct / 100.0 * n, 9))
    return sorted_values[min(max(rank, 1), n) - 1]
