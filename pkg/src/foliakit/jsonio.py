"""Canonical JSON artifact helpers.

Artifacts are deterministic: sorted keys, repr-stable floats, no timestamps.
Every artifact carries a schema_version so readers can reject files they do
not understand. Wall-clock data lives only in run manifests.
"""

from __future__ import annotations

import json
from pathlib import Path

SCHEMA_VERSION = 1


def dump_json(obj: dict, path: str | Path) -> None:
    Path(path).write_text(canonical(obj))


def canonical(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def load_json(path: str | Path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def require_schema(doc: dict, kind: str) -> None:
    v = doc.get("schema_version")
    if v != SCHEMA_VERSION:
        raise ValueError(f"{kind}: unsupported schema_version {v!r} (expected {SCHEMA_VERSION})")
    if doc.get("kind") != kind:
        raise ValueError(f"expected artifact kind {kind!r}, found {doc.get('kind')!r}")


def complex_pairs(values) -> list:
    """Complex array -> [[re, im], ...] with float() coercion."""
    import numpy as np

    arr = np.asarray(values, dtype=complex).ravel()
    return [[float(v.real), float(v.imag)] for v in arr]


def from_complex_pairs(pairs) -> "np.ndarray":
    import numpy as np

    return np.array([complex(re, im) for re, im in pairs], dtype=complex)
