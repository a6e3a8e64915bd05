"""Serialization helpers shared by the data, trainer and CLI layers."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import zipfile

import numpy as np


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Stable 12-hex-digit digest of a config-like object."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:12]


def fmt(value) -> str:
    """Deterministic CSV cell: shortest round-trip repr; NaN becomes empty."""
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return "" if np.isnan(v) else repr(v)
    return str(value)


def save_npz(path, arrays: dict) -> None:
    """np.savez with fixed zip timestamps so identical arrays give identical
    bytes; np.load reads the result as usual."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
