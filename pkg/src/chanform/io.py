"""Flat-binary grids with a JSON header, plus CSV/JSON helpers.

A grid export ``<stem>`` is written as two files:

* ``<stem>.json`` -- header: ``format_version``, ``dtype`` (always
  little-endian float64), ``shape``, ordered ``channels`` and free-form
  metadata (resolution, origin, ...).
* ``<stem>.bin`` -- the channels concatenated in header order, each in
  C order.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ValidationError

GRID_FORMAT_VERSION = 1


def _paths(stem):
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def write_grid(stem, channels: dict, **meta) -> tuple:
    shapes = {np.shape(a) for a in channels.values()}
    if len(shapes) != 1:
        raise ValidationError("all grid channels must share one shape")
    header_path, bin_path = _paths(stem)
    header = {
        "format_version": GRID_FORMAT_VERSION,
        "dtype": "<f8",
        "shape": list(shapes.pop()),
        "channels": list(channels),
        **meta,
    }
    with open(bin_path, "wb") as fh:
        for a in channels.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    with open(header_path, "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
    return header_path, bin_path


def read_grid(stem) -> tuple:
    """Return ``(header, {channel: array})``."""
    header_path, bin_path = _paths(stem)
    with open(header_path) as fh:
        header = json.load(fh)
    if header.get("format_version") != GRID_FORMAT_VERSION:
        raise ValidationError("unsupported grid format_version")
    shape = tuple(header["shape"])
    raw = np.fromfile(bin_path, dtype=header["dtype"])
    n = int(np.prod(shape))
    if raw.size != n * len(header["channels"]):
        raise ValidationError("grid binary size does not match header")
    arrays = {name: raw[i * n:(i + 1) * n].reshape(shape) for i, name in enumerate(header["channels"])}
    return header, arrays


def write_grid_csv(path, channels: dict) -> None:
    """One row per cell: index columns followed by one column per channel."""
    arrays = [np.asarray(a) for a in channels.values()]
    shape = arrays[0].shape
    index_names = ["iy", "ix"] if len(shape) == 2 else [f"i{k}" for k in range(len(shape))]
    if len(shape) == 3:
        index_names = ["ix", "iy", "iz"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(index_names + list(channels))
        for idx in np.ndindex(*shape):
            w.writerow(list(idx) + [repr(float(a[idx])) for a in arrays])


def write_rows_csv(path, rows: list, columns: list | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in columns})


def dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def array_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
