"""Shared on-disk container: one JSON header line, then raw float64 arrays.

Every persistent artifact (model checkpoints, episode recordings) uses the
same layout:

    <header JSON, single line, utf-8>\\n
    for each entry in header["arrays"], in order:
        u64 little-endian element count
        count * 8 bytes of little-endian float64 data (row-major)

Round-trips are bit-exact: arrays are stored as raw float64 bytes and the
header records their shapes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1
_COUNT = struct.Struct("<Q")


def write_container(path, header: dict, arrays: dict) -> None:
    """Write `header` plus named float64 `arrays` to `path`.

    `header` must be JSON-serializable and must not already contain an
    "arrays" key; the array manifest (names and shapes) is appended to it.
    """
    if "arrays" in header:
        raise DataError("header must not predefine 'arrays'")
    mats = {name: np.ascontiguousarray(a, dtype=np.float64) for name, a in arrays.items()}
    head = dict(header)
    head["format_version"] = FORMAT_VERSION
    head["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in mats.items()]
    line = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if b"\n" in line:
        raise DataError("header must serialize to a single line")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(line)
        fh.write(b"\n")
        for a in mats.values():
            fh.write(_COUNT.pack(a.size))
            fh.write(a.tobytes(order="C"))


def read_container(path):
    """Read a container file; returns (header, {name: float64 array})."""
    path = Path(path)
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            head = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: invalid container header: {exc}") from exc
        if head.get("format_version") != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported format version {head.get('format_version')!r}")
        arrays = {}
        for entry in head["arrays"]:
            raw = fh.read(_COUNT.size)
            if len(raw) != _COUNT.size:
                raise DataError(f"{path}: truncated before array {entry['name']!r}")
            (count,) = _COUNT.unpack(raw)
            shape = tuple(entry["shape"])
            expect = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if count != expect:
                raise DataError(
                    f"{path}: array {entry['name']!r} count {count} != shape {shape}"
                )
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise DataError(f"{path}: truncated inside array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return head, arrays
