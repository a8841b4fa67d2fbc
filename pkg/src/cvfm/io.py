"""On-disk formats.

Binary blobs (checkpoints, datasets, trajectories) share one layout::

    CVFM-BLOB <version>\\n
    <one-line JSON header>\\n
    <float64 little-endian payload, tensors concatenated in header order>

The header carries ``tensors: [{"name", "shape"}, ...]`` plus free-form
metadata. Everything else the package writes is CSV or JSON text.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import FormatError

MAGIC = "CVFM-BLOB"
BLOB_VERSION = 1


def config_hash(config) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-" + path.name)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def encode_blob(header: Mapping, arrays: Mapping[str, np.ndarray]) -> bytes:
    header = dict(header)
    header["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    head = f"{MAGIC} {BLOB_VERSION}\n" + json.dumps(header, sort_keys=True) + "\n"
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    return head.encode() + payload


def write_blob(path, header: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_blob(header, arrays))


def decode_blob(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    first = data.find(b"\n")
    second = data.find(b"\n", first + 1)
    if first < 0 or second < 0:
        raise FormatError("truncated blob header")
    try:
        magic, version = data[:first].decode().split(" ")
        version = int(version)
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError("malformed blob magic line") from exc
    if magic != MAGIC:
        raise FormatError(f"not a {MAGIC} file")
    if version != BLOB_VERSION:
        raise FormatError(f"unsupported blob version {version} (this build reads version {BLOB_VERSION})")
    try:
        header = json.loads(data[first + 1: second].decode())
        specs = header["tensors"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupted blob header (version {version})") from exc
    arrays, offset = {}, second + 1
    for spec in specs:
        shape = tuple(int(s) for s in spec["shape"])
        n = int(np.prod(shape)) * 8
        if offset + n > len(data):
            raise FormatError(f"payload too short for tensor {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(data[offset: offset + n], dtype="<f8").reshape(shape).astype(np.float64)
        offset += n
    if offset != len(data):
        raise FormatError("trailing bytes after payload")
    return header, arrays


def read_blob(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_blob(Path(path).read_bytes())


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(".tmp-" + path.name)
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header))
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    os.replace(tmp, path)


def append_csv(path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    path = Path(path)
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(list(header))
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v
