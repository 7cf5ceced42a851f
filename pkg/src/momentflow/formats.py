"""Binary and manifest file formats shared by the pipeline stages.

``NGFD`` blob
    ``b"NGFD"`` + version byte ``1`` + little-endian uint64 ``ndim`` + ``ndim``
    little-endian uint64 dims + float64 little-endian data in C order.

``NGCM1`` checkpoint
    ``b"NGCM1"`` + little-endian uint64 manifest length + UTF-8 JSON manifest +
    float64 little-endian arrays concatenated in the order the manifest's
    ``arrays`` list declares them.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

BLOB_MAGIC = b"NGFD"
BLOB_VERSION = 1
CKPT_MAGIC = b"NGCM1"


class FormatError(ValueError):
    """Raised when a file does not follow the expected layout."""


def write_blob(path, array):
    array = np.ascontiguousarray(array, dtype="<f8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(bytes([BLOB_VERSION]))
        fh.write(struct.pack("<Q", array.ndim))
        fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        fh.write(array.tobytes(order="C"))
    return path


def read_blob(path):
    data = Path(path).read_bytes()
    if data[:4] != BLOB_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if data[4] != BLOB_VERSION:
        raise FormatError(f"{path}: unsupported version {data[4]}")
    (ndim,) = struct.unpack_from("<Q", data, 5)
    dims = struct.unpack_from(f"<{ndim}Q", data, 13)
    offset = 13 + 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(data) - offset != 8 * count:
        raise FormatError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(data, dtype="<f8", count=count,
                         offset=offset).reshape(dims).astype(float)


def write_checkpoint(path, manifest, arrays):
    """Write ``arrays`` (name -> ndarray, insertion ordered) after a manifest."""
    manifest = dict(manifest)
    manifest["arrays"] = [[name, list(np.shape(a))] for name, a in arrays.items()]
    header = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes(order="C"))
    return Path(path)


def read_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:5] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:5]!r}")
    (n,) = struct.unpack_from("<Q", data, 5)
    manifest = json.loads(data[13:13 + n].decode())
    offset = 13 + n
    arrays = {}
    for name, shape in manifest["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count,
                                     offset=offset).reshape(shape).astype(float)
        offset += 8 * count
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes after declared arrays")
    return manifest, arrays


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_table(path, columns, header):
    """Whitespace-separated columnar text with a ``#`` header row."""
    cols = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    np.savetxt(path, cols, header=" ".join(header), fmt="%.17g")
    return Path(path)


def read_table(path):
    with open(path) as fh:
        header = fh.readline().lstrip("#").split()
    data = np.loadtxt(path, ndmin=2)
    return header, data
