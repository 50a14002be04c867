"""Binary and CSV containers for kernel matrices.

Binary layout (all little-endian), one or more records back to back::

    4s   magic  b"KMAT"
    u32  version (1)
    u64  rows
    u64  cols
    u8   has_stderr
    f64  values[rows * cols]        column-major
    f64  stderr[rows * cols]        column-major, only if has_stderr
"""
from __future__ import annotations

import csv
import struct

import numpy as np

MAGIC = b"KMAT"
VERSION = 1
_HEADER = struct.Struct("<4sIQQB")


def _pack(matrix, stderr=None):
    m = np.asarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise ValueError("matrix must be 2-D")
    parts = [_HEADER.pack(MAGIC, VERSION, m.shape[0], m.shape[1], int(stderr is not None)),
             m.tobytes(order="F")]
    if stderr is not None:
        s = np.asarray(stderr, dtype="<f8")
        if s.shape != m.shape:
            raise ValueError("stderr shape must match matrix")
        parts.append(s.tobytes(order="F"))
    return b"".join(parts)


def write_matrices(path, records):
    """Write ``[(matrix, stderr_or_None), ...]`` to one container file."""
    with open(path, "wb") as fh:
        for rec in records:
            m, s = rec if isinstance(rec, tuple) else (rec, None)
            fh.write(_pack(m, s))


def write_matrix(path, matrix, stderr=None):
    write_matrices(path, [(matrix, stderr)])


def read_matrices(path):
    with open(path, "rb") as fh:
        data = fh.read()
    out = []
    off = 0
    while off < len(data):
        if len(data) - off < _HEADER.size:
            raise ValueError("truncated header")
        magic, ver, rows, cols, has_se = _HEADER.unpack_from(data, off)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r} at offset {off}")
        if ver != VERSION:
            raise ValueError(f"unsupported container version {ver}")
        off += _HEADER.size
        n = rows * cols * 8
        if len(data) - off < n * (2 if has_se else 1):
            raise ValueError("truncated payload")
        m = np.frombuffer(data, "<f8", rows * cols, off).reshape((rows, cols), order="F").copy()
        off += n
        s = None
        if has_se:
            s = np.frombuffer(data, "<f8", rows * cols, off).reshape((rows, cols), order="F").copy()
            off += n
        out.append((m, s))
    return out


def read_matrix(path):
    return read_matrices(path)[0]


def write_csv(path, matrix, stderr=None):
    m = np.asarray(matrix, dtype=np.float64)
    s = np.zeros_like(m) if stderr is None else np.asarray(stderr, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value", "stderr"])
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                w.writerow([i, j, repr(float(m[i, j])), repr(float(s[i, j]))])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    nr = max(int(r["row"]) for r in rows) + 1
    nc = max(int(r["col"]) for r in rows) + 1
    m = np.zeros((nr, nc))
    s = np.zeros((nr, nc))
    for r in rows:
        m[int(r["row"]), int(r["col"])] = float(r["value"])
        s[int(r["row"]), int(r["col"])] = float(r["stderr"])
    return m, s
