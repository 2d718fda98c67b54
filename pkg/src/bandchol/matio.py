"""Matrix file formats.

Text: a header line holding the row count, then one whitespace-separated
row per line. Floats are written with ``repr`` so a round trip is exact.

Binary: an 8-byte little-endian unsigned row count, an 8-byte column count,
then the entries as little-endian float64 in row-major order.
"""
from __future__ import annotations

import os
import struct

import numpy as np

_DIM = struct.Struct("<QQ")


def write_matrix_text(path: str | os.PathLike, M) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    lines = [str(M.shape[0])]
    lines.extend(" ".join(repr(float(x)) for x in row) for row in M)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_matrix_text(path: str | os.PathLike) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 1:
            raise ValueError(f"{path}: header must hold a single row count")
        rows = int(header[0])
        data = [line.split() for line in fh if line.strip()]
    if len(data) != rows:
        raise ValueError(f"{path}: header says {rows} rows, found {len(data)}")
    widths = {len(r) for r in data}
    if len(widths) > 1:
        raise ValueError(f"{path}: ragged rows")
    return np.array(data, dtype=float).reshape(rows, -1)


def write_matrix_binary(path: str | os.PathLike, M) -> None:
    M = np.atleast_2d(np.asarray(M, dtype="<f8"))
    with open(path, "wb") as fh:
        fh.write(_DIM.pack(*M.shape))
        fh.write(np.ascontiguousarray(M).tobytes())


def read_matrix_binary(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_DIM.size)
        if len(head) != _DIM.size:
            raise ValueError(f"{path}: truncated header")
        rows, cols = _DIM.unpack(head)
        body = fh.read()
    if len(body) != 8 * rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    """Dispatch on extension: ``.bin`` is binary, anything else is text."""
    if str(path).endswith(".bin"):
        return read_matrix_binary(path)
    return read_matrix_text(path)


def write_matrix(path: str | os.PathLike, M) -> None:
    if str(path).endswith(".bin"):
        write_matrix_binary(path, M)
    else:
        write_matrix_text(path, M)
