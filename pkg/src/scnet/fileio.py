"""Binary readers and writers for matrices (FMAT), atlases (ATLS) and
coordinate tables (CTBL).

All integers and floats are little-endian.  Writers emit exactly the bytes a
reader consumed, so ``write(read(p))`` reproduces ``p`` bit for bit.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data_model import AtlasPartition, CoordinateTable
from .errors import BadMagic, FormatError, NonFiniteValue, TruncatedFile

VERSION = 1

_FMAT_HEADER = struct.Struct("<4sIQQ")
_ATLS_HEADER = struct.Struct("<4sIQI")
_CTBL_HEADER = struct.Struct("<4sIIIIQ")


def _read_header(buf: bytes, fmt: struct.Struct, magic: bytes, path) -> tuple:
    if len(buf) < 4 or buf[:4] != magic:
        raise BadMagic(f"{path}: expected magic {magic!r} at byte offset 0, found {buf[:4]!r}")
    if len(buf) < fmt.size:
        raise TruncatedFile(f"{path}: header ends at byte offset {len(buf)}, need {fmt.size}")
    fields = fmt.unpack_from(buf)
    if fields[1] != VERSION:
        raise FormatError(f"{path}: unsupported version {fields[1]} at byte offset 4")
    return fields[2:]


def _payload(buf: bytes, offset: int, count: int, dtype: str, path) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    need = offset + count * itemsize
    if len(buf) < need:
        got = (len(buf) - offset) // itemsize
        raise TruncatedFile(
            f"{path}: payload truncated at byte offset {len(buf)} "
            f"(expected {count} values, found {got})"
        )
    if len(buf) > need:
        raise FormatError(f"{path}: {len(buf) - need} trailing bytes after byte offset {need}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset)


def read_matrix_bytes(buf: bytes, path="<bytes>") -> np.ndarray:
    rows, cols = _read_header(buf, _FMAT_HEADER, b"FMAT", path)
    values = _payload(buf, _FMAT_HEADER.size, rows * cols, "<f8", path)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NonFiniteValue(f"{path}: non-finite value at element index {int(bad[0])}")
    return values.astype(np.float64).reshape(rows, cols)


def matrix_bytes(X) -> bytes:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"FMAT stores 2-D matrices, got shape {X.shape}")
    header = _FMAT_HEADER.pack(b"FMAT", VERSION, X.shape[0], X.shape[1])
    return header + np.ascontiguousarray(X, dtype="<f8").tobytes()


def load_matrix(path) -> np.ndarray:
    path = Path(path)
    return read_matrix_bytes(path.read_bytes(), path)


def write_matrix(path, X) -> None:
    Path(path).write_bytes(matrix_bytes(X))


def load_atlas(path) -> AtlasPartition:
    path = Path(path)
    buf = path.read_bytes()
    n_voxels, n_regions = _read_header(buf, _ATLS_HEADER, b"ATLS", path)
    labels = _payload(buf, _ATLS_HEADER.size, n_voxels, "<u4", path)
    return AtlasPartition(labels.astype(np.int64), int(n_regions))


def write_atlas(path, atlas: AtlasPartition) -> None:
    header = _ATLS_HEADER.pack(b"ATLS", VERSION, atlas.n_voxels, atlas.n_regions)
    Path(path).write_bytes(header + atlas.labels.astype("<u4").tobytes())


def load_coords(path) -> CoordinateTable:
    path = Path(path)
    buf = path.read_bytes()
    nx, ny, nz, n_voxels = _read_header(buf, _CTBL_HEADER, b"CTBL", path)
    coords = _payload(buf, _CTBL_HEADER.size, 3 * n_voxels, "<i4", path)
    return CoordinateTable((nx, ny, nz), coords.astype(np.int32).reshape(n_voxels, 3))


def write_coords(path, table: CoordinateTable) -> None:
    nx, ny, nz = table.grid_dims
    header = _CTBL_HEADER.pack(b"CTBL", VERSION, nx, ny, nz, table.n_voxels)
    Path(path).write_bytes(header + table.coords.astype("<i4").tobytes())
