"""GNSF binary formats: single tensors, named-tensor containers, checkpoints.

Single tensor record: magic ``GNSF``, u32 version, u8 dtype, u8 rank,
rank x u64 dims, then the little-endian payload. A ``.gnt`` container
prefixes a u32 entry count and stores named records (u16 name length +
UTF-8 name before each record body).

Checkpoint files hold a manifest of (name, shape, offset) entries followed
by one contiguous block of little-endian float64 parameter data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GNSF"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f8"): 1,
    np.dtype("uint8"): 2,
    np.dtype("<i8"): 3,
}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


class FormatError(ValueError):
    """Raised when a file does not follow the GNSF layout."""


def _canonical(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    if array.dtype == np.uint8:
        return array
    if np.issubdtype(array.dtype, np.integer):
        return array.astype("<i8")
    return array.astype("<f8")


def _write_record(fh, array: np.ndarray) -> None:
    array = _canonical(array)
    code = _DTYPE_CODES[array.dtype]
    fh.write(struct.pack("<BB", code, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(array.tobytes())


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError("truncated GNSF file")
    return data


def _read_record(fh) -> np.ndarray:
    code, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = _read_exact(fh, count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def _check_header(fh) -> int:
    magic = _read_exact(fh, 4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    return version


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_record(fh, np.asarray(array))


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_header(fh)
        return _read_record(fh)


def write_container(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name, array in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            _write_record(fh, np.asarray(array))


def read_container(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        _check_header(fh)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            out[name] = _read_record(fh)
    return out


def write_checkpoint(path: str | Path, params: dict[str, np.ndarray]) -> None:
    """Manifest of (name, shape, offset) then raw little-endian f64 data."""
    names = sorted(params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(names)))
        offset = 0
        for name in names:
            array = params[name]
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
            fh.write(struct.pack("<Q", offset))
            offset += array.size * 8
        for name in names:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        _check_header(fh)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        manifest: list[tuple[str, tuple[int, ...], int]] = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
            (offset,) = struct.unpack("<Q", _read_exact(fh, 8))
            manifest.append((name, dims, offset))
        blob = fh.read()
    out: dict[str, np.ndarray] = {}
    for name, dims, offset in manifest:
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        chunk = blob[offset : offset + size * 8]
        if len(chunk) != size * 8:
            raise FormatError(f"checkpoint data truncated for '{name}'")
        out[name] = np.frombuffer(chunk, dtype="<f8").reshape(dims).copy()
    return out


def read_manifest(path: str | Path) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of a checkpoint without loading the data block."""
    with open(path, "rb") as fh:
        _check_header(fh)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
            struct.unpack("<Q", _read_exact(fh, 8))
            entries.append((name, tuple(int(d) for d in dims)))
    return entries
