"""Low-level helpers for the magic-tagged binary file formats.

All PatchLock files start with a four-byte ASCII magic followed by
little-endian fixed-width fields. Integers are ``u32``, reals are
``float64``. The owning modules (keygen, tensorpatch, protect, toymodel)
define the field layout; this module only reads and writes the pieces.
"""

import math
import os
import struct
from typing import BinaryIO, Optional, Tuple

import numpy as np

from .core import FormatError

_U32 = struct.Struct("<I")
_F64 = np.dtype("<f8")


def write_magic(fh: BinaryIO, magic: bytes) -> None:
    fh.write(magic)


def read_magic(fh: BinaryIO, expected: bytes) -> None:
    """Read four bytes and check them against ``expected``.

    Raises:
        FormatError: If the magic differs or the file is too short
    """
    found = fh.read(len(expected))
    if found != expected:
        raise FormatError(
            f"Bad magic: expected {expected.decode('ascii')!r}, found {found!r}"
        )


def peek_magic(fh: BinaryIO, length: int = 4) -> bytes:
    """Return the next magic without consuming it (empty at end of file)."""
    pos = fh.tell()
    found = fh.read(length)
    fh.seek(pos)
    return found


def write_u32(fh: BinaryIO, *values: int) -> None:
    for value in values:
        if not 0 <= value < 2 ** 32:
            raise FormatError(f"Value {value} does not fit in u32")
        fh.write(_U32.pack(value))


def read_u32(fh: BinaryIO, count: int) -> Tuple[int, ...]:
    raw = _read_exact(fh, _U32.size * count)
    return struct.unpack(f"<{count}I", raw)


def write_f64(fh: BinaryIO, array: np.ndarray) -> None:
    """Write an array as row-major little-endian float64."""
    fh.write(np.ascontiguousarray(array, dtype=_F64).tobytes(order="C"))


def read_f64(fh: BinaryIO, shape: Tuple[int, ...]) -> np.ndarray:
    """Read ``prod(shape)`` float64 values and return them as a native array."""
    size = math.prod(int(n) for n in shape) * _F64.itemsize
    remaining = _remaining(fh)
    if remaining is not None and size > remaining:
        raise FormatError(f"Truncated file: header declares {size} data bytes, {remaining} left")
    raw = _read_exact(fh, size)
    return np.frombuffer(raw, dtype=_F64).astype(np.float64).reshape(shape)


def _remaining(fh: BinaryIO) -> Optional[int]:
    if not fh.seekable():
        return None
    pos = fh.tell()
    end = fh.seek(0, os.SEEK_END)
    fh.seek(pos)
    return end - pos


def _read_exact(fh: BinaryIO, size: int) -> bytes:
    raw = fh.read(size)
    if len(raw) != size:
        raise FormatError(f"Truncated file: wanted {size} bytes, got {len(raw)}")
    return raw
