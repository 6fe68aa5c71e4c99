"""SGT1 portable tensor files.

Layout::

    b"SGT1" | dtype code (u8) | rank (u8) | rank x extent (u64 LE) | payload

The payload is the row-major array in little-endian byte order. Two dtypes
exist: ``0x01`` float64 and ``0x02`` uint32.
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SGT1"

DTYPE_CODES = {
    0x01: np.dtype("<f8"),
    0x02: np.dtype("<u4"),
}
_CODE_FOR_KIND = {np.dtype("<f8"): 0x01, np.dtype("<u4"): 0x02}


def encode(array):
    """Serialize ``array`` (float64 or uint32) to SGT1 bytes."""
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in _CODE_FOR_KIND:
        raise TypeError(f"SGT1 stores float64 or uint32, got {array.dtype}")
    if array.ndim > 255:
        raise ValueError("rank exceeds 255")
    head = MAGIC + struct.pack("<BB", _CODE_FOR_KIND[dtype], array.ndim)
    head += struct.pack(f"<{array.ndim}Q", *array.shape)
    return head + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_from(buf, offset=0, entry=None):
    """Decode one tensor starting at ``offset``; return ``(array, end_offset)``."""
    end = len(buf)
    if end - offset < 6:
        raise FormatError("truncated SGT1 header", offset, entry)
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise FormatError("bad magic, expected b'SGT1'", offset, entry)
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code 0x{code:02x}", offset + 4, entry)
    pos = offset + 6
    if end - pos < 8 * rank:
        raise FormatError("truncated extents", pos, entry)
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dtype = DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.uint64)) if rank else 1
    nbytes = count * dtype.itemsize
    if end - pos < nbytes:
        raise FormatError(
            f"truncated payload: need {nbytes} bytes, have {end - pos}", pos, entry
        )
    array = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
    return array.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def decode(buf):
    array, end = decode_from(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes", end)
    return array


def save(path, array):
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
