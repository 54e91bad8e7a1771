"""Binary tensor files (``WPFT``) and named-tensor containers (``WPCK``).

WPFT layout, all little-endian::

    b"WPFT" | u32 version (=1) | u8 dtype (0=f32, 1=f64) | u32 rank
    | rank * u64 dims | row-major payload

WPCK layout::

    b"WPCK" | u32 version (=1) | u32 count
    | count * (u32 name length | UTF-8 name | WPFT blob)
"""

import hashlib
import struct

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"WPFT"
CHECKPOINT_MAGIC = b"WPCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode_tensor(array, dtype=np.float64):
    arr = np.ascontiguousarray(np.asarray(array), dtype=dtype)
    code = _CODES[np.dtype(dtype)]
    head = TENSOR_MAGIC + struct.pack("<IBI", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype(_DTYPES[code], copy=False).tobytes(order="C")


def decode_tensor(buf, offset=0):
    """Decode one tensor starting at ``offset``; returns ``(array, end_offset)``."""
    view = memoryview(buf)
    if len(view) < offset + 13:
        raise FormatError("truncated tensor header", offset)
    if bytes(view[offset:offset + 4]) != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {bytes(view[offset:offset + 4])!r}", offset)
    version, code, rank = struct.unpack_from("<IBI", view, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}", offset + 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset + 8)
    pos = offset + 13
    if len(view) < pos + 8 * rank:
        raise FormatError("truncated tensor dimensions", pos)
    dims = struct.unpack_from(f"<{rank}Q", view, pos)
    pos += 8 * rank
    dtype = _DTYPES[code]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    if len(view) < pos + nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes", pos)
    arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(dims)
    return arr.astype(np.float64), pos + nbytes


def save_tensor(path, array, dtype=np.float64):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array, dtype))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor payload", end)
    return arr


def encode_checkpoint(entries):
    """``entries`` is an ordered mapping name -> array."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(encode_tensor(arr))
    return b"".join(parts)


def decode_checkpoint(buf):
    view = memoryview(buf)
    if len(view) < 12:
        raise FormatError("truncated checkpoint header", 0)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(view[:4])!r}", 0)
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 12
    entries = {}
    for _ in range(count):
        if len(view) < pos + 4:
            raise FormatError("truncated entry header", pos)
        (n,) = struct.unpack_from("<I", view, pos)
        pos += 4
        if len(view) < pos + n:
            raise FormatError("truncated entry name", pos)
        try:
            name = bytes(view[pos:pos + n]).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not UTF-8", pos) from None
        pos += n
        entries[name], pos = decode_tensor(view, pos)
    if pos != len(view):
        raise FormatError("trailing bytes after last entry", pos)
    return entries


def save_checkpoint(path, entries):
    data = encode_checkpoint(entries)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
