"""Tensor value conventions and bit-exact binary blob I/O.

Tensors are plain numpy arrays restricted to five element types (f32, i8,
u8, i16, i32).  Activations use NCHW layout, convolution weights OIHW; the
quantization code keys per-channel scales off axis 0 of OIHW.

Blob format (little-endian, file extension ``.qt``)::

    magic   6 bytes  b"QTNSR1"
    dtype   1 byte   0=F32 1=I8 2=U8 3=I16 4=I32
    rank    1 byte
    dims    rank x uint32
    payload raw element data, C order

A blob stream must end exactly after the payload; trailing bytes are
rejected so corrupt concatenations cannot pass silently.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import BlobFormatError, ValidationError

MAGIC = b"QTNSR1"

# dtype code <-> numpy dtype (explicitly little-endian on disk)
DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.int8): 1,
    np.dtype(np.uint8): 2,
    np.dtype(np.int16): 3,
    np.dtype(np.int32): 4,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}
_WIRE_DTYPES = {0: "<f4", 1: "i1", 2: "u1", 3: "<i2", 4: "<i4"}

SUPPORTED_DTYPES = tuple(DTYPE_CODES)


def check_tensor(arr: np.ndarray) -> np.ndarray:
    """Validate that ``arr`` is a supported tensor; returns it unchanged."""
    if not isinstance(arr, np.ndarray):
        raise ValidationError(f"expected ndarray, got {type(arr).__name__}")
    if arr.dtype not in DTYPE_CODES:
        raise ValidationError(f"unsupported tensor dtype {arr.dtype}")
    if any(d <= 0 for d in arr.shape):
        raise ValidationError(f"non-positive dimension in shape {arr.shape}")
    return arr


def blob_size(arr: np.ndarray) -> int:
    """Serialized byte count: 8 header bytes + 4 per dim + payload."""
    return 8 + 4 * arr.ndim + arr.size * arr.itemsize


def write_blob(arr: np.ndarray, sink: BinaryIO) -> int:
    """Write one tensor blob to ``sink``; returns the byte count written."""
    check_tensor(arr)
    code = DTYPE_CODES[arr.dtype]
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(_WIRE_DTYPES[code], copy=False).tobytes()
    try:
        sink.write(header)
        sink.write(dims)
        sink.write(payload)
    except OSError as exc:
        raise OSError(f"blob write failed: {exc}") from exc
    return len(header) + len(dims) + len(payload)


def read_blob(source: BinaryIO) -> np.ndarray:
    """Read one tensor blob; the stream must contain exactly one blob."""
    head = source.read(8)
    if len(head) < 8 or head[:6] != MAGIC:
        raise BlobFormatError("bad blob magic")
    code, rank = struct.unpack("<BB", head[6:8])
    if code not in CODE_DTYPES:
        raise BlobFormatError(f"unknown dtype code {code}")
    raw_dims = source.read(4 * rank)
    if len(raw_dims) != 4 * rank:
        raise BlobFormatError("truncated blob header")
    dims = struct.unpack(f"<{rank}I", raw_dims) if rank else ()
    if any(d == 0 for d in dims):
        raise BlobFormatError(f"zero dimension in blob shape {dims}")
    wire = np.dtype(_WIRE_DTYPES[code])
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = source.read(count * wire.itemsize)
    if len(payload) != count * wire.itemsize:
        raise BlobFormatError("truncated blob payload")
    if source.read(1):
        raise BlobFormatError("trailing bytes after blob payload")
    arr = np.frombuffer(payload, dtype=wire).astype(CODE_DTYPES[code], copy=True)
    return arr.reshape(dims)


def save_tensor(arr: np.ndarray, path) -> int:
    with open(path, "wb") as fh:
        return write_blob(arr, fh)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_blob(fh)


def tensors_equal(a: np.ndarray, b: np.ndarray) -> bool:
    """Bit-exact equality: dtype, shape and raw payload all identical."""
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
