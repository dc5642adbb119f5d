"""Binary tensor files (".ten").

Layout, all little-endian: rank as u32, one u32 extent per axis, then the
float64 payload in row-major order.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

_MAX_RANK = 255


def save_tensor(t: Tensor, path) -> None:
    arr = np.asarray(t.data, dtype="<f8", order="C")  # keeps rank 0 intact
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def load_tensor(path) -> Tensor:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise FormatError(f"{path}: truncated rank field", offset=len(blob))
    (rank,) = struct.unpack_from("<I", blob, 0)
    if rank > _MAX_RANK:
        raise FormatError(f"{path}: implausible rank {rank}", offset=0)
    header_end = 4 + 4 * rank
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated extent list", offset=len(blob))
    shape = struct.unpack_from(f"<{rank}I", blob, 4) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = header_end + 8 * count
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload length {len(blob) - header_end} does not match "
            f"extents {shape}", offset=header_end)
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=header_end)
    return Tensor(data.reshape(shape).copy())
