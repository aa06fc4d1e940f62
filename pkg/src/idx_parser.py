"""
IDX Parser Module
- Parses and writes the IDX binary format the MNIST-family datasets ship in.
"""

import gzip
import logging
import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from errors import BadMagic, DimensionOverflow, IdxFormatError, Truncated

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# Only the unsigned byte element type is used by these datasets
UBYTE_TYPE_CODE = 0x08
MAX_DIMENSIONS = 4
MAX_ELEMENTS = 2**31 - 1

GZIP_MAGIC = b"\x1f\x8b"


@dataclass(frozen=True)
class IdxArray:
    magic: int
    dims: Tuple[int, ...]
    payload: np.ndarray

    @property
    def count(self) -> int:
        return self.dims[0]


def parse_idx(data: bytes) -> IdxArray:
    """
    Parse an IDX byte sequence.
    :param data: Raw (already decompressed) file content.
    :return: IdxArray with the declared dimensions and a uint8 payload shaped accordingly.
    """
    if len(data) < 4:
        raise Truncated(f"IDX header needs 4 bytes, got {len(data)}")

    (magic,) = struct.unpack(">I", data[:4])
    zero, type_code, ndim = magic >> 16, (magic >> 8) & 0xFF, magic & 0xFF
    if zero != 0 or type_code != UBYTE_TYPE_CODE or not 1 <= ndim <= MAX_DIMENSIONS:
        raise BadMagic(f"Unknown IDX magic number 0x{magic:08x}")

    header_size = 4 + 4 * ndim
    if len(data) < header_size:
        raise Truncated(f"IDX header declares {ndim} dimensions but only {len(data)} bytes are present")

    dims = struct.unpack(f">{ndim}I", data[4:header_size])
    elements = 1
    for size in dims:
        elements *= size
        if elements > MAX_ELEMENTS:
            raise DimensionOverflow(f"IDX dimensions {dims} exceed {MAX_ELEMENTS} elements")

    payload_size = len(data) - header_size
    if payload_size < elements:
        raise Truncated(f"IDX payload has {payload_size} bytes, dimensions {dims} need {elements}")
    if payload_size > elements:
        raise IdxFormatError(f"IDX payload has {payload_size - elements} trailing bytes")

    payload = np.frombuffer(data, dtype=np.uint8, count=elements, offset=header_size).reshape(dims)
    return IdxArray(magic=magic, dims=tuple(dims), payload=payload)


def serialize_idx(array: np.ndarray) -> bytes:
    """
    Write a uint8 array back to IDX bytes.
    :param array: Array with 1 to 4 dimensions.
    :return: Byte sequence that parse_idx reads back to the same array.
    """
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise IdxFormatError(f"Only uint8 arrays can be written as IDX, got {array.dtype}")
    if not 1 <= array.ndim <= MAX_DIMENSIONS:
        raise DimensionOverflow(f"IDX supports 1 to {MAX_DIMENSIONS} dimensions, got {array.ndim}")

    magic = (UBYTE_TYPE_CODE << 8) | array.ndim
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    return header + np.ascontiguousarray(array).tobytes()


def read_idx_file(path: str) -> IdxArray:
    """
    Read an IDX file from disk, transparently decompressing gzip content.
    """
    with open(path, "rb") as handle:
        data = handle.read()
    if data[:2] == GZIP_MAGIC:
        logging.debug(f"Decompressing gzip IDX file: {path}")
        data = gzip.decompress(data)
    return parse_idx(data)
