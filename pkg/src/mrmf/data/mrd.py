"""Reader/writer for the ``.mrd`` dataset container.

Layout (little endian, no padding)::

    b"MRD1"  u32 N  u8 D  D x u32 extents  u32 C  u32 m
    N sample payloads   f32, row-major spatial, channel fastest
    N label vectors     f32

Values are stored as float32 and promoted back to float64 on read. The
container does not carry the resolution tag; datasets read back are tagged as
original resolution.
"""

from __future__ import annotations

import math
import os
import struct

import numpy as np

from ..errors import BadMagicError, DataError, ExtentOverflowError, FileIOError, TrailingDataError, TruncatedFileError
from .dataset import Dataset

MAGIC = b"MRD1"
# Refuse headers that describe more than 64 GiB of payload.
MAX_PAYLOAD_BYTES = 1 << 36


def encode_dataset(data: Dataset) -> bytes:
    n = len(data)
    spatial = data.sample_shape[:-1]
    header = MAGIC + struct.pack("<IB", n, len(spatial))
    header += struct.pack(f"<{len(spatial)}I", *spatial)
    header += struct.pack("<II", data.channels, data.label_length)
    return header + data.samples.astype("<f4").tobytes() + data.labels.astype("<f4").tobytes()


def write_dataset(data: Dataset, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(encode_dataset(data))
    except OSError as exc:
        raise FileIOError(f"cannot write {path!s}: {exc.strerror}") from exc


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file truncated while reading {what} (need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_dataset(buf: bytes) -> Dataset:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"not an MRD1 dataset (magic {magic!r})")
    n, d = r.unpack("<IB", "header")
    if d < 1 or d > 3:
        raise DataError(f"unsupported spatial dimensionality {d}")
    extents = r.unpack(f"<{d}I", "extents")
    c, m = r.unpack("<II", "header")
    if n < 1 or c < 1 or m < 1 or min(extents) < 1:
        raise DataError("header declares an empty dataset")
    per_sample = math.prod(extents) * c
    payload = 4 * n * (per_sample + m)
    if payload > MAX_PAYLOAD_BYTES:
        raise ExtentOverflowError(f"header declares {payload} payload bytes, above the {MAX_PAYLOAD_BYTES} limit")
    samples = np.frombuffer(r.take(4 * n * per_sample, "samples"), dtype="<f4")
    labels = np.frombuffer(r.take(4 * n * m, "labels"), dtype="<f4")
    if r.pos != len(buf):
        raise TrailingDataError(f"{len(buf) - r.pos} unexpected bytes after the label block")
    return Dataset(
        samples.astype(np.float64).reshape((n,) + tuple(extents) + (c,)),
        labels.astype(np.float64).reshape(n, m),
    )


def read_dataset(path) -> Dataset:
    if not path or not os.path.isfile(path):
        raise FileIOError(f"dataset file not found: {path!r}")
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FileIOError(f"cannot read {path!s}: {exc.strerror}") from exc
    return decode_dataset(buf)
