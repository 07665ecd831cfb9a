"""Binary ``.mrc`` checkpoints: architecture plus float64 parameters.

Layout (little endian, no padding)::

    b"MRC1"
    u8 R, R x u32          model input shape (spatial extents then channels)
    u32 layer count
    per layer:
        u8 kind id
        hyperparameters    (kind specific, see _write_hyper)
        u8 tensor count
        per tensor:  u8 name length, name (utf-8), u8 ndim, ndim x u32, f64 data

Parameters are written before buffers, each in sorted name order.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from .errors import BadMagicError, FileIOError, FormatError, ShapeError, TrailingDataError, TruncatedFileError
from .nn.layers import LAYER_BY_ID, AvgPoolND, BatchNorm, ConvND, FullyConnected, Layer
from .nn.model import Model

MAGIC = b"MRC1"


def _write_hyper(out: io.BytesIO, layer: Layer) -> None:
    if isinstance(layer, ConvND):
        n = layer.ndim
        out.write(struct.pack("<B", n))
        out.write(struct.pack(f"<{3 * n}I", *layer.kernel, *layer.stride, *layer.padding))
        out.write(struct.pack("<IIB", layer.in_channels, layer.out_channels, layer.bias))
    elif isinstance(layer, AvgPoolND):
        n = len(layer.kernel)
        out.write(struct.pack("<B", n))
        out.write(struct.pack(f"<{2 * n}I", *layer.kernel, *layer.stride))
    elif isinstance(layer, BatchNorm):
        out.write(struct.pack("<Idd", layer.channels, layer.momentum, layer.eps))
    elif isinstance(layer, FullyConnected):
        out.write(struct.pack("<IIB", layer.in_features, layer.out_features, layer.bias))


def encode_checkpoint(model: Model) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<B", len(model.input_shape)))
    out.write(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    out.write(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        out.write(struct.pack("<B", layer.kind_id))
        _write_hyper(out, layer)
        tensors = [(k, layer.params[k]) for k in sorted(layer.params)]
        tensors += [(k, layer.buffers[k]) for k in sorted(layer.buffers)]
        out.write(struct.pack("<B", len(tensors)))
        for name, arr in tensors:
            raw = name.encode()
            out.write(struct.pack("<B", len(raw)) + raw)
            out.write(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated at offset {self.pos}")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def _read_layer(r: _Reader) -> Layer:
    (kind_id,) = r.unpack("<B")
    cls = LAYER_BY_ID.get(kind_id)
    if cls is None:
        raise FormatError(f"unknown layer kind id {kind_id} at offset {r.pos - 1}")
    if cls is ConvND:
        (n,) = r.unpack("<B")
        vals = r.unpack(f"<{3 * n}I")
        cin, cout, bias = r.unpack("<IIB")
        layer = ConvND(vals[:n], cin, cout, stride=vals[n:2 * n], padding=vals[2 * n:], bias=bool(bias))
    elif cls is AvgPoolND:
        (n,) = r.unpack("<B")
        vals = r.unpack(f"<{2 * n}I")
        layer = AvgPoolND(vals[:n], vals[n:])
    elif cls is BatchNorm:
        ch, mom, eps = r.unpack("<Idd")
        layer = BatchNorm(ch, momentum=mom, eps=eps)
    elif cls is FullyConnected:
        fin, fout, bias = r.unpack("<IIB")
        layer = FullyConnected(fin, fout, bias=bool(bias))
    else:
        layer = cls()
    expected = layer.param_shapes()
    (count,) = r.unpack("<B")
    for _ in range(count):
        (nlen,) = r.unpack("<B")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if name in expected:
            if tuple(shape) != expected[name]:
                raise FormatError(f"{layer.kind} {name}: stored shape {shape} != expected {expected[name]}")
            layer.params[name] = arr
        elif name in layer.buffers:
            layer.buffers[name] = arr
        else:
            raise FormatError(f"{layer.kind}: unexpected tensor {name!r}")
    missing = set(expected) - set(layer.params)
    if missing:
        raise FormatError(f"{layer.kind}: missing tensors {sorted(missing)}")
    return layer


def decode_checkpoint(buf: bytes) -> Model:
    if len(buf) < 4:
        raise TruncatedFileError("checkpoint shorter than its magic")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"not an MRC1 checkpoint (magic {bytes(buf[:4])!r})")
    r = _Reader(buf)
    r.pos = 4
    (rank,) = r.unpack("<B")
    shape = r.unpack(f"<{rank}I")
    (count,) = r.unpack("<I")
    layers = [_read_layer(r) for _ in range(count)]
    if r.pos != len(buf):
        raise TrailingDataError(f"{len(buf) - r.pos} unexpected bytes after the last layer")
    try:
        return Model(layers, shape)
    except ShapeError as exc:
        raise FormatError(f"checkpoint describes an invalid model: {exc}") from None


def save_checkpoint(model: Model, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(encode_checkpoint(model))
    except OSError as exc:
        raise FileIOError(f"cannot write {path!s}: {exc.strerror}") from exc


def load_checkpoint(path) -> Model:
    if not path or not os.path.isfile(path):
        raise FileIOError(f"checkpoint not found: {path!r}")
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
