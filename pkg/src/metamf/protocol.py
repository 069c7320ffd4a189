"""Round messages exchanged between server and devices, and their byte layout.

Every message starts with a 13-byte header, all integers little-endian::

    magic      4s   b"MMF1"
    kind       u8   1 = DeliverModel, 2 = GradientUpload
    round      u32
    user_index u32

``DeliverModel`` body::

    item_dim u32, num_items u32, item_embeddings f64[item_dim * num_items] (row-major)
    num_layers u32, then per layer: f_out u32, f_in u32, weight f64[f_out * f_in], bias f64[f_out]

``GradientUpload`` body::

    batch_size u32, loss f64
    item_dim u32, num_columns u32, item_indices u32[num_columns],
    columns f64[num_columns * item_dim] (one item column after another)
    num_layers u32, then per layer as in DeliverModel (gradients instead of values)

Reals are IEEE-754 doubles, little-endian. No field carries a rating.
"""
from __future__ import annotations

import io
import queue
import struct
from dataclasses import dataclass

import numpy as np

from .device import LocalGradient
from .exceptions import ProtocolError
from .metanet import GeneratedModel

MAGIC = b"MMF1"
KIND_DELIVER = 1
KIND_UPLOAD = 2
_HEADER = struct.Struct("<4sBII")
_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")


@dataclass
class DeliverModel:
    user_index: int
    phi: GeneratedModel
    round: int


@dataclass
class GradientUpload:
    user_index: int
    grad: LocalGradient
    round: int


def _write_array(buf, arr, dtype="<f8"):
    buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _write_layers(buf, layers):
    buf.write(_U32.pack(len(layers)))
    for w, b in layers:
        buf.write(_U32.pack(w.shape[0]))
        buf.write(_U32.pack(w.shape[1]))
        _write_array(buf, w)
        _write_array(buf, b)


def encode(msg) -> bytes:
    buf = io.BytesIO()
    if isinstance(msg, DeliverModel):
        buf.write(_HEADER.pack(MAGIC, KIND_DELIVER, msg.round, msg.user_index))
        items = msg.phi.item_embeddings
        buf.write(_U32.pack(items.shape[0]))
        buf.write(_U32.pack(items.shape[1]))
        _write_array(buf, items)
        _write_layers(buf, msg.phi.layers)
    elif isinstance(msg, GradientUpload):
        g = msg.grad
        buf.write(_HEADER.pack(MAGIC, KIND_UPLOAD, msg.round, msg.user_index))
        buf.write(_U32.pack(g.batch_size))
        buf.write(_F64.pack(g.loss))
        buf.write(_U32.pack(g.item_columns.shape[0]))
        buf.write(_U32.pack(len(g.item_indices)))
        _write_array(buf, g.item_indices, "<u4")
        _write_array(buf, g.item_columns.T)
        _write_layers(buf, g.layers)
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise ProtocolError("message truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def f64(self) -> float:
        return _F64.unpack(self.take(8))[0]

    def array(self, count, shape, dtype="<f8"):
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size), dtype=dtype).astype(
            np.float64 if dtype == "<f8" else np.int64).reshape(shape)

    def layers(self):
        out = []
        for _ in range(self.u32()):
            f_out, f_in = self.u32(), self.u32()
            out.append((self.array(f_out * f_in, (f_out, f_in)), self.array(f_out, (f_out,))))
        return out


def decode(data: bytes):
    r = _Reader(data)
    magic, kind, rnd, user = _HEADER.unpack(r.take(_HEADER.size))
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {bytes(magic)!r}")
    if kind == KIND_DELIVER:
        d, n = r.u32(), r.u32()
        items = r.array(d * n, (d, n))
        msg = DeliverModel(user, GeneratedModel(items, r.layers()), rnd)
    elif kind == KIND_UPLOAD:
        batch_size = r.u32()
        loss = r.f64()
        d, ncols = r.u32(), r.u32()
        indices = r.array(ncols, (ncols,), "<u4")
        columns = r.array(ncols * d, (ncols, d)).T.copy()
        msg = GradientUpload(user, LocalGradient(indices, columns, r.layers(), loss=loss,
                                                 batch_size=batch_size), rnd)
    else:
        raise ProtocolError(f"unknown message kind {kind}")
    if r.pos != len(r.data):
        raise ProtocolError(f"{len(r.data) - r.pos} trailing bytes")
    return msg


class InProcessTransport:
    """Byte queues standing in for the network, with traffic counters."""

    def __init__(self):
        self.downlink = {}
        self.uplink = queue.Queue()
        self.bytes_down = 0
        self.bytes_up = 0

    def _down(self, user):
        return self.downlink.setdefault(user, queue.Queue())

    def send_to_device(self, user: int, payload: bytes) -> None:
        self.bytes_down += len(payload)
        self._down(user).put(payload)

    def receive_on_device(self, user: int) -> bytes:
        return self._down(user).get_nowait()

    def send_to_server(self, payload: bytes) -> None:
        self.bytes_up += len(payload)
        self.uplink.put(payload)

    def drain_uploads(self) -> list[bytes]:
        out = []
        while True:
            try:
                out.append(self.uplink.get_nowait())
            except queue.Empty:
                return out

    def reset_counters(self) -> tuple[int, int]:
        counts = (self.bytes_down, self.bytes_up)
        self.bytes_down = self.bytes_up = 0
        return counts
