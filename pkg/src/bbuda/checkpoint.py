"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"BBUA" | u16 version
    config:  u16 in_channels, u16 num_classes, u16 base_width, u16 depth, f32 dropout_rate
    u64 iteration
    u8 has_adam [f64 lr, f64 beta1, f64 beta2, f64 eps, u64 step]
    u32 meta_len | meta_len bytes of UTF-8 JSON
    u32 n_tensors, then per tensor:
        u16 name_len | name | u8 ndim | ndim x u32 dims | prod(dims) x f32
    u32 CRC32 of every preceding byte

Network parameters and batch-norm buffers are stored under their own names
in declaration order; Adam moments follow as ``adam.m.<name>`` and
``adam.v.<name>``.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .segnet import SegNet, SegNetConfig

MAGIC = b"BBUA"
VERSION = 1


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class AdamSnapshot:
    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]


@dataclass
class Checkpoint:
    config: SegNetConfig
    state: Dict[str, np.ndarray]
    iteration: int = 0
    adam: Optional[AdamSnapshot] = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_net(cls, net: SegNet, iteration: int = 0, adam: Optional[AdamSnapshot] = None,
                 meta: Optional[dict] = None) -> "Checkpoint":
        return cls(net.config, net.state_dict(), iteration, adam, dict(meta or {}))

    def build_net(self) -> SegNet:
        net = SegNet(self.config)
        net.load_state_dict(self.state)
        return net


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    c = ckpt.config
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<HHHHf", c.in_channels, c.num_classes, c.base_width, c.depth, c.dropout_rate))
    buf.write(struct.pack("<Q", ckpt.iteration))
    a = ckpt.adam
    if a is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<BddddQ", 1, a.lr, a.beta1, a.beta2, a.eps, a.step))
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)

    tensors = list(ckpt.state.items())
    if a is not None:
        tensors += [(f"adam.m.{k}", v) for k, v in a.m.items()]
        tensors += [(f"adam.v.{k}", v) for k, v in a.v.items()]
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("unexpected end of checkpoint data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> Checkpoint:
    if len(data) < 10 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, trailer = data[:-4], data[-4:]
    if zlib.crc32(body) != struct.unpack("<I", trailer)[0]:
        raise ChecksumError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, reader supports {VERSION}")
    in_ch, ncls, width, depth, drop = r.unpack("<HHHHf")
    config = SegNetConfig(in_ch, ncls, width, depth, round(float(drop), 6))
    (iteration,) = r.unpack("<Q")
    (has_adam,) = r.unpack("<B")
    adam_head = r.unpack("<ddddQ") if has_adam else None
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    state: Dict[str, np.ndarray] = {}
    m: Dict[str, np.ndarray] = {}
    v: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith("adam.m."):
            m[name[7:]] = arr
        elif name.startswith("adam.v."):
            v[name[7:]] = arr
        else:
            state[name] = arr
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor records")
    adam = None
    if adam_head is not None:
        lr, b1, b2, eps, step = adam_head
        adam = AdamSnapshot(lr, b1, b2, eps, int(step), m, v)
    return Checkpoint(config, state, int(iteration), adam, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = encode(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())
