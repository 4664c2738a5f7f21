"""Binary checkpoint format for a network and optional clipping bounds.

Layout (all integers little-endian)::

    b"MMCLIP"  u8 version (=1)
    u32 num_classes, u8 input rank, u32 * rank input shape
    u32 layer count, then per layer:
        u8 kind, u8 activation (0 none, 1 relu), u8 clippable,
        u32 in_size, u32 out_size, u32 kernel, u32 padding
    u8 has_bounds
    float64 weights in declaration order (per layer, in param_shapes order)
    float64 bounds, one vector per clippable layer (only when has_bounds)
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .network import LAYER_KINDS, BoundVectors, LayerSpec, Network

MAGIC = b"MMCLIP"
VERSION = 1
_LAYER = struct.Struct("<BBBIIII")


class CheckpointError(ValueError):
    pass


class NotACheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def dumps(net: Network, Z: Optional[BoundVectors] = None) -> bytes:
    if Z is not None:
        Z.check(net)
    out = [MAGIC, struct.pack("<B", VERSION), struct.pack("<IB", net.num_classes, len(net.input_shape))]
    out.append(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    out.append(struct.pack("<I", len(net.layers)))
    for spec in net.layers:
        out.append(_LAYER.pack(LAYER_KINDS.index(spec.kind), spec.activation == "relu", spec.clippable,
                               spec.in_size, spec.out_size, spec.kernel, spec.padding))
    out.append(struct.pack("<B", Z is not None))
    for arr in net.flat_params():
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    if Z is not None:
        for v in Z:
            out.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def loads(buf: bytes) -> tuple[Network, Optional[BoundVectors]]:
    if buf[:len(MAGIC)] != MAGIC:
        raise NotACheckpointError("not a checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(len(MAGIC))
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    num_classes, rank = r.unpack("<IB")
    input_shape = r.unpack(f"<{rank}I")
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        kind, act, clip, a, b, k, pad = r.unpack(_LAYER.format)
        if kind >= len(LAYER_KINDS):
            raise CheckpointError(f"unknown layer kind code {kind}")
        layers.append(LayerSpec(LAYER_KINDS[kind], a, b, k, pad, "relu" if act else "none", bool(clip)))
    (has_bounds,) = r.unpack("<B")
    params = [{name: r.floats(shape) for name, shape in spec.param_shapes().items()} for spec in layers]
    net = Network(tuple(layers), tuple(params), input_shape, num_classes)
    Z = None
    if has_bounds:
        Z = BoundVectors(tuple(r.floats((n,)) for n in net.clip_sizes()))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return net, Z


def save_checkpoint(net: Network, path, Z: Optional[BoundVectors] = None) -> None:
    Path(path).write_bytes(dumps(net, Z))


def load_checkpoint(path) -> tuple[Network, Optional[BoundVectors]]:
    return loads(Path(path).read_bytes())
