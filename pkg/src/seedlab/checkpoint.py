"""Binary checkpoint format for named parameter collections.

Layout (all integers little-endian):

    bytes 0-3   magic ``SEDL``
    byte  4     format version (currently 1)
    byte  5     kind flag: 0 = base/teacher network, 1 = distilled student
    bytes 6-21  trained guidance ranges, 4 x float32: wI_lo, wI_hi, wT_lo, wT_hi
                (all zero for non-student checkpoints)
    bytes 22-25 entry count, uint32
    entries     name_len uint16, name utf-8, ndim uint8, dims uint32 each,
                payload float32

Payloads are 32-bit on disk; parameters in memory are float64. Loading
therefore returns the float32-snapped values, and save(load(path)) is
byte-identical to the original file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import BadMagicError, TruncatedError, VersionError

MAGIC = b"SEDL"
VERSION = 1

KIND_BASE = 0
KIND_STUDENT = 1


@dataclass
class CheckpointHeader:
    kind: int = KIND_BASE
    w_ranges: tuple = (0.0, 0.0, 0.0, 0.0)
    version: int = VERSION


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    header: CheckpointHeader = field(default_factory=CheckpointHeader)


def serialize(params: dict[str, Tensor], kind: int = KIND_BASE,
              w_ranges: tuple = (0.0, 0.0, 0.0, 0.0)) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<BB", VERSION, kind)
    out += np.asarray(w_ranges, dtype="<f4").tobytes()
    out += struct.pack("<I", len(params))
    for name, tensor in params.items():
        nb = name.encode("utf-8")
        shape = tensor.shape
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", len(shape))
        for d in shape:
            out += struct.pack("<I", d)
        out += tensor.array.astype("<f4").tobytes()
    return bytes(out)


def save_checkpoint(params: dict[str, Tensor], path, kind: int = KIND_BASE,
                    w_ranges: tuple = (0.0, 0.0, 0.0, 0.0)) -> None:
    with open(path, "wb") as f:
        f.write(serialize(params, kind=kind, w_ranges=w_ranges))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedError(
                f"checkpoint ends at byte {len(self.blob)}, needed {self.pos + n}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk


def deserialize(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a SEDL checkpoint (bad magic)")
    version, kind = struct.unpack("<BB", r.take(2))
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {VERSION}")
    w_ranges = tuple(float(x) for x in np.frombuffer(r.take(16), dtype="<f4"))
    (count,) = struct.unpack("<I", r.take(4))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2))
        name = r.take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", r.take(1))
        shape = tuple(struct.unpack("<I", r.take(4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        payload = np.frombuffer(r.take(4 * n), dtype="<f4")
        params[name] = Tensor(payload.astype(np.float64).reshape(shape))
    return Checkpoint(params, CheckpointHeader(kind=kind, w_ranges=w_ranges, version=version))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return deserialize(f.read())
