"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"TSEG"  u16 format version  u64 architecture hash
    repeated until end of file:
        u16 name length, name (ASCII), u8 rank, rank x u32 dims,
        prod(dims) float32 values

Every parameter and batch-norm running statistic is one record, in the
model's canonical order. The optimizer step count travels as an extra
one-element record named ``meta.steps`` (exact below 2**24).
"""

import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelParams, architecture_hash, parameter_shapes

MAGIC = b"TSEG"
FORMAT_VERSION = 1
STEPS_RECORD = "meta.steps"
_HEADER = struct.Struct("<4sHQ")


class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


def _record(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    raw = name.encode("ascii")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def dumps(model):
    """Serialize a model to bytes."""
    if model.steps >= 2 ** 24:
        raise ValueError("step count too large to store exactly")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, model.arch_hash)]
    for name in parameter_shapes(model.base_channels):
        parts.append(_record(name, model.params[name]))
    parts.append(_record(STEPS_RECORD, np.array([model.steps])))
    return b"".join(parts)


def save_checkpoint(model, path):
    """Write atomically (temporary file then rename)."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(dumps(model))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"file ends inside {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    @property
    def done(self):
        return self.pos == len(self.data)


def loads(data):
    """Parse checkpoint bytes into a float32 :class:`ModelParams`."""
    if len(data) < _HEADER.size:
        if not MAGIC.startswith(bytes(data[:4])):
            raise BadMagicError("not a checkpoint file")
        raise TruncatedCheckpointError("file ends inside the header")
    magic, version, arch = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    rd = _Reader(data)
    rd.pos = _HEADER.size
    arrays = {}
    while not rd.done:
        (n,) = rd.unpack("<H", "a record name length")
        name = rd.take(n, "a record name").decode("ascii")
        (rank,) = rd.unpack("<B", f"the rank of {name}")
        dims = rd.unpack(f"<{rank}I", f"the shape of {name}")
        count = int(np.prod(dims, dtype=np.int64))
        raw = rd.take(4 * count, f"the data of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)

    if "E1.conv1.weight" not in arrays:
        raise ArchitectureMismatchError("checkpoint has no E1.conv1.weight record")
    base = arrays["E1.conv1.weight"].shape[0]
    if architecture_hash(base) != arch:
        raise ArchitectureMismatchError(
            f"architecture hash {arch:#018x} does not match base {base} ({architecture_hash(base):#018x})")
    shapes = parameter_shapes(base)
    steps_arr = arrays.pop(STEPS_RECORD, np.zeros(1, np.float32))
    if set(arrays) != set(shapes):
        missing = sorted(set(shapes) - set(arrays))
        extra = sorted(set(arrays) - set(shapes))
        raise ArchitectureMismatchError(f"record names differ (missing {missing}, unexpected {extra})")
    for name, shape in shapes.items():
        if arrays[name].shape != shape:
            raise ArchitectureMismatchError(f"{name} has shape {arrays[name].shape}, expected {shape}")
    params = {name: arrays[name] for name in shapes}
    return ModelParams(base, params, steps=int(steps_arr.ravel()[0]))


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
