"""Binary checkpoint format for named float32 tensors.

Layout (little-endian)::

    b"TCKP"  u16 version  u32 count
    count x { u32 name_len, name (utf-8), u32 rank, rank x u32 extent, float32 values }
"""

import struct
from collections import OrderedDict

import numpy as np

from .nn import Module

MAGIC = b"TCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Stored tensor table disagrees with the expected model layout."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


def _as_state(obj):
    if isinstance(obj, Module):
        return obj.state_dict()
    return obj


def encode_checkpoint(tensors):
    tensors = _as_state(tensors)
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")  # tobytes() is C-order; keeps rank 0
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob):
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise NotACheckpointError("not a checkpoint: bad magic bytes")
    view = memoryview(blob)
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedCheckpointError(f"truncated checkpoint: needed {n} bytes at offset {pos}, file has {len(blob)}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    out = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(nbytes), dtype="<f4").astype(np.float32).reshape(shape)
        out[name] = values
    if pos != len(blob):
        raise CheckpointError(f"trailing {len(blob) - pos} bytes after the last tensor")
    return out


def save_checkpoint(tensors, path):
    """Write a ``name -> array`` mapping (or a Module's parameters) to ``path``."""
    blob = encode_checkpoint(tensors)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def check_compatible(state, module, prefix=""):
    """Raise :class:`CheckpointMismatchError` naming the first disagreeing tensor."""
    for name, p in module.named_parameters():
        key = prefix + name
        if key not in state:
            raise CheckpointMismatchError(f"checkpoint lacks tensor {key!r} (expected shape {p.shape})", key)
        if tuple(state[key].shape) != p.shape:
            raise CheckpointMismatchError(
                f"tensor {key!r}: checkpoint has shape {tuple(state[key].shape)}, model expects {p.shape}", key
            )


def load_into(module, state, prefix=""):
    """Copy ``state`` tensors (optionally under ``prefix``) into ``module``."""
    if not isinstance(state, dict):
        state = load_checkpoint(state)
    check_compatible(state, module, prefix)
    module.load_state_dict({name: state[prefix + name] for name, _ in module.named_parameters()})
    return module
