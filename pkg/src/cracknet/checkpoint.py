"""Binary checkpoint container.

Layout: the magic ``CRKNET1``, then for every parameter in model order a
little-endian ``uint32`` name length, the UTF-8 name, a ``uint32`` rank, one
``uint32`` per extent and the values as little-endian ``float32``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .fileio import atomic_write
from .models import build_model

MAGIC = b"CRKNET1"


def encode(model):
    parts = [MAGIC]
    for name, t in model.named_parameters():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob):
    """Parse a checkpoint into ``{name: float32 array}`` in file order."""
    if not blob.startswith(MAGIC):
        raise FormatError("not a checkpoint: bad magic")
    pos, out = len(MAGIC), {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint while reading {what}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (length,) = struct.unpack("<I", take(4, "a name length"))
        try:
            name = take(length, "a name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"corrupt tensor name at byte {pos - length}") from exc
        (rank,) = struct.unpack("<I", take(4, f"the rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"the extents of {name}"))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * count, f"the values of {name}"), dtype="<f4").reshape(shape)
        if name in out:
            raise FormatError(f"duplicate tensor {name}")
        out[name] = data
    return out


def checkpoint_save(model, path):
    atomic_write(path, encode(model))


def checkpoint_load(path, config, dtype=np.float32):
    """Build a model for ``config`` and fill it from ``path``.

    Every tensor must be present with matching extents; nothing is returned
    unless the whole file validates.
    """
    tensors = decode(Path(path).read_bytes())
    model = build_model(config, seed=0, dtype=dtype)
    expected = model.named_parameters()
    names = {n for n, _ in expected}
    extra = [n for n in tensors if n not in names]
    if extra:
        raise FormatError(f"checkpoint has tensors the model lacks: {', '.join(extra[:5])}")
    for name, t in expected:
        if name not in tensors:
            raise FormatError(f"checkpoint is missing tensor {name}")
        if tensors[name].shape != t.shape:
            raise FormatError(f"tensor {name} has extents {tensors[name].shape}, model expects {t.shape}")
    for name, t in expected:
        t.data[...] = tensors[name]
    return model
