"""Versioned binary checkpoints: named float64 tensors, bit-exact round trip."""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"CRCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(named_tensors, path, meta=""):
    """Write name -> Tensor/ndarray as row-major little-endian f64 payloads.

    ``meta`` is a free-form string slot (e.g. the run id of the manifest
    that produced the checkpoint).
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta_raw = meta.encode("utf-8")
    buf.write(struct.pack("<I", len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(named_tensors)))
    for name, tensor in named_tensors.items():
        values = np.ascontiguousarray(
            getattr(tensor, "values", tensor), dtype="<f8"
        )
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", values.ndim))
        for dim in values.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(values.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Read a checkpoint; returns (name -> ndarray, meta string)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = fh.read(meta_len).decode("utf-8")
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(
                fh.read(8 * size), dtype="<f8"
            ).reshape(shape).copy()
    return arrays, meta
