"""DTC1 tensor container.

Layout (all integers little-endian)::

    b"DTC1" | u32 manifest_len | manifest (UTF-8 JSON) | data section

The manifest is a JSON list of ``{"name", "dtype": "f32", "shape", "offset",
"length"}`` objects. ``offset`` is relative to the start of the data section
and ``length`` is in bytes (``4 * prod(shape)``). Data is tightly packed
little-endian float32 in manifest order.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"DTC1"


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class OverlapError(ContainerError):
    pass


class ShapeLengthError(ContainerError):
    pass


class ManifestError(ContainerError):
    pass


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape),
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(entries, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(chunks)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise BadMagicError("not a DTC1 container (bad magic)")
    (mlen,) = struct.unpack("<I", blob[4:8])
    if 8 + mlen > len(blob):
        raise TruncatedError(f"manifest claims {mlen} bytes but file ends at {len(blob)}")
    try:
        entries = json.loads(blob[8:8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ManifestError(f"unreadable manifest: {err}") from err
    if not isinstance(entries, list):
        raise ManifestError("manifest must be a JSON list")
    data = memoryview(blob)[8 + mlen:]
    out: dict[str, np.ndarray] = {}
    prev_end = 0
    for e in entries:
        try:
            name, dt, shape, off, length = e["name"], e["dtype"], e["shape"], e["offset"], e["length"]
        except (KeyError, TypeError) as err:
            raise ManifestError(f"malformed manifest entry {e!r}") from err
        if dt != "f32":
            raise ManifestError(f"{name}: unsupported dtype {dt!r}")
        if name in out:
            raise ManifestError(f"duplicate tensor name {name!r}")
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise ShapeLengthError(f"{name}: length {length} != 4 * prod({shape})")
        if off < prev_end:
            raise OverlapError(f"{name}: offset {off} overlaps previous entry ending at {prev_end}")
        if off + length > len(data):
            raise TruncatedError(f"{name}: data [{off}, {off + length}) beyond end of data section ({len(data)} bytes)")
        out[name] = np.frombuffer(data[off:off + length], dtype="<f4").reshape(tuple(shape)).copy()
        prev_end = off + length
    return out


def write_container(path, tensors: dict[str, np.ndarray]) -> None:
    """Atomic write: a temp file in the target directory is renamed into place."""
    path = Path(path)
    blob = encode(tensors)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=".dtc1-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
