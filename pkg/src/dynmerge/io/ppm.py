"""Binary PPM (P6, maxval 255) reading and writing."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class PPMError(ValueError):
    pass


def _header_tokens(blob: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping '#' comments.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last token.
    """
    tokens, i, n = [], 0, len(blob)
    while len(tokens) < count:
        while i < n and blob[i:i + 1].isspace():
            i += 1
        if i < n and blob[i:i + 1] == b"#":
            while i < n and blob[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not blob[i:i + 1].isspace() and blob[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise PPMError("truncated PPM header")
        tokens.append(blob[start:i])
    if i >= n or not blob[i:i + 1].isspace():
        raise PPMError("PPM header must end with one whitespace byte")
    return tokens, i + 1


def parse_ppm(blob: bytes) -> np.ndarray:
    if blob[:2] != b"P6":
        raise PPMError(f"wrong magic {blob[:2]!r}; only binary P6 is supported")
    (_, w, h, maxval), start = _header_tokens(blob, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as err:
        raise PPMError("non-numeric PPM header field") from err
    if maxval != 255:
        raise PPMError(f"maxval must be 255, got {maxval}")
    need = w * h * 3
    pix = blob[start:start + need]
    if len(pix) < need:
        raise PPMError(f"short pixel data: {len(pix)} of {need} bytes")
    arr = np.frombuffer(pix, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def read_ppm(path) -> np.ndarray:
    """[3, H, W] float32 in [0, 1]."""
    return parse_ppm(Path(path).read_bytes())


def write_ppm(path, image) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise PPMError(f"expected [3, H, W] image, got {img.shape}")
    _, h, w = img.shape
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pix.tobytes())
