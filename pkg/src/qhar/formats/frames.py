"""Binary PGM (P5) and PPM (P6) frames with maxval 255."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..errors import FrameFormatError, PayloadMismatchError, UnsupportedMagicError, UnsupportedMaxvalError

_WHITESPACE = b" \t\n\r\v\f"
FRAME_SUFFIXES = (".pgm", ".ppm", ".pnm")


def _header_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last token.
    """
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and (buf[pos] in _WHITESPACE or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < n and buf[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and buf[pos] not in _WHITESPACE and buf[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise FrameFormatError("truncated header")
        tokens.append(buf[start:pos])
    if pos >= n or buf[pos] not in _WHITESPACE:
        raise FrameFormatError("header must end with a single whitespace byte")
    return tokens, pos + 1


def decode_frame(buf: bytes) -> np.ndarray:
    """Decode a P5/P6 image: (H, W) uint8 for PGM, (H, W, 3) uint8 for PPM."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedMagicError(f"unsupported magic {magic!r}; only binary P5/P6 are read")
    tokens, offset = _header_tokens(buf[2:], 3)
    offset += 2
    try:
        width, height, maxval = (int(t.decode("ascii")) for t in tokens)
    except (UnicodeDecodeError, ValueError):
        raise FrameFormatError(f"non-numeric header fields {tokens!r}") from None
    if width <= 0 or height <= 0:
        raise FrameFormatError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxvalError(f"maxval {maxval} unsupported; only 255")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = buf[offset:]
    if len(payload) != expected:
        raise PayloadMismatchError(
            f"{width}x{height} {magic.decode()} needs {expected} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).copy()


def encode_frame(image) -> bytes:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError(f"frame must be uint8, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def read_frame(path) -> np.ndarray:
    return decode_frame(Path(path).read_bytes())


def write_frame(image, path) -> None:
    Path(path).write_bytes(encode_frame(image))


def list_frames(directory) -> list[Path]:
    """Frame files of ``directory`` in lexicographic filename order."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"frame directory not found: {directory}")
    return sorted((p for p in d.iterdir() if p.suffix.lower() in FRAME_SUFFIXES and p.is_file()),
                  key=lambda p: os.fsencode(p.name))
