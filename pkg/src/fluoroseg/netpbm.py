"""Binary PGM (P5) and PPM (P6) images with maxval 255."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ParseError("truncated netpbm header")
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode(buf: bytes) -> np.ndarray:
    """Decode a P5 or P6 byte string into a uint8 array (H, W) or (H, W, 3)."""
    tokens, offset = _header_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported netpbm magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ParseError("non-numeric netpbm header") from exc
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raster = buf[offset:offset + need]
    if len(raster) != need:
        raise ParseError(f"expected {need} raster bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr[..., 0].copy() if channels == 1 else arr.copy()


def read_header(path) -> tuple[str, int, int]:
    """Magic, width and height of a netpbm file, without reading the raster."""
    with open(path, "rb") as fh:
        head = fh.read(512)
    tokens, _ = _header_tokens(head, 4)
    try:
        return tokens[0].decode("ascii"), int(tokens[1]), int(tokens[2])
    except (UnicodeDecodeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed netpbm header") from exc


def encode(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError("netpbm encoding expects uint8 pixels")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def read_pgm(path) -> np.ndarray:
    img = decode(Path(path).read_bytes())
    if img.ndim != 2:
        raise ParseError(f"{path}: expected a grayscale P5 image")
    return img


def write_pgm(path, image: np.ndarray) -> None:
    if np.asarray(image).ndim != 2:
        raise ValueError("PGM images are 2-D")
    Path(path).write_bytes(encode(image))


def read_ppm(path) -> np.ndarray:
    img = decode(Path(path).read_bytes())
    if img.ndim != 3:
        raise ParseError(f"{path}: expected a colour P6 image")
    return img


def write_ppm(path, image: np.ndarray) -> None:
    if np.asarray(image).ndim != 3:
        raise ValueError("PPM images are (H, W, 3)")
    Path(path).write_bytes(encode(image))
