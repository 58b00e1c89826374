from pathlib import Path
from typing import List, Tuple

import numpy as np

from .errors import ParseError, ShapeError

MAXVAL = 255


def _to_bytes(values: np.ndarray) -> bytes:
    scaled = np.rint(np.clip(values, 0.0, 1.0) * MAXVAL)
    return scaled.astype(np.uint8).tobytes()


def encode_pgm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ShapeError(f"PGM needs an HxW or 1xHxW image, got {image.shape}")
    height, width = image.shape
    return f"P5\n{width} {height}\n{MAXVAL}\n".encode("ascii") + _to_bytes(image)


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"PPM needs a 3xHxW image, got {rgb.shape}")
    _, height, width = rgb.shape
    interleaved = rgb.transpose(1, 2, 0)
    return f"P6\n{width} {height}\n{MAXVAL}\n".encode("ascii") + _to_bytes(interleaved)


def _read_header(data: bytes) -> Tuple[str, List[int], int]:
    tokens: List[str] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ParseError("truncated netpbm header", pos)
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise ParseError("unterminated comment", pos)
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii", errors="replace"))
    if pos >= len(data):
        raise ParseError("missing raster", pos)
    magic = tokens[0]
    try:
        numbers = [int(t) for t in tokens[1:]]
    except ValueError as exc:
        raise ParseError(f"bad header numbers {tokens[1:]}", 0) from exc
    # exactly one whitespace byte separates maxval from the raster
    return magic, numbers, pos + 1


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    found, (width, height, maxval), offset = _read_header(data)
    if found != "P5":
        raise ParseError(f"expected P5, found {found}", 0)
    if maxval != MAXVAL or width < 1 or height < 1:
        raise ParseError(f"unsupported size {width}x{height} or maxval {maxval}", 0)
    expected = width * height
    raster = data[offset:]
    if len(raster) != expected:
        raise ParseError(f"raster holds {len(raster)} bytes, expected {expected}", len(data))
    values = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / MAXVAL
    return values.reshape(height, width)
