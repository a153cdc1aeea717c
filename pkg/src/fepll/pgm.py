"""Binary PGM (P5) image I/O, 8 and 16 bit, mapped to [0, 1] floats.

16-bit samples are big-endian per the PGM convention.  Headers may carry
'#' comments.  Writing quantizes after clamping to [0, 1]; an 8-bit
write/read round trip of already-quantized data is bit-exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError

__all__ = ["image_read", "image_write", "read_mask", "read_gain"]


def _read_header_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise DataError("truncated PGM header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise DataError("unterminated PGM comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace() \
                    and data[end:end + 1] != b"#":
                end += 1
            tok = data[pos:end]
            if not tok.isdigit():
                raise DataError(f"malformed PGM header token {tok!r}")
            tokens.append(int(tok))
            pos = end
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DataError("missing whitespace after PGM header")
    return tokens, pos + 1


def image_read(path: str | Path) -> np.ndarray:
    """Read a P5 PGM as float64 in [0, 1] (values divided by maxval)."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    tokens, offset = _read_header_tokens(data[2:], 3)
    width, height, maxval = tokens
    offset += 2
    if width < 1 or height < 1:
        raise DataError(f"{path}: invalid dimensions {width}x{height}")
    if not (0 < maxval < 65536):
        raise DataError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    raster = data[offset:offset + expected]
    if len(raster) != expected:
        raise DataError(f"{path}: truncated raster "
                        f"({len(raster)} of {expected} bytes)")
    img = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return img.astype(np.float64) / maxval


def image_write(image: np.ndarray, path: str | Path, bit_depth: int = 8) -> None:
    """Clamp to [0, 1], quantize and write as P5."""
    if bit_depth not in (8, 16):
        raise DataError(f"bit_depth must be 8 or 16, got {bit_depth}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DataError("only 2-D grayscale images can be written")
    maxval = 255 if bit_depth == 8 else 65535
    q = np.rint(np.clip(image, 0.0, 1.0) * maxval).astype(np.uint16)
    height, width = image.shape
    header = f"P5\n{width} {height}\n{maxval}\n".encode()
    raster = q.astype("u1" if bit_depth == 8 else ">u2").tobytes()
    Path(path).write_bytes(header + raster)


def read_mask(path: str | Path) -> np.ndarray:
    """PGM interpreted as a binary mask: nonzero means observed."""
    return (image_read(path) > 0).astype(np.float64)


def read_gain(path: str | Path) -> np.ndarray:
    """PGM interpreted as a gain map: value / maxval."""
    return image_read(path)
