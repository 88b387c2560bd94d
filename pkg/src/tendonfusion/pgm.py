"""Binary PGM ("P5") reading and writing, 8- and 16-bit."""

from pathlib import Path

import numpy as np

from .errors import PgmError

_WHITESPACE = b" \t\r\n\x0b\x0c"


def _read_header(buf):
    """Parse the four header tokens, returning them and the offset of the raster."""
    if buf[:2] != b"P5":
        raise PgmError("not a binary PGM (magic P5 expected)")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(buf):
            raise PgmError("truncated PGM header")
        ch = buf[pos:pos + 1]
        if ch in (b"",):
            raise PgmError("truncated PGM header")
        if ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise PgmError("truncated PGM header")
            pos = end + 1
        elif ch in _WHITESPACE:
            pos += 1
        else:
            start = pos
            while pos < len(buf) and buf[pos:pos + 1] not in _WHITESPACE:
                pos += 1
            tok = buf[start:pos]
            if not tok.isdigit():
                raise PgmError(f"bad PGM header token {tok!r}")
            tokens.append(int(tok))
    if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
        raise PgmError("missing whitespace after maxval")
    width, height, maxval = tokens
    if width <= 0 or height <= 0:
        raise PgmError("PGM dimensions must be positive")
    if not 0 < maxval < 65536:
        raise PgmError(f"maxval {maxval} out of range")
    return width, height, maxval, pos + 1


def read_pgm_header(path):
    """Return (width, height, maxval) without reading the raster."""
    with open(path, "rb") as fh:
        head = fh.read(512)
    width, height, maxval, _ = _read_header(head)
    return width, height, maxval


def read_pgm(path):
    """Read a P5 image into a (height, width) uint8 or uint16 array."""
    buf = Path(path).read_bytes()
    width, height, maxval, offset = _read_header(buf)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    data = buf[offset:offset + need]
    if len(data) != need:
        raise PgmError(f"{path}: raster truncated ({len(data)} of {need} bytes)")
    img = np.frombuffer(data, dtype=dtype).reshape(height, width)
    if img.max(initial=0) > maxval:
        raise PgmError(f"{path}: sample exceeds maxval {maxval}")
    return img.astype(np.uint16 if maxval > 255 else np.uint8)


def write_pgm(path, image, maxval=None):
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if maxval is None:
        maxval = 65535 if image.dtype == np.uint16 else 255
    if image.size and (image.min() < 0 or image.max() > maxval):
        raise ValueError(f"pixel values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    height, width = image.shape
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(image.astype(dtype).tobytes())
