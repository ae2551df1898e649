"""Binary PPM/PGM (8-bit) and PFM (float) image files."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def quantize(values) -> np.ndarray:
    """``[0, 1]`` floats to 8-bit codes, rounding half up."""
    v = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + quantize(rgb).tobytes())


def write_pgm(path, gray) -> None:
    gray = np.asarray(gray)
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + quantize(gray).tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated header")
        fields.append(data[start:pos])
    if fields[0] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} image, got {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported")
    pos += 1
    pixels = np.frombuffer(data[pos:pos + w * h * channels], dtype=np.uint8)
    if pixels.size != w * h * channels:
        raise ImageFormatError(f"{path}: truncated pixel data")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return pixels.reshape(shape).astype(float) / 255.0


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def write_pfm(path, values) -> None:
    """Single-channel little-endian PFM; rows are stored bottom to top."""
    v = np.asarray(values, dtype="<f4")
    h, w = v.shape
    Path(path).write_bytes(f"Pf\n{w} {h}\n-1.0\n".encode("ascii") + v[::-1].tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() != b"Pf":
        raise ImageFormatError(f"{path}: not a single-channel PFM file")
    w, h = (int(x) for x in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    v = np.frombuffer(parts[3][: w * h * 4], dtype=dtype).reshape(h, w)
    return v[::-1].astype(float)
