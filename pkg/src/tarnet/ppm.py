"""Binary PPM (P6, maxval 255) reading and writing.

Images live in memory as float arrays of shape (3, H, W) with values in
[-1, 1]; on disk each channel value v is stored as ``rint((v + 1) * 127.5)``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

_WHITESPACE = b" \t\n\r\x0b\x0c"


def quantize(img: np.ndarray) -> np.ndarray:
    q = np.rint((np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5)
    return q.astype(np.uint8)


def dequantize(q: np.ndarray, dtype=np.float32) -> np.ndarray:
    return ((2.0 * q.astype(np.float64) - 255.0) / 255.0).astype(dtype)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"PPM images must have shape (3, H, W), got {img.shape}")
    _, h, w = img.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + quantize(img).transpose(1, 2, 0).tobytes()


def save_ppm(img: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_ppm(img))


def _token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        if data[pos] in _WHITESPACE:
            pos += 1
        elif data[pos : pos + 1] == b"#":
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in _WHITESPACE and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PPM header", offset=start)
    return data[start:pos], pos


def decode_ppm(data: bytes, dtype=np.float32) -> np.ndarray:
    if data[:2] != b"P6":
        raise FormatError(f"not a binary PPM: magic {data[:2]!r}, expected b'P6'", offset=0)
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        start = pos
        tok, pos = _token(data, pos)
        if not tok.isdigit():
            raise FormatError(f"PPM {what} is not a decimal integer: {tok!r}", offset=start)
        fields.append(int(tok))
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise FormatError(f"PPM size {w}x{h} is empty", offset=pos)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", offset=pos)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise FormatError("missing whitespace after PPM header", offset=pos)
    pos += 1
    need = 3 * w * h
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated PPM payload: expected {need} bytes, found {len(payload)}", offset=pos + len(payload))
    q = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return dequantize(q, dtype)


def load_ppm(path: str | Path, dtype=np.float32) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes(), dtype)
