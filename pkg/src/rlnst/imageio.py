"""Image codecs: PNG (via Pillow) and binary PPM (P6, hand-rolled so tests
can pin byte-exact fixtures). Images decode to float CHW in [0, 1] and encode
by round-half-up to 8 bits.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .imageops import resize_chw


class ImageFormatError(ValueError):
    pass


def decode(path) -> np.ndarray:
    """Read a PNG or PPM file into a (3, H, W) float32 array in [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"P6":
        rgb = _decode_ppm(raw, path)
    else:
        try:
            with Image.open(path) as im:
                rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except Exception as exc:
            raise ImageFormatError(f"{path}: not a decodable PNG/PPM image ({exc})") from exc
    return (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)


def encode(img: np.ndarray, path) -> None:
    """Write a (3, H, W) array in [0, 1] as PNG or PPM, chosen by suffix."""
    path = Path(path)
    q = quantize(img)
    if path.suffix.lower() in (".ppm", ".pnm"):
        header = f"P6\n{q.shape[1]} {q.shape[0]}\n255\n".encode("ascii")
        path.write_bytes(header + q.tobytes())
    else:
        Image.fromarray(q, "RGB").save(path, format="PNG")


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-half-up to uint8 HWC."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    q = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    return q.transpose(1, 2, 0)


def _decode_ppm(raw: bytes, path) -> np.ndarray:
    # header: P6 <w> <h> <maxval> separated by whitespace/comments
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 PPM supported, got {maxval}")
    need = w * h * 3
    data = raw[pos:pos + need]
    if len(data) < need:
        raise ImageFormatError(f"{path}: PPM pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def load_resized(path, resolution: int) -> np.ndarray:
    """Decode and bilinearly resize to resolution x resolution."""
    img = decode(path)
    return resize_chw(img, resolution, resolution).astype(np.float32)
