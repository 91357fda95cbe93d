"""Plain-numpy raster helpers shared by the losses and the codecs."""

from __future__ import annotations

import numpy as np


def resize_bilinear(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2-D plane (half-pixel-centered sampling)."""
    h, w = plane.shape
    if (h, w) == (out_h, out_w):
        return plane.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    p00 = plane[np.ix_(y0, x0)]
    p01 = plane[np.ix_(y0, x1)]
    p10 = plane[np.ix_(y1, x0)]
    p11 = plane[np.ix_(y1, x1)]
    return ((1 - wy) * (1 - wx) * p00 + (1 - wy) * wx * p01
            + wy * (1 - wx) * p10 + wy * wx * p11)


def resize_chw(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return np.stack([resize_bilinear(c, out_h, out_w) for c in img])


def gaussian_kernel(size: int, extent: int) -> np.ndarray:
    """1-D kernel for a blur of nominal size `size` (sigma = size/6),
    truncated so reflection padding stays valid for the given extent."""
    radius = min(size // 2, extent - 1)
    sigma = size / 6.0
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(plane: np.ndarray, size: int) -> np.ndarray:
    """Separable Gaussian blur with reflect boundaries."""
    out = plane.astype(np.float64)
    for axis in (0, 1):
        k = gaussian_kernel(size, plane.shape[axis])
        radius = (len(k) - 1) // 2
        if radius == 0:
            continue
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(i, i + plane.shape[axis])
            acc += kv * padded[tuple(sl)]
        out = acc
    return out


def pad_to_multiple(img: np.ndarray, multiple: int) -> tuple[np.ndarray, int, int]:
    """Reflect-pad a CHW image on the bottom/right up to a size multiple.

    Returns (padded, orig_h, orig_w) so the caller can crop back.
    """
    _, h, w = img.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img, h, w
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect"), h, w
