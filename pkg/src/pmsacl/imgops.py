"""Vectorised pixel-level primitives shared by augmentation, synthesis and
scoring. Images are H x W x C float arrays in [0, 1], channels last."""

from __future__ import annotations

import numpy as np


def clamp01(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def bilinear_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional (row, col) coordinates, edge-clamped.

    ``rows``/``cols`` share a shape S; returns an S x C array (S when the
    input has no channel axis).
    """
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[:2]
    r = np.clip(rows, 0.0, h - 1.0)
    c = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0)[..., None]
    fc = (c - c0)[..., None]
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    out = top * (1 - fr) + bot * fr
    return out[..., 0] if squeeze else out


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centre alignment."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    rows = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    cols = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return bilinear_sample(img, rr, cc)


def upsample_nearest(arr: np.ndarray, factor: int) -> np.ndarray:
    """Integer-factor nearest-neighbour upsample of the two leading axes."""
    return np.repeat(np.repeat(arr, factor, axis=0), factor, axis=1)


def upsample_bilinear_map(score_map: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsample of a 2-D score grid to pixel resolution."""
    return resize_bilinear(score_map.astype(np.float64), out_h, out_w)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = np.max(img, axis=-1)
    minc = np.min(img, axis=-1)
    delta = maxc - minc
    safe = np.where(delta == 0, 1.0, delta)
    hue = np.zeros_like(maxc)
    hue = np.where(maxc == r, ((g - b) / safe) % 6.0, hue)
    hue = np.where(maxc == g, (b - r) / safe + 2.0, hue)
    hue = np.where(maxc == b, (r - g) / safe + 4.0, hue)
    hue = np.where(delta == 0, 0.0, hue / 6.0)
    sat = np.where(maxc == 0, 0.0, delta / np.where(maxc == 0, 1.0, maxc))
    return np.stack([hue, sat, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices_r = np.stack([v, q, p, p, t, v])
    choices_g = np.stack([t, v, v, q, p, p])
    choices_b = np.stack([p, p, t, v, v, q])
    idx = i[None, ...]
    r = np.take_along_axis(choices_r, idx, axis=0)[0]
    g = np.take_along_axis(choices_g, idx, axis=0)[0]
    b = np.take_along_axis(choices_b, idx, axis=0)[0]
    return np.stack([r, g, b], axis=-1)


def to_greyscale(img: np.ndarray) -> np.ndarray:
    """Luma-weighted greyscale, replicated over the colour channels."""
    lum = img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    return np.repeat(lum[..., None], img.shape[-1], axis=-1)


def gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float, radius: int = 3) -> np.ndarray:
    """Separable Gaussian blur with reflect padding."""
    kern = gaussian_kernel1d(sigma, radius)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    pad = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(pad, 2 * radius + 1, axis=0)
    out = win @ kern
    pad = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(pad, 2 * radius + 1, axis=1)
    out = win @ kern
    return out[..., 0] if squeeze else out


def flood_fill_components(mask: np.ndarray) -> int:
    """Count 4-connected components of a boolean mask by explicit flood fill.

    Kept free of scipy so it can serve as the independent oracle for any
    library-backed labelling in the production paths.
    """
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    h, w = mask.shape
    count = 0
    for sr in range(h):
        for sc in range(w):
            if mask[sr, sc] and not seen[sr, sc]:
                count += 1
                stack = [(sr, sc)]
                seen[sr, sc] = True
                while stack:
                    r, c = stack.pop()
                    for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                        if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                            seen[nr, nc] = True
                            stack.append((nr, nc))
    return count
