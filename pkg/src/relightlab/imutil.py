"""Small numpy image helpers shared by the renderer, augmentation, and I/O.

Images on the numpy side are (H, W) or (H, W, C) float arrays in [0, 1];
tensors use (B, C, H, W).  These helpers are pure functions and carry no
gradients.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "to_chw",
    "from_chw",
    "bilinear_resize",
    "rotate_reflect",
]


def to_chw(img: np.ndarray) -> np.ndarray:
    """(H, W[, C]) -> (C, H, W); grayscale gets a singleton channel."""
    if img.ndim == 2:
        return img[None, :, :]
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def from_chw(arr: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (H, W, C), squeezing a singleton channel."""
    if arr.shape[0] == 1:
        return arr[0]
    return np.ascontiguousarray(arr.transpose(1, 2, 0))


def _sample_bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                     reflect: bool) -> np.ndarray:
    h, w = img.shape[:2]
    if reflect:
        rows = _reflect_coord(rows, h)
        cols = _reflect_coord(cols, w)
    else:
        rows = np.clip(rows, 0.0, h - 1.0)
        cols = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0).astype(img.dtype)
    fc = (cols - c0).astype(img.dtype)
    if img.ndim == 3:
        fr = fr[..., None]
        fc = fc[..., None]
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def _reflect_coord(x: np.ndarray, n: int) -> np.ndarray:
    """Reflect continuous coordinates into [0, n-1] (edge-pixel mirror)."""
    if n == 1:
        return np.zeros_like(x)
    period = 2.0 * (n - 1)
    x = np.abs(x) % period
    return np.where(x > n - 1, period - x, x)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (H, W[, C]) with bilinear sampling at half-pixel centers."""
    h, w = img.shape[:2]
    rows = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    cols = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    rg, cg = np.meshgrid(rows, cols, indexing="ij")
    return _sample_bilinear(img, rg, cg, reflect=False)


def rotate_reflect(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center, sampling with reflection padding."""
    h, w = img.shape[:2]
    theta = np.deg2rad(degrees)
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rg, cg = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dr, dc = rg - cr, cg - cc
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_r = cr + cos_t * dr - sin_t * dc
    src_c = cc + sin_t * dr + cos_t * dc
    return _sample_bilinear(img, src_r, src_c, reflect=True)
