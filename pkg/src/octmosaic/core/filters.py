"""Smoothing, pyramid decimation and CLAHE intensity standardisation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import ParameterError, ScaleError
from .types import Image2D

MIN_LEVEL_SIZE = 4


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1D Gaussian taps with radius ``ceil(3 * sigma)``."""
    r = int(math.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_array(a: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array(a, dtype=np.float64, copy=True)
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(np.asarray(a, dtype=np.float64), k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def gaussian_smooth(image: Image2D, sigma: float) -> Image2D:
    """Separable Gaussian blur with reflect boundary; the mask is unchanged."""
    return Image2D(smooth_array(image.data, sigma), image.mask.copy())


def downsample(image: Image2D, shrink: int, presmooth_sigma: float = 0.0) -> Image2D:
    """Blur then keep every ``shrink``-th pixel.

    Raises ScaleError if either output dimension would drop below 4 pixels;
    callers building a pyramid skip that level.
    """
    if int(shrink) != shrink or shrink < 1:
        raise ParameterError(f"shrink must be a positive integer, got {shrink}")
    shrink = int(shrink)
    h, w = image.shape
    oh, ow = -(-h // shrink), -(-w // shrink)
    if min(oh, ow) < MIN_LEVEL_SIZE:
        raise ScaleError(f"shrink {shrink} of {w}x{h} gives {ow}x{oh} < {MIN_LEVEL_SIZE}")
    sm = smooth_array(image.data, presmooth_sigma)
    return Image2D(sm[::shrink, ::shrink].copy(), image.mask[::shrink, ::shrink].copy())


@dataclass
class ClaheParams:
    enabled: bool = True
    clip_limit: float = 2.0
    tiles_x: int = 8
    tiles_y: int = 8
    bins: int = 256

    def validate(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ParameterError("clahe tile counts must be >= 1")
        if not self.clip_limit > 0:
            raise ParameterError("clahe.clip_limit must be > 0")
        if self.bins < 2:
            raise ParameterError("clahe.bins must be >= 2")


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.round(np.linspace(0, n, tiles + 1)).astype(int)


def clahe(image: Image2D, clip_limit: float = 2.0, tiles_x: int = 8, tiles_y: int = 8,
          bins: int = 256) -> Image2D:
    """Contrast-limited adaptive histogram equalisation.

    ``clip_limit`` is relative to the uniform bin height (``pixels / bins``);
    ``math.inf`` disables clipping. Per-tile mappings are the normalised
    clipped CDF, blended bilinearly between tile centres. A tile whose valid
    pixels all fall into one bin has no contrast to equalise and keeps the
    identity mapping, so uniform images are fixed points up to binning.
    """
    if tiles_x < 1 or tiles_y < 1:
        raise ParameterError("tile counts must be >= 1")
    if not clip_limit > 0:
        raise ParameterError(f"clip_limit must be > 0, got {clip_limit}")
    h, w = image.shape
    if h < tiles_y or w < tiles_x:
        raise ParameterError(f"{w}x{h} image is smaller than the {tiles_x}x{tiles_y} tile grid")

    idx = np.minimum((np.clip(image.data, 0.0, 1.0) * bins).astype(np.intp), bins - 1)
    ey, ex = _tile_edges(h, tiles_y), _tile_edges(w, tiles_x)
    identity = (np.arange(bins) + 0.5) / bins
    luts = np.empty((tiles_y, tiles_x, bins))
    for i in range(tiles_y):
        for j in range(tiles_x):
            sl = (slice(ey[i], ey[i + 1]), slice(ex[j], ex[j + 1]))
            vals = idx[sl][image.mask[sl]]
            hist = np.bincount(vals, minlength=bins).astype(np.float64)
            n = vals.size
            if n == 0 or np.count_nonzero(hist) <= 1:
                luts[i, j] = identity
                continue
            if math.isfinite(clip_limit):
                limit = max(clip_limit * n / bins, 1.0)
                excess = np.maximum(hist - limit, 0.0).sum()
                hist = np.minimum(hist, limit) + excess / bins
            luts[i, j] = np.minimum(np.cumsum(hist) / n, 1.0)

    cy = (ey[:-1] + ey[1:] - 1) / 2.0
    cx = (ex[:-1] + ex[1:] - 1) / 2.0
    fy = np.interp(np.arange(h), cy, np.arange(tiles_y))
    fx = np.interp(np.arange(w), cx, np.arange(tiles_x))
    y0 = np.floor(fy).astype(np.intp)
    x0 = np.floor(fx).astype(np.intp)
    y1 = np.minimum(y0 + 1, tiles_y - 1)
    x1 = np.minimum(x0 + 1, tiles_x - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    out = ((1 - wy) * ((1 - wx) * luts[Y0, X0, idx] + wx * luts[Y0, X1, idx])
           + wy * ((1 - wx) * luts[Y1, X0, idx] + wx * luts[Y1, X1, idx]))
    return Image2D(np.clip(out, 0.0, 1.0), image.mask.copy())
