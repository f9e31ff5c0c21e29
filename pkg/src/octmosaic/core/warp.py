"""Pull-back resampling of images through affine maps and displacement fields."""
from __future__ import annotations

import numpy as np

from ..errors import GeometryError
from .types import AffineTransform, DisplacementField, Image2D, InterpKind, invert_affine

# coordinates this close outside the raster still count as in-bounds
_EDGE_EPS = 1e-6


def _snap(c: np.ndarray) -> np.ndarray:
    """Round coordinates that sit on the grid up to float noise."""
    r = np.round(c)
    return np.where(np.abs(c - r) <= _EDGE_EPS, r, c)


def _lerp(a, b, t):
    """Linear interpolation that is exact at both ends (t = 0 and t = 1)."""
    d = b - a
    return np.where(t < 0.5, a + t * d, b - (1.0 - t) * d)


def sample(image: Image2D, xs: np.ndarray, ys: np.ndarray,
           interp: InterpKind = InterpKind.BILINEAR, fill: float = 0.0):
    """Sample ``image`` at arbitrary (x, y) positions.

    Returns ``(values, valid)`` with the shape of ``xs``. A sample is valid
    only if every source pixel carrying nonzero weight is inside the raster
    and has ``mask`` True.
    """
    data, mask = image.data, image.mask
    h, w = data.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if interp is InterpKind.NEAREST:
        xi = np.floor(xs + 0.5)
        yi = np.floor(ys + 0.5)
        inb = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
        xi = np.where(inb, xi, 0).astype(np.intp)
        yi = np.where(inb, yi, 0).astype(np.intp)
        vals = np.where(inb, data[yi, xi], fill)
        valid = inb & mask[yi, xi]
        return vals, valid

    inb = ((xs >= -_EDGE_EPS) & (xs <= w - 1 + _EDGE_EPS)
           & (ys >= -_EDGE_EPS) & (ys <= h - 1 + _EDGE_EPS))
    x = np.clip(np.where(inb, _snap(xs), 0.0), 0.0, w - 1)
    y = np.clip(np.where(inb, _snap(ys), 0.0), 0.0, h - 1)
    x0 = np.minimum(np.floor(x), max(w - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(y), max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if w == 1:
        fx = np.zeros_like(fx)
    if h == 1:
        fy = np.zeros_like(fy)
    wx0, wy0 = 1.0 - fx, 1.0 - fy
    top = _lerp(data[y0, x0], data[y0, x1], fx)
    bot = _lerp(data[y1, x0], data[y1, x1], fx)
    v = _lerp(top, bot, fy)
    valid = (inb
             & (mask[y0, x0] | ((wx0 == 0) | (wy0 == 0)))
             & (mask[y0, x1] | ((fx == 0) | (wy0 == 0)))
             & (mask[y1, x0] | ((wx0 == 0) | (fy == 0)))
             & (mask[y1, x1] | ((fx == 0) | (fy == 0))))
    vals = np.where(inb, v, fill)
    return vals, valid


def grid(shape, origin=(0.0, 0.0)):
    """Pixel-centre coordinates ``(xs, ys)`` for a raster of ``shape``."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs + origin[0], ys + origin[1]


def warp_affine(image: Image2D, transform: AffineTransform,
                interp: InterpKind = InterpKind.BILINEAR, fill: float = 0.0,
                output_shape=None, output_origin=(0.0, 0.0)) -> Image2D:
    """Resample a moving image onto the fixed grid.

    Each output pixel ``p_f`` takes the moving intensity at
    ``invert(transform)(p_f)``. By default the output grid matches the input
    raster; ``output_shape``/``output_origin`` place it elsewhere in the
    fixed frame (output pixel (c, r) sits at fixed coordinate
    ``(c + ox, r + oy)``).
    """
    inv = invert_affine(transform)
    shape = image.shape if output_shape is None else tuple(output_shape)
    xs, ys = grid(shape, output_origin)
    mx = inv.a11 * xs + inv.a12 * ys + inv.tx
    my = inv.a21 * xs + inv.a22 * ys + inv.ty
    vals, valid = sample(image, mx, my, interp, fill)
    return Image2D(vals, valid)


def warp_field(image: Image2D, field: DisplacementField,
               interp: InterpKind = InterpKind.BILINEAR, fill: float = 0.0) -> Image2D:
    """``warped(x, y) = image(x + u, y + v)``."""
    if field.shape != image.shape:
        raise GeometryError(f"field shape {field.shape} != image shape {image.shape}")
    xs, ys = grid(image.shape)
    vals, valid = sample(image, xs + field.u, ys + field.v, interp, fill)
    return Image2D(vals, valid)
