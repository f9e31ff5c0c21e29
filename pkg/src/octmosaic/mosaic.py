"""Compositing registered fields onto an expanded canvas, plus overlays.

Every moving field is registered straight to the reference (star layout).
Canvas pixel ``X`` corresponds to reference-frame point ``x = X - offset``;
a moving field contributes ``moving(A^-1 (x + F(x)))`` where ``A`` is its
affine map and ``F`` its optional refinement field on the reference grid.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import AffineTransform, DisplacementField, Image2D, invert_affine, sample
from .errors import GeometryError, MetricError

PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
], dtype=np.uint8)


class Blend(enum.Enum):
    AVERAGE = "average"
    FEATHER = "feather"
    FIRST_WINS = "first_wins"

    @classmethod
    def parse(cls, name) -> "Blend":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        for b in cls:
            if b.value == key or b.name.lower() == key or b.value.replace("_", "") == key:
                return b
        raise ValueError(f"unknown blend mode {name!r}; expected average, feather or first_wins")


class OverlayMode(enum.Enum):
    CONTOURS = "contours"
    DIFF_COLORMAP = "diff"


@dataclass
class RegisteredField:
    image: Image2D
    affine: AffineTransform
    field: DisplacementField | None = None
    label: str = ""


@dataclass
class MosaicResult:
    """Composite on the canvas; ``canvas_offset`` places the reference origin."""

    canvas: Image2D
    canvas_offset: tuple[int, int]
    per_field_masks: list
    overlap_count: np.ndarray
    reference_mask: np.ndarray = None
    warped: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    reference_shape: tuple = (0, 0)
    blend: Blend = Blend.FEATHER

    def reference_window(self, a: np.ndarray) -> np.ndarray:
        """Crop a canvas-sized array to the reference raster."""
        dx, dy = self.canvas_offset
        h, w = self.reference_shape
        return a[dy:dy + h, dx:dx + w]

    def bounding_boxes(self) -> list:
        """``(x0, y0, x1, y1)`` canvas boxes of each field mask, inclusive."""
        out = []
        for m in self.per_field_masks:
            ys, xs = np.nonzero(m)
            out.append(None if xs.size == 0 else
                       (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())))
        return out


def _field_extent(f: RegisteredField):
    h, w = f.image.shape
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    pts = f.affine.apply(corners)
    pad = f.field.max_magnitude() if f.field is not None else 0.0
    return pts.min(axis=0) - pad, pts.max(axis=0) + pad


def _canvas_geometry(reference: Image2D, fields):
    h, w = reference.shape
    lo = np.array([0.0, 0.0])
    hi = np.array([w - 1.0, h - 1.0])
    for f in fields:
        a, b = _field_extent(f)
        lo = np.minimum(lo, a)
        hi = np.maximum(hi, b)
    x0, y0 = math.floor(lo[0] + 1e-9), math.floor(lo[1] + 1e-9)
    x1, y1 = math.ceil(hi[0] - 1e-9), math.ceil(hi[1] - 1e-9)
    return (-x0, -y0), (y1 - y0 + 1, x1 - x0 + 1)


def _source_coords(f: RegisteredField, xs, ys, ref_shape):
    """Moving-frame coordinates for reference-frame points ``(xs, ys)``."""
    if f.field is not None:
        if f.field.shape != tuple(ref_shape):
            raise GeometryError(
                f"field {f.label!r}: displacement grid {f.field.shape} != reference {ref_shape}")
        # edge-clamped lookup; the field is only defined on the reference grid
        coords = [ys, xs]
        xs = xs + ndimage.map_coordinates(f.field.u, coords, order=1, mode="nearest")
        ys = ys + ndimage.map_coordinates(f.field.v, coords, order=1, mode="nearest")
    inv = invert_affine(f.affine)
    return inv.a11 * xs + inv.a12 * ys + inv.tx, inv.a21 * xs + inv.a22 * ys + inv.ty


def warp_registered(f: RegisteredField, shape, origin=(0.0, 0.0)) -> Image2D:
    """Resample a registered field onto a reference-frame raster of ``shape``."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ref_shape = f.field.shape if f.field is not None else shape
    mx, my = _source_coords(f, xs + origin[0], ys + origin[1], ref_shape)
    v, ok = sample(f.image, mx, my)
    return Image2D(np.where(ok, v, 0.0), ok)


def _border_distance(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1, constant_values=False)
    return ndimage.distance_transform_edt(padded)[1:-1, 1:-1]


def composite(reference: Image2D, fields=(), blend=Blend.FEATHER) -> MosaicResult:
    """Warp every field into a shared canvas and blend.

    ``overlap_count`` counts contributing sources, the reference included.
    """
    blend = Blend.parse(blend)
    fields = list(fields)
    for f in fields:
        if not f.affine.is_acceptable():
            raise GeometryError(f"field {f.label!r}: transform not invertible")
    (dx, dy), shape = _canvas_geometry(reference, fields)
    H, W = shape
    rh, rw = reference.shape

    ref_mask = np.zeros(shape, bool)
    ref_vals = np.zeros(shape)
    ref_mask[dy:dy + rh, dx:dx + rw] = reference.mask
    ref_vals[dy:dy + rh, dx:dx + rw] = reference.data

    Ys, Xs = np.mgrid[0:H, 0:W].astype(np.float64)
    xs, ys = Xs - dx, Ys - dy
    vals = [ref_vals]
    masks = [ref_mask]
    weights = []
    if blend is Blend.FEATHER:
        wref = np.zeros(shape)
        wref[dy:dy + rh, dx:dx + rw] = _border_distance(reference.mask)
        weights.append(wref)
    warped = []
    for f in fields:
        mx, my = _source_coords(f, xs, ys, reference.shape)
        v, ok = sample(f.image, mx, my)
        v = np.where(ok, v, 0.0)
        vals.append(v)
        masks.append(ok)
        warped.append(Image2D(v, ok))
        if blend is Blend.FEATHER:
            wd, _ = sample(Image2D(_border_distance(f.image.mask)), mx, my)
            weights.append(np.where(ok, wd, 0.0))

    count = np.sum(masks, axis=0).astype(np.int32)
    any_mask = count > 0
    if blend is Blend.FIRST_WINS:
        out = np.zeros(shape)
        taken = np.zeros(shape, bool)
        for v, m in zip(vals, masks):
            put = m & ~taken
            out[put] = v[put]
            taken |= m
    else:
        num = np.zeros(shape)
        den = np.zeros(shape)
        for k, (v, m) in enumerate(zip(vals, masks)):
            wk = m.astype(np.float64) if blend is Blend.AVERAGE else np.where(m, weights[k], 0.0)
            num += wk * v
            den += wk
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        if blend is Blend.FEATHER:
            # a contributing pixel whose interpolated weight vanished falls back to averaging
            lost = any_mask & (den <= 0)
            if lost.any():
                s = np.sum([np.where(m, v, 0.0) for v, m in zip(vals, masks)], axis=0)
                out[lost] = s[lost] / count[lost]
    return MosaicResult(Image2D(out, any_mask), (dx, dy), [w.mask for w in warped], count,
                        ref_mask, warped, [f.label for f in fields], (rh, rw), blend)


def difference_map(reference: Image2D, mosaic: MosaicResult, field_index: int) -> Image2D:
    """``|reference - field|`` on the reference grid where both are observed.

    The indexed field's own warped contribution is compared, so the map is
    unaffected by how overlaps were blended.
    """
    if not 0 <= field_index < len(mosaic.warped):
        raise IndexError(f"field_index {field_index} out of range for {len(mosaic.warped)} fields")
    w = mosaic.warped[field_index]
    fv = mosaic.reference_window(w.data)
    fm = mosaic.reference_window(w.mask)
    m = reference.mask & fm
    if not m.any():
        raise MetricError(f"field {field_index} does not overlap the reference")
    return Image2D(np.where(m, np.abs(reference.data - fv), 0.0), m)


def _boundary(mask: np.ndarray) -> np.ndarray:
    er = ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool), border_value=0)
    return mask & ~er


def _gray_rgb(img: Image2D) -> np.ndarray:
    g = np.clip(np.where(img.mask, img.data, 0.0), 0.0, 1.0)
    g = np.floor(g * 255.0 + 0.5).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=2)


def diff_colormap(delta: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Linear blue-to-red ramp over ``[0, vmax]``."""
    vmax = float(np.max(delta)) if vmax is None else float(vmax)
    t = np.zeros_like(delta, dtype=np.float64) if vmax <= 0 else np.clip(delta / vmax, 0.0, 1.0)
    rgb = np.zeros(delta.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = np.floor(255.0 * t + 0.5).astype(np.uint8)
    rgb[..., 2] = np.floor(255.0 * (1.0 - t) + 0.5).astype(np.uint8)
    return rgb


def render_overlay(mosaic: MosaicResult, mode=OverlayMode.CONTOURS, reference: Image2D | None = None,
                   field_index: int = 0, include_reference: bool = False) -> np.ndarray:
    """8-bit RGB rendering of the canvas.

    ``CONTOURS`` draws each field's mask boundary in its palette colour
    (optionally the reference first). ``DIFF_COLORMAP`` paints the
    difference map of ``field_index`` against ``reference`` over the
    overlap.
    """
    if isinstance(mode, str):
        mode = OverlayMode(mode)
    rgb = _gray_rgb(mosaic.canvas)
    if mode is OverlayMode.CONTOURS:
        masks = ([mosaic.reference_mask] if include_reference else []) + list(mosaic.per_field_masks)
        for k, m in enumerate(masks):
            rgb[_boundary(m)] = PALETTE[k % len(PALETTE)]
        return rgb
    if reference is None:
        raise ValueError("DIFF_COLORMAP needs the reference image")
    d = difference_map(reference, mosaic, field_index)
    cmap = diff_colormap(np.where(d.mask, d.data, 0.0), float(d.data[d.mask].max()))
    view = mosaic.reference_window(rgb)
    view[d.mask] = cmap[d.mask]
    return rgb
