import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octmosaic.core import AffineTransform, DisplacementField, Image2D, compose_affine
from octmosaic.errors import GeometryError, MetricError
from octmosaic.mosaic import (PALETTE, Blend, OverlayMode, RegisteredField, composite,
                              diff_colormap, difference_map, render_overlay, warp_registered)
from octmosaic.phantoms import vessel_phantom

from conftest import smooth_noise


def _colours(rgb):
    flat = rgb.reshape(-1, 3)
    nongray = flat[~((flat[:, 0] == flat[:, 1]) & (flat[:, 1] == flat[:, 2]))]
    return {tuple(c) for c in nongray}


def test_composite_no_fields_is_reference(rng):
    ref = Image2D(rng.random((20, 30)))
    m = composite(ref, [])
    assert m.canvas_offset == (0, 0)
    assert np.max(np.abs(m.canvas.data - ref.data)) < 1e-12 and m.canvas.mask.all()
    assert m.per_field_masks == [] and np.all(m.overlap_count == 1)


def test_composite_identical_field_average(rng):
    ref = Image2D(rng.random((25, 25)))
    m = composite(ref, [RegisteredField(ref, AffineTransform.identity())], Blend.AVERAGE)
    assert m.canvas.shape == ref.shape
    assert np.max(np.abs(m.canvas.data - ref.data)) < 1e-9
    assert np.all(m.overlap_count == 2)


def test_composite_seam_first_wins():
    W, H, T = 80, 40, 12
    src = smooth_noise((H, W + T), sigma=5.0, seed=4)
    ref = Image2D(src.data[:, :W])
    c0 = W // 2 + T
    mov = Image2D(src.data[:, c0:c0 + W // 2])
    m = composite(ref, [RegisteredField(mov, AffineTransform.translation(c0, 0))], Blend.FIRST_WINS)
    assert m.canvas.shape == (H, W + T) and m.canvas_offset == (0, 0)
    assert np.max(np.abs(m.canvas.data - src.data)) < 1e-9
    jump = np.abs(m.canvas.data[:, W] - m.canvas.data[:, W - 1])
    natural = np.abs(np.diff(src.data, axis=1)).max()
    assert jump.max() <= natural + 0.02


def test_composite_negative_offset_and_bounding_boxes(rng):
    ref = Image2D(rng.random((30, 30)))
    mov = Image2D(rng.random((30, 30)))
    m = composite(ref, [RegisteredField(mov, AffineTransform.translation(-10, -5), label="a")])
    assert m.canvas_offset == (10, 5)
    assert m.canvas.shape == (35, 40)
    assert m.bounding_boxes() == [(0, 0, 29, 29)]
    assert m.labels == ["a"]


def test_composite_pads_for_field():
    ref = Image2D(np.full((20, 20), 0.5))
    f = DisplacementField.constant((20, 20), -3.0, 0.0)
    m = composite(ref, [RegisteredField(ref, AffineTransform.identity(), f)])
    # the moving content appears 3 px further right than the affine alone says
    assert m.canvas.shape[1] >= 23
    assert m.per_field_masks[0][:, m.canvas_offset[0] + 22].any()


def test_composite_rejects_bad_inputs(rng):
    ref = Image2D(rng.random((10, 10)))
    with pytest.raises(GeometryError):
        composite(ref, [RegisteredField(ref, AffineTransform(1, 1, 1, 1, 0, 0))])
    with pytest.raises(GeometryError):
        composite(ref, [RegisteredField(ref, AffineTransform.identity(),
                                        DisplacementField.zeros((10, 11)))])
    with pytest.raises(ValueError):
        Blend.parse("median")


def _random_fields(seed, n=3):
    r = np.random.default_rng(seed)
    ref = Image2D(r.random((40, 50)) * 0.5 + 0.25)
    fields = []
    for k in range(n):
        mask = np.ones((30, 35), bool)
        mask[r.integers(0, 5):, :r.integers(0, 4)] = False
        img = Image2D(r.random((30, 35)), mask)
        t = compose_affine(AffineTransform.translation(*r.uniform(-20, 40, 2)),
                           AffineTransform.rotation(r.uniform(-25, 25), (17, 15)))
        fields.append(RegisteredField(img, t, label=f"f{k}"))
    return ref, fields


@settings(max_examples=25)
@given(st.integers(0, 100_000), st.sampled_from(list(Blend)))
def test_mosaic_invariants(seed, blend):
    ref, fields = _random_fields(seed)
    m = composite(ref, fields, blend)
    # masks are the warped validity masks; zero coverage means masked out
    assert not m.canvas.mask[m.overlap_count == 0].any()
    assert np.array_equal(m.overlap_count,
                          m.reference_mask.astype(int) + np.sum(m.per_field_masks, axis=0))
    for f, pm in zip(fields, m.per_field_masks):
        w = warp_registered(f, m.canvas.shape, (-m.canvas_offset[0], -m.canvas_offset[1]))
        assert np.array_equal(w.mask, pm)
    # offset correctness under FirstWins
    if blend is Blend.FIRST_WINS:
        win = m.reference_window(m.canvas.data)
        assert np.array_equal(win[ref.mask], ref.data[ref.mask])
    # conservativity
    if blend is not Blend.FIRST_WINS:
        vals = [np.zeros(m.canvas.shape)]
        dx, dy = m.canvas_offset
        vals[0][dy:dy + 40, dx:dx + 50] = ref.data
        masks = [m.reference_mask] + list(m.per_field_masks)
        vals += [w.data for w in m.warped]
        lo = np.min([np.where(k, v, np.inf) for v, k in zip(vals, masks)], axis=0)
        hi = np.max([np.where(k, v, -np.inf) for v, k in zip(vals, masks)], axis=0)
        c = m.canvas.mask
        assert np.all(m.canvas.data[c] >= lo[c] - 1e-12)
        assert np.all(m.canvas.data[c] <= hi[c] + 1e-12)


@settings(max_examples=25)
@given(st.integers(0, 100_000))
def test_canvas_coverage(seed):
    ref, fields = _random_fields(seed)
    m = composite(ref, fields)
    dx, dy = m.canvas_offset
    for f in fields:
        ys, xs = np.nonzero(f.image.mask)
        # strictly interior source pixels (edge pixels sit on the raster boundary)
        inner = (xs > 0) & (ys > 0) & (xs < f.image.width - 1) & (ys < f.image.height - 1)
        p = f.affine.apply(np.column_stack([xs[inner], ys[inner]])) + [dx, dy]
        hit = np.zeros(len(p), bool)
        for ox in (0, 1):
            for oy in (0, 1):
                cx = np.floor(p[:, 0]).astype(int) + ox
                cy = np.floor(p[:, 1]).astype(int) + oy
                ok = (cx >= 0) & (cy >= 0) & (cx < m.canvas.width) & (cy < m.canvas.height)
                hit[ok] |= m.canvas.mask[cy[ok], cx[ok]]
        assert hit.all()


def test_feather_prefers_interior():
    ref = Image2D(np.zeros((20, 40)))
    mov = Image2D(np.ones((20, 40)))
    m = composite(ref, [RegisteredField(mov, AffineTransform.translation(20, 0))], Blend.FEATHER)
    row = m.canvas.data[10]
    # inside the overlap the blend ramps from reference to field
    ov = row[20:40]
    assert np.all(np.diff(ov) >= -1e-12) and ov[0] < 0.2 and ov[-1] > 0.8


# ---------------------------------------------------------------- difference maps

def test_difference_aligned_is_zero(rng):
    ref = Image2D(rng.random((20, 20)))
    m = composite(ref, [RegisteredField(ref, AffineTransform.identity())])
    d = difference_map(ref, m, 0)
    assert d.mask.all() and np.all(d.data == 0)


def test_difference_ramp_shift():
    s = 0.01
    ramp = Image2D(np.tile(np.arange(60) * s, (20, 1)))
    m = composite(ramp, [RegisteredField(ramp, AffineTransform.translation(1, 0))], Blend.FIRST_WINS)
    d = difference_map(ramp, m, 0)
    assert not d.mask[:, 0].any()
    assert np.allclose(d.data[:, 2:-2][d.mask[:, 2:-2]], s, atol=1e-12)


def test_difference_ghost_vessels():
    ref = vessel_phantom(200, seed=3)
    mis = composite(ref, [RegisteredField(ref, AffineTransform.translation(3, 2))])
    ok = composite(ref, [RegisteredField(ref, AffineTransform.identity())])
    assert difference_map(ref, mis, 0).data.max() >= 0.3
    assert difference_map(ref, ok, 0).data.max() < 0.05


def test_difference_errors(rng):
    ref = Image2D(rng.random((10, 10)))
    m = composite(ref, [RegisteredField(ref, AffineTransform.translation(50, 0))])
    with pytest.raises(MetricError):
        difference_map(ref, m, 0)
    with pytest.raises(IndexError):
        difference_map(ref, m, 1)


# ---------------------------------------------------------------- overlays

def test_contours_single_field_one_colour(rng):
    ref = Image2D(rng.random((30, 30)))
    m = composite(ref, [RegisteredField(ref, AffineTransform.translation(5, 3))])
    rgb = render_overlay(m, OverlayMode.CONTOURS)
    assert rgb.dtype == np.uint8 and rgb.shape == m.canvas.shape + (3,)
    assert _colours(rgb) == {tuple(PALETTE[0])}


def test_contours_rectangle_perimeter():
    big = Image2D(np.full((40, 50), 0.5))
    mask = np.zeros((40, 50), bool)
    mask[5:25, 10:41] = True  # 20 x 31 rectangle
    fld = Image2D(np.full((40, 50), 0.5), mask)
    m = composite(big, [RegisteredField(fld, AffineTransform.identity())])
    rgb = render_overlay(m, OverlayMode.CONTOURS)
    drawn = np.all(rgb == PALETTE[0], axis=2)
    assert drawn.sum() == 2 * 20 + 2 * 31 - 4


def test_contours_palette_cycles(rng):
    ref = Image2D(rng.random((20, 20)))
    fields = [RegisteredField(ref, AffineTransform.translation(25 * k, 0)) for k in range(10)]
    rgb = render_overlay(composite(ref, fields), OverlayMode.CONTOURS, include_reference=False)
    assert _colours(rgb) == {tuple(c) for c in PALETTE}


def test_diff_overlay_zero_is_blue(rng):
    ref = Image2D(rng.random((20, 20)))
    m = composite(ref, [RegisteredField(ref, AffineTransform.identity())])
    rgb = render_overlay(m, OverlayMode.DIFF_COLORMAP, ref, 0)
    assert np.all(rgb == [0, 0, 255])


def test_diff_colormap_endpoints():
    rgb = diff_colormap(np.array([[0.0, 0.5, 1.0]]))
    assert rgb[0, 0].tolist() == [0, 0, 255] and rgb[0, 2].tolist() == [255, 0, 0]
    assert rgb[0, 1].tolist() == [128, 0, 128]
