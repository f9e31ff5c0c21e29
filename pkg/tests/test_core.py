import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from octmosaic.core import (AffineTransform, DisplacementField, Image2D, InterpKind, clahe,
                            compose_affine, downsample, gaussian_smooth, invert_affine,
                            load_image, save_image, warp_affine, warp_field)
from octmosaic.errors import GeometryError, LoadError, ParameterError, ScaleError

from conftest import smooth_noise


def _write_pgm(path, arr, maxval):
    h, w = arr.shape
    body = arr.astype(">u2").tobytes() if maxval == 65535 else arr.astype(np.uint8).tobytes()
    path.write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + body)


def _write_png16(path, arr):
    """Minimal 16-bit grayscale PNG encoder, independent of Pillow."""
    h, w = arr.shape
    raw = b"".join(b"\x00" + arr[r].astype(">u2").tobytes() for r in range(h))

    def chunk(tag, data):
        return (struct.pack(">I", len(data)) + tag + data
                + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF))

    ihdr = struct.pack(">IIBBBBB", w, h, 16, 0, 0, 0, 0)
    path.write_bytes(b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
                     + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b""))


# ---------------------------------------------------------------- io

def test_load_pgm_extremes(tmp_path):
    p = tmp_path / "a.pgm"
    _write_pgm(p, np.full((4, 5), 255), 255)
    img = load_image(p)
    assert img.shape == (4, 5) and np.all(img.data == 1.0) and img.mask.all()
    _write_pgm(p, np.zeros((4, 5)), 255)
    assert np.all(load_image(p).data == 0.0)


def test_load_png16_scaling(tmp_path):
    p = tmp_path / "a.png"
    _write_png16(p, np.full((3, 3), 32768, dtype=np.uint16))
    img = load_image(p)
    assert np.allclose(img.data, 32768 / 65535, atol=0, rtol=1e-15)


def test_load_pgm16(tmp_path):
    p = tmp_path / "b.pgm"
    arr = np.arange(12, dtype=np.uint16).reshape(3, 4) * 5000
    _write_pgm(p, arr, 65535)
    assert np.array_equal(load_image(p).data, arr / 65535.0)


@pytest.mark.parametrize("payload", [b"hello", b"P5\n2 2\n1000\n\x00\x00\x00\x00",
                                     b"P5\n4 4\n255\n\x00"])
def test_load_rejects_bad_files(tmp_path, payload):
    p = tmp_path / "bad.pgm"
    p.write_bytes(payload)
    with pytest.raises(LoadError):
        load_image(p)


def test_load_rejects_rgb_png(tmp_path):
    from PIL import Image
    p = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(p)
    with pytest.raises(LoadError, match="rgb.png"):
        load_image(p)


def test_load_missing_file(tmp_path):
    with pytest.raises(LoadError):
        load_image(tmp_path / "nope.png")


@pytest.mark.parametrize("ext", [".png", ".pgm"])
def test_save_constant_8bit(tmp_path, ext):
    p = tmp_path / f"c{ext}"
    save_image(Image2D(np.full((5, 6), 0.5)), p, 8)
    assert np.max(np.abs(load_image(p).data - 0.5)) <= 1 / 255


@pytest.mark.parametrize("ext", [".png", ".pgm"])
def test_save_16bit_roundtrip(tmp_path, ext, rng):
    p = tmp_path / f"c{ext}"
    x = rng.random((7, 9))
    save_image(Image2D(x), p, 16)
    assert np.max(np.abs(load_image(p).data - x)) <= 1 / 65535


@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 12))
def test_save_8bit_roundtrip_property(tmp_path_factory, seed, h, w):
    x = np.random.default_rng(seed).random((h, w))
    p = tmp_path_factory.mktemp("rt") / "x.png"
    save_image(Image2D(x), p, 8)
    assert np.max(np.abs(load_image(p).data - x)) <= 1 / 255 + 1e-12


def test_save_bad_bit_depth(tmp_path):
    with pytest.raises(ParameterError):
        save_image(Image2D(np.zeros((2, 2))), tmp_path / "x.png", 12)


# ---------------------------------------------------------------- clahe

def test_clahe_constant_fixed_point():
    img = Image2D(np.full((64, 64), 0.37))
    out = clahe(img)
    assert np.ptp(out.data) == 0
    assert abs(out.data[0, 0] - 0.37) <= 1 / 256


def _global_equalization(data, bins=256):
    idx = np.minimum((data * bins).astype(int), bins - 1)
    cdf = np.cumsum(np.bincount(idx.ravel(), minlength=bins)) / idx.size
    return cdf[idx]


def test_clahe_global_equalization_matches_oracle():
    img = smooth_noise((128, 128), sigma=2.0, seed=3)
    out = clahe(img, clip_limit=math.inf, tiles_x=1, tiles_y=1)
    oracle = _global_equalization(img.data)
    assert np.allclose(out.data, oracle, atol=1e-12)
    # approximately uniform: KS distance to U(0, 1)
    v = np.sort(out.data.ravel())
    emp = np.arange(1, v.size + 1) / v.size
    assert np.max(np.abs(emp - v)) < 0.05


def test_clahe_two_level():
    data = np.where(np.arange(64)[None, :] < 32, 0.2, 0.8) * np.ones((64, 1))
    out = clahe(Image2D(data), clip_limit=math.inf, tiles_x=1, tiles_y=1)
    assert np.allclose(out.data[data == 0.2], 0.5)
    assert np.allclose(out.data[data == 0.8], 1.0)


def test_clahe_range_and_determinism(phantom400):
    a = clahe(phantom400)
    b = clahe(phantom400)
    assert np.array_equal(a.data, b.data)
    assert a.data.min() >= 0 and a.data.max() <= 1


def test_clahe_errors():
    with pytest.raises(ParameterError):
        clahe(Image2D(np.zeros((4, 4))), tiles_x=8, tiles_y=8)
    with pytest.raises(ParameterError):
        clahe(Image2D(np.zeros((32, 32))), clip_limit=0)
    with pytest.raises(ParameterError):
        clahe(Image2D(np.zeros((32, 32))), tiles_x=0)


# ---------------------------------------------------------------- warping

def test_warp_identity_bit_exact(rng):
    img = Image2D(rng.random((9, 11)), rng.random((9, 11)) > 0.2)
    out = warp_affine(img, AffineTransform.identity())
    assert np.array_equal(out.data, img.data) and np.array_equal(out.mask, img.mask)


def test_warp_integer_translation_nearest(rng):
    img = Image2D(rng.random((6, 10)))
    out = warp_affine(img, AffineTransform.translation(3, 0), InterpKind.NEAREST, fill=-1)
    assert np.array_equal(out.data[:, 3:], img.data[:, :-3])
    assert not out.mask[:, :3].any() and out.mask[:, 3:].all()
    assert np.all(out.data[:, :3] == -1)


def test_warp_rotation90_matches_bruteforce():
    pat = np.arange(25, dtype=float).reshape(5, 5) / 24.0
    pat[0, 1] = 0.9  # break symmetry further
    t = AffineTransform.rotation(90.0, (2.0, 2.0))
    out = warp_affine(Image2D(pat), t, InterpKind.NEAREST)
    inv = np.linalg.inv(np.vstack([t.matrix, [0, 0, 1]]))
    oracle = np.zeros_like(pat)
    for r in range(5):
        for c in range(5):
            x, y, _ = inv @ np.array([c, r, 1.0])
            xi, yi = int(round(x)), int(round(y))
            oracle[r, c] = pat[yi, xi]
    assert np.array_equal(out.data, oracle)
    assert out.mask.all()


def test_warp_singular_transform():
    with pytest.raises(GeometryError):
        warp_affine(Image2D(np.zeros((4, 4))), AffineTransform(1, 2, 2, 4, 0, 0))


def test_warp_field_zero_is_identity(rng):
    img = Image2D(rng.random((8, 8)))
    out = warp_field(img, DisplacementField.zeros((8, 8)))
    assert np.array_equal(out.data, img.data) and out.mask.all()


def test_warp_field_constant_matches_translation(rng):
    # pull-back: warped(x) = I(x + 1) is the affine that maps p -> p - 1
    img = Image2D(rng.random((8, 10)))
    a = warp_field(img, DisplacementField.constant((8, 10), 1.0, 0.0))
    b = warp_affine(img, AffineTransform.translation(-1.0, 0.0))
    assert np.allclose(a.data, b.data) and np.array_equal(a.mask, b.mask)
    assert np.array_equal(a.data[:, :-1], img.data[:, 1:])


def _bilinear_oracle(data, x, y):
    h, w = data.shape
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        return None
    x0, y0 = min(int(math.floor(x)), w - 2), min(int(math.floor(y)), h - 2)
    fx, fy = x - x0, y - y0
    return ((1 - fy) * ((1 - fx) * data[y0, x0] + fx * data[y0, x0 + 1])
            + fy * ((1 - fx) * data[y0 + 1, x0] + fx * data[y0 + 1, x0 + 1]))


def test_warp_field_matches_pointwise_oracle(rng):
    data = rng.random((16, 16))
    yy, xx = np.mgrid[0:16, 0:16]
    u = 1.5 * np.sin(xx / 5.0) * np.cos(yy / 7.0)
    v = 1.2 * np.cos(xx / 4.0 + 0.3)
    out = warp_field(Image2D(data), DisplacementField(u, v))
    for r in range(16):
        for c in range(16):
            ref = _bilinear_oracle(data, c + u[r, c], r + v[r, c])
            if ref is None:
                assert not out.mask[r, c]
            else:
                assert out.mask[r, c] and abs(out.data[r, c] - ref) < 1e-6


def test_warp_field_shape_mismatch():
    with pytest.raises(GeometryError):
        warp_field(Image2D(np.zeros((4, 4))), DisplacementField.zeros((4, 5)))


# ---------------------------------------------------------------- affine algebra

def test_compose_identity_and_inverse_rotations():
    t = AffineTransform(1.1, 0.2, -0.1, 0.9, 3, 4)
    assert np.allclose(compose_affine(AffineTransform.identity(), t).matrix, t.matrix)
    r = compose_affine(AffineTransform.rotation(10), AffineTransform.rotation(-10))
    assert np.max(np.abs(r.matrix - AffineTransform.identity().matrix)) < 1e-10


def test_compose_translate_scale():
    c = compose_affine(AffineTransform.translation(1, 2), AffineTransform.scaling(2))
    assert np.allclose(c.apply([[0, 0]]), [[1, 2]])
    assert np.allclose(c.apply([[1, 1]]), [[3, 4]])


def test_invert_simple():
    assert np.allclose(invert_affine(AffineTransform.identity()).matrix,
                       AffineTransform.identity().matrix)
    inv = invert_affine(AffineTransform.translation(3, -4))
    assert np.allclose(inv.matrix, AffineTransform.translation(-3, 4).matrix)
    with pytest.raises(GeometryError):
        invert_affine(AffineTransform(1, 1, 1, 1, 0, 0))


_aff = st.tuples(*[st.floats(-1, 1)] * 4, st.floats(-50, 50), st.floats(-50, 50))


@given(_aff)
def test_invert_property(p):
    a = AffineTransform(1 + 0.3 * p[0], 0.3 * p[1], 0.3 * p[2], 1 + 0.3 * p[3], p[4], p[5])
    c = compose_affine(a, invert_affine(a))
    assert np.max(np.abs(c.matrix - AffineTransform.identity().matrix)) < 1e-10


@given(_aff, _aff, _aff)
def test_compose_associative(p, q, r):
    a, b, c = (AffineTransform(1 + 0.3 * v[0], 0.3 * v[1], 0.3 * v[2], 1 + 0.3 * v[3], v[4], v[5])
               for v in (p, q, r))
    lhs = compose_affine(compose_affine(a, b), c)
    rhs = compose_affine(a, compose_affine(b, c))
    assert np.allclose(lhs.matrix, rhs.matrix, atol=1e-9)


# ---------------------------------------------------------------- smoothing / pyramids

def test_gaussian_sigma0_identity(rng):
    img = Image2D(rng.random((6, 7)))
    assert np.array_equal(gaussian_smooth(img, 0).data, img.data)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 3.7])
def test_gaussian_constant(sigma):
    out = gaussian_smooth(Image2D(np.full((20, 25), 0.42)), sigma)
    assert np.allclose(out.data, 0.42, atol=1e-12)


def test_gaussian_impulse_centre():
    d = np.zeros((21, 21))
    d[10, 10] = 1.0
    out = gaussian_smooth(Image2D(d), 1.0)
    k1 = 1.0 / sum(math.exp(-0.5 * i * i) for i in range(-3, 4))
    assert abs(out.data[10, 10] - k1 * k1) < 1e-6


@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_gaussian_never_expands_range(seed, sigma):
    x = np.random.default_rng(seed).random((15, 17))
    out = gaussian_smooth(Image2D(x), sigma).data
    assert out.min() >= x.min() - 1e-9 and out.max() <= x.max() + 1e-9


def test_downsample_cases(rng):
    img = Image2D(rng.random((8, 8)))
    assert np.array_equal(downsample(img, 1, 0).data, img.data)
    assert downsample(img, 2, 1.0).shape == (4, 4)
    assert downsample(Image2D(rng.random((9, 13))), 2).shape == (5, 7)
    c = downsample(Image2D(np.full((40, 40), 0.3)), 4, 2.0)
    assert np.allclose(c.data, 0.3)
    with pytest.raises(ScaleError):
        downsample(img, 4)


# ---------------------------------------------------------------- invariants

def test_warp_composition_invariant():
    img = smooth_noise((80, 80), sigma=4.0, seed=7)
    a = compose_affine(AffineTransform.rotation(6, (40, 40)), AffineTransform.translation(2.3, -1.1))
    b = AffineTransform(1.03, 0.04, -0.02, 0.98, -1.7, 2.2)
    two = warp_affine(warp_affine(img, a), b)
    one = warp_affine(img, compose_affine(b, a))
    both = two.mask & one.mask
    assert both.sum() > 3000
    assert np.max(np.abs(two.data[both] - one.data[both])) < 0.02


@given(st.integers(0, 10_000), st.floats(-30, 30), st.floats(-5, 5), st.floats(-5, 5))
def test_mask_soundness(seed, theta, tx, ty):
    r = np.random.default_rng(seed)
    mask = r.random((20, 20)) > 0.3
    data = np.where(mask, r.random((20, 20)) * 0.5, 100.0)  # invalid pixels are poisoned
    t = compose_affine(AffineTransform.translation(tx, ty), AffineTransform.rotation(theta, (10, 10)))
    for interp in (InterpKind.BILINEAR, InterpKind.NEAREST):
        out = warp_affine(Image2D(data, mask), t, interp)
        assert np.all(out.data[out.mask] <= 0.5 + 1e-12)


def test_operations_deterministic(phantom400):
    t = AffineTransform.rotation(7.5, (200, 200))
    assert np.array_equal(warp_affine(phantom400, t).data, warp_affine(phantom400, t).data)
    assert np.array_equal(gaussian_smooth(phantom400, 2.0).data,
                          gaussian_smooth(phantom400, 2.0).data)
