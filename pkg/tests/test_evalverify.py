import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octmosaic.core import AffineTransform, Image2D, compose_affine, warp_affine
from octmosaic.errors import MetricError, ParameterError, ValidationError
from octmosaic.evalverify import (VerifyParams, asd, dice, evaluate_all_pairs, hd95, pair_metrics,
                                  prompt_segment, rotation_error, select_prompts, verify_mosaic,
                                  vesselness)
from octmosaic.features import Keypoints, MatchSet
from octmosaic.phantoms import ridge_image, two_ridge_phantom, vessel_phantom

from oracles import polar_angle_oracle, ssim_oracle, surface_oracle


# ---------------------------------------------------------------- rotation error

def test_rotation_error_examples():
    r15 = AffineTransform.rotation(15)
    assert rotation_error(r15, r15).delta == 0
    assert rotation_error(r15, AffineTransform.rotation(-5)).delta == pytest.approx(20, abs=1e-12)
    assert rotation_error(AffineTransform.rotation(170), AffineTransform.rotation(-170)).delta == \
        pytest.approx(20, abs=1e-9)


def test_rotation_error_with_shear_matches_svd_oracle():
    shear = AffineTransform(1, 0.1, 0, 1, 0, 0)
    est = compose_affine(AffineTransform.rotation(10), shear)
    gt = AffineTransform.rotation(10)
    d = rotation_error(est, gt).delta
    assert d < 3
    assert d == pytest.approx(abs(polar_angle_oracle(est) - 10), abs=1e-9)


def test_rotation_error_rejects_reflection():
    with pytest.raises(MetricError):
        rotation_error(AffineTransform(-1, 0, 0, 1, 0, 0), AffineTransform.identity())


@given(st.floats(-179, 179), st.floats(-179, 179), st.floats(-179, 179),
       st.floats(-0.3, 0.3), st.floats(0.7, 1.4))
def test_rotation_error_left_composition_invariance(a, b, c, sh, s):
    est = compose_affine(AffineTransform.rotation(a), AffineTransform(s, sh, 0, 1, 3, -2))
    gt = AffineTransform.rotation(b, (10, 4))
    r = AffineTransform.rotation(c, (-7, 2))
    d0 = rotation_error(est, gt).delta
    d1 = rotation_error(compose_affine(r, est), compose_affine(r, gt)).delta
    assert 0 <= d0 <= 180
    assert d1 == pytest.approx(d0, abs=1e-9)
    assert d0 == pytest.approx(abs(((polar_angle_oracle(est) - b) + 180) % 360 - 180), abs=1e-7)


# ---------------------------------------------------------------- pair metrics

def test_pair_metrics_identical(rng):
    a = Image2D(rng.random((40, 40)))
    m = pair_metrics(a, a)
    assert m.rmse == 0 and m.ssim == pytest.approx(1.0, abs=1e-12) and m.psnr == math.inf
    assert m.overlap_pixels == 1600


def test_pair_metrics_constant_offset(rng):
    a = rng.random((40, 40)) * 0.8
    m = pair_metrics(Image2D(a), Image2D(a + 0.1))
    assert m.rmse == pytest.approx(0.1, abs=1e-9)
    assert m.psnr == pytest.approx(20.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_oracle(seed):
    r = np.random.default_rng(seed)
    a = r.random((128, 128))
    b = np.clip(a + 0.2 * r.normal(size=a.shape), 0, 1)
    overlap = np.ones(a.shape, bool)
    overlap[:, :20] = False
    overlap[100:, 90:] = False
    got = pair_metrics(Image2D(a), Image2D(b), overlap).ssim
    assert got == pytest.approx(ssim_oracle(a, b, overlap), abs=1e-3)


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_metric_properties(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((24, 24)), r.random((24, 24))
    ab = pair_metrics(Image2D(a), Image2D(b))
    ba = pair_metrics(Image2D(b), Image2D(a))
    assert ab.ssim == pytest.approx(ba.ssim, abs=1e-12)
    assert ab.rmse >= 0 and -1 <= ab.ssim <= 1
    assert ab.psnr == 20 * math.log10(1 / ab.rmse)
    assert pair_metrics(Image2D(a), Image2D(a)).ssim == pytest.approx(1.0, abs=1e-12)


def test_pair_metrics_errors(rng):
    a = Image2D(rng.random((20, 20)))
    small = np.zeros((20, 20), bool)
    small[:8, :8] = True
    with pytest.raises(MetricError, match="11x11"):
        pair_metrics(a, a, small)
    with pytest.raises(MetricError):
        pair_metrics(a, a, np.zeros((20, 20), bool))


# ---------------------------------------------------------------- vesselness

def test_vesselness_constant_is_zero():
    assert np.all(vesselness(Image2D(np.full((40, 40), 0.3))).data == 0)


def test_vesselness_ridge_location():
    img = ridge_image((64, 64), [((30, 0), (30, 63))], sigma=1.0)
    v = vesselness(img).data
    rows = v[10:-10]
    assert np.all(np.abs(np.argmax(rows, axis=1) - 30) <= 1)
    off = np.abs(np.arange(64) - 30) > 8
    assert rows[:, off].max() < 0.1
    assert rows.max() > 0.5


def test_vesselness_suppresses_blobs():
    ys, xs = np.mgrid[0:64, 0:64]
    blob = 0.1 + 0.8 * np.exp(-((xs - 32) ** 2 + (ys - 32) ** 2) / (2 * 2.0 ** 2))
    assert vesselness(Image2D(blob)).data[32, 32] < 0.2


def test_vesselness_too_small():
    with pytest.raises(ParameterError):
        vesselness(Image2D(np.zeros((20, 40))))


# ---------------------------------------------------------------- prompted segmentation

@pytest.fixture(scope="module")
def ridges():
    return two_ridge_phantom(64)


def test_prompt_selects_one_ridge(ridges):
    a, b = 64 / 3, 128 / 3
    m = prompt_segment(ridges, [(a, 32)], [])
    cols = np.nonzero(m.any(axis=0))[0]
    assert m.any() and np.all(np.abs(cols - a) < 5)
    assert not m[:, int(b) - 3:int(b) + 4].any()


def test_negative_prompt_overrides(ridges):
    a = 64 / 3
    assert not prompt_segment(ridges, [(a, 32)], [(a, 20)]).any()


def test_prompt_segment_requires_positive(ridges):
    with pytest.raises(ParameterError):
        prompt_segment(ridges, [], [])


@settings(max_examples=20)
@given(st.lists(st.tuples(st.floats(0, 63), st.floats(0, 63)), min_size=1, max_size=6),
       st.tuples(st.floats(0, 63), st.floats(0, 63)),
       st.lists(st.tuples(st.floats(0, 63), st.floats(0, 63)), max_size=4),
       st.tuples(st.floats(0, 63), st.floats(0, 63)))
def test_prompt_monotonicity(pos, extra_pos, neg, extra_neg):
    img = two_ridge_phantom(64)
    base = prompt_segment(img, pos, neg)
    more = prompt_segment(img, pos + [extra_pos], neg)
    fewer = prompt_segment(img, pos, neg + [extra_neg])
    assert np.all(more >= base)
    assert np.all(fewer <= base)


def test_prompt_counts_match_direct_filter(rng):
    kps = Keypoints(rng.uniform(0, 63, (60, 2)), rng.random(60) * 0.1)
    ms = MatchSet(kps, kps, np.arange(0, 60, 3), np.arange(0, 60, 3), np.ones(20), (64, 64), (64, 64))
    overlap = np.zeros((64, 64), bool)
    overlap[:, :40] = True
    pos, neg = select_prompts(ms, kps, overlap, 0.05)
    xi = np.floor(kps.xy[:, 0] + 0.5).astype(int)
    inside = xi < 40
    assert len(pos) == int(inside[::3].sum())
    assert len(neg) == int((inside & (kps.scores <= 0.05)).sum())


# ---------------------------------------------------------------- mask metrics

def test_mask_metric_examples():
    a = np.zeros((20, 20), bool)
    a[5:12, 5:12] = True
    assert (dice(a, a), asd(a, a), hd95(a, a)) == (1.0, 0.0, 0.0)
    b = np.zeros_like(a)
    b[14:18, 14:18] = True
    assert dice(a, b) == 0.0
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0
    with pytest.raises(MetricError):
        asd(a, np.zeros_like(a))


def test_concentric_squares_oracle():
    a = np.zeros((30, 30), bool)
    b = np.zeros((30, 30), bool)
    a[10:20, 10:20] = True
    b[8:22, 8:22] = True
    ea, eh = surface_oracle(a, b)
    assert asd(a, b) == ea and hd95(a, b) == eh
    assert asd(b, a) == ea and hd95(b, a) == eh


@settings(max_examples=15)
@given(st.integers(0, 100_000))
def test_random_masks_oracle(seed):
    from scipy import ndimage
    r = np.random.default_rng(seed)
    n = int(r.integers(8, 33))
    a = ndimage.binary_opening(r.random((n, n)) > 0.4) | (r.random((n, n)) > 0.9)
    b = ndimage.binary_dilation(r.random((n, n)) > 0.8)
    if not a.any() or not b.any():
        return
    ea, eh = surface_oracle(a, b)
    assert asd(a, b) == ea and hd95(a, b) == eh
    assert dice(a, b) == dice(b, a) and asd(a, b) == asd(b, a) and hd95(a, b) == hd95(b, a)


# ---------------------------------------------------------------- verification

def _all_keypoint_matches(kps, size):
    idx = np.arange(len(kps.scores))
    return MatchSet(kps, kps, idx, idx, np.ones(len(idx)), size, size)


def _blend(ref, shifted):
    return Image2D(0.5 * (ref.data + shifted.data), ref.mask & shifted.mask)


def test_verify_identity(ridges):
    kps = Keypoints([(64 / 3, 32), (128 / 3, 32)], [1.0, 1.0])
    rep = verify_mosaic(ridges, ridges, np.ones((64, 64), bool), _all_keypoint_matches(kps, (64, 64)), kps)
    assert (rep.dice, rep.asd, rep.hd95) == (1.0, 0.0, 0.0)
    assert rep.pos_prompt_count == 2 and rep.neg_prompt_count == 0


def test_verify_ghost_vessels_on_phantom():
    from octmosaic.features import detect_keypoints
    ref = vessel_phantom(256, seed=4)
    kps = detect_keypoints(ref, 300)
    ms = _all_keypoint_matches(kps, (256, 256))
    shifted = warp_affine(ref, AffineTransform.translation(3, 0))
    overlap = ref.mask & shifted.mask
    good = verify_mosaic(ref, _blend(ref, ref), overlap, ms, kps)
    bad = verify_mosaic(ref, _blend(ref, shifted), overlap, ms, kps)
    assert good.dice - bad.dice >= 0.1


def test_verify_external_masks_and_empty_flag(ridges):
    kps = Keypoints([(64 / 3, 32)], [1.0])
    ms = _all_keypoint_matches(kps, (64, 64))
    a = np.zeros((64, 64), bool)
    a[10:20, 10:20] = True
    rep = verify_mosaic(ridges, ridges, np.ones((64, 64), bool), ms, kps, external_masks=(a, a))
    assert rep.dice == 1.0
    rep = verify_mosaic(ridges, ridges, np.ones((64, 64), bool), ms, kps,
                        external_masks=(a, np.zeros_like(a)))
    assert rep.dice == 0.0 and rep.flags and rep.asd is None


def test_verify_errors(ridges):
    kps = Keypoints([(5, 5)], [1.0])
    ms = _all_keypoint_matches(kps, (64, 64))
    ov = np.zeros((64, 64), bool)
    ov[30:, 30:] = True
    with pytest.raises(ValidationError, match="no matched feature"):
        verify_mosaic(ridges, ridges, ov, ms, kps)
    with pytest.raises(ValidationError):
        verify_mosaic(ridges, ridges, np.zeros((64, 64), bool), ms, kps)


def test_verify_params_validation():
    for bad in (dict(hysteresis_low=0.7), dict(vesselness_scales=(2.0, 1.0)),
                dict(vesselness_scales=(0.0, 1.0))):
        with pytest.raises(ParameterError):
            VerifyParams(**bad).validate()
    p = VerifyParams()
    assert p.threshold_for("imported") == 0.0009 and p.threshold_for("builtin") == 0.05
    assert VerifyParams(neg_prompt_threshold=0.2).threshold_for("imported") == 0.2


# ---------------------------------------------------------------- pair sweep

def test_all_pairs_counts_and_failures(phantom400):
    from octmosaic.pipeline import PipelineConfig
    crops = [Image2D(phantom400.data[y:y + 96, x:x + 96]) for x, y in ((100, 100), (120, 110))]
    blank = Image2D(np.zeros((96, 96)))
    cfg = PipelineConfig(use_syn=False, run_verify=False)
    t = evaluate_all_pairs(crops, cfg)
    assert len(t.rows) == 2 and {(r["fixed"], r["moving"]) for r in t.rows} == \
        {("field_00", "field_01"), ("field_01", "field_00")}
    t = evaluate_all_pairs(crops + [blank], cfg)
    assert len(t.rows) == 6
    assert all(r["fixed"] != r["moving"] for r in t.rows)
    failed = [r for r in t.rows if r["status"] == "failed"]
    assert len(failed) == 4 and all(r["reason"] for r in failed)
    assert t.aggregate["pairs"] == 6 and t.aggregate["ok"] == 2
    assert t.to_csv().count("\n") == 7
    with pytest.raises(ParameterError):
        evaluate_all_pairs(crops[:1])
