import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octmosaic.core import AffineTransform, Image2D, warp_affine, warp_field
from octmosaic.deform import invert_field
from octmosaic.errors import GenerationError, ParameterError, ValidationError
from octmosaic.evalverify import rotation_angle
from octmosaic.synthbench import (SynthSpec, elastic_field, export_dataset, generate_subfields,
                                  layout_offsets, load_dataset, minimum_source_size,
                                  overlap_fraction)


@pytest.fixture(scope="module")
def dataset(phantom400):
    return generate_subfields(phantom400, SynthSpec(seed=3))


def _same(a, b):
    assert np.array_equal(a.reference.data, b.reference.data)
    for f, g in zip(a.fields, b.fields, strict=True):
        assert np.array_equal(f.image.data, g.image.data)
        assert np.array_equal(f.image.mask, g.image.mask)
        assert f.gt_affine == g.gt_affine
        assert np.array_equal(f.gt_field.u, g.gt_field.u) and np.array_equal(f.gt_field.v, g.gt_field.v)


def test_zero_ranges_give_pure_crops(phantom400):
    spec = SynthSpec(rotation_range=0, translation_range=0, elastic_magnitude=0)
    ds = generate_subfields(phantom400, spec)
    rx, ry = ds.reference_origin
    for f in ds.fields:
        cx, cy = f.crop_origin
        assert np.array_equal(f.image.data, phantom400.data[cy:cy + 256, cx:cx + 256])
        assert f.image.mask.all()
        assert f.gt_affine == AffineTransform.translation(cx - rx, cy - ry)
        assert np.all(f.gt_field.u == 0) and np.all(f.gt_field.v == 0)


def test_generation_is_deterministic(phantom400, dataset):
    _same(dataset, generate_subfields(phantom400, SynthSpec(seed=3)))


def test_defaults_respect_declared_ranges(dataset):
    assert len(dataset.fields) == 4 and dataset.reference.shape == (256, 256)
    for f in dataset.fields:
        r = f.rigid(dataset.reference_origin)
        assert -20 <= f.rotation_deg <= 20
        assert rotation_angle(r) == pytest.approx(f.rotation_deg, abs=1e-9)
        assert all(-10 <= t <= 10 for t in f.translation)
        assert f.gt_field.max_magnitude() <= 5.0


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.floats(0, 30), st.floats(0, 15), st.floats(0, 6))
def test_sampled_parameters_within_ranges(seed, rot, trans, mag):
    spec = SynthSpec(n_fields=3, crop_size=32, rotation_range=rot, translation_range=trans,
                     elastic_magnitude=mag, seed=seed)
    src = Image2D(np.random.default_rng(0).random((60, 60)))
    ds = generate_subfields(src, spec)
    for f in ds.fields:
        assert abs(f.rotation_deg) <= rot
        assert max(abs(t) for t in f.translation) <= trans
        assert f.gt_field.max_magnitude() <= mag


def test_ground_truth_soundness(phantom400, dataset):
    c = 256
    for f in dataset.fields:
        rigid = f.rigid(dataset.reference_origin)
        # distorted(y) = clean(rigid(y + e(y)))  =>  clean(z) = distorted(w + e^-1(w)), w = rigid^-1(z)
        unfield = warp_field(f.image, invert_field(f.gt_field, 30))
        clean = warp_affine(unfield, rigid)
        cx, cy = f.crop_origin
        truth = phantom400.data[cy:cy + c, cx:cx + c]
        m = clean.mask
        assert m.mean() > 0.5
        assert np.mean(np.abs(clean.data[m] - truth[m])) < 0.02


def test_layout_and_overlap_guarantee():
    offs = layout_offsets(5, 256, 0.23)
    assert sorted(offs) == sorted([(59, 59), (-59, 59), (-59, -59), (59, -59)])
    for n in range(2, 12):
        for o in layout_offsets(n, 256, 0.23):
            assert overlap_fraction(o, 256) >= 0.25
    assert len(layout_offsets(9, 256, 0.23)) == 8


def test_minimum_size_error():
    src = Image2D(np.zeros((300, 300)))
    need = minimum_source_size(SynthSpec())
    with pytest.raises(GenerationError, match=f"{need}x{need}"):
        generate_subfields(src, SynthSpec())


def test_spec_validation():
    for bad in (dict(n_fields=1), dict(rotation_range=-1), dict(elastic_grid=1),
                dict(crop_size=8), dict(scale_range=1.5)):
        with pytest.raises(ParameterError):
            SynthSpec(**bad).validate()


def test_elastic_field_clipped_by_norm():
    f = elastic_field(np.random.default_rng(0), (64, 64), 5.0, 4)
    assert 3.0 < f.max_magnitude() <= 5.0
    assert np.array_equal(f.u, f.u.astype(np.float32))


def test_optional_scale_and_noise(phantom400):
    ds = generate_subfields(phantom400, SynthSpec(scale_range=0.1, noise_sigma=0.02, seed=1))
    dets = [f.gt_affine.det for f in ds.fields]
    assert any(abs(d - 1) > 1e-3 for d in dets)
    assert all(0.81 - 1e-9 <= d <= 1.21 + 1e-9 for d in dets)


# ---------------------------------------------------------------- export

def test_export_file_count_and_roundtrip(tmp_path, dataset):
    export_dataset(dataset, tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "manifest.txt" in names and "reference.png" in names
    for suffix in (".png", ".affine", ".field"):
        assert sum(n.startswith("field_") and n.endswith(suffix) and "_mask" not in n
                   for n in names) == 4
    back = load_dataset(tmp_path)
    assert back.spec == dataset.spec and back.reference_origin == dataset.reference_origin
    for f, g in zip(dataset.fields, back.fields):
        assert np.allclose(f.gt_affine.params(), g.gt_affine.params(), atol=1e-9, rtol=0)
        assert np.array_equal(f.gt_field.u, g.gt_field.u) and np.array_equal(f.gt_field.v, g.gt_field.v)
        assert np.array_equal(f.image.mask, g.image.mask)
        assert np.max(np.abs(f.image.data - g.image.data)) <= 0.5 / 65535 + 1e-12
        assert f.crop_origin == g.crop_origin and f.rotation_deg == g.rotation_deg


def test_manifest_seed_replay(tmp_path, phantom400, dataset):
    export_dataset(dataset, tmp_path / "a")
    spec = load_dataset(tmp_path / "a").spec
    export_dataset(generate_subfields(phantom400, spec), tmp_path / "b")
    assert (tmp_path / "a/manifest.txt").read_bytes() == (tmp_path / "b/manifest.txt").read_bytes()


def test_load_detects_corruption(tmp_path, dataset):
    export_dataset(dataset, tmp_path)
    p = tmp_path / "field_02.affine"
    p.write_text(p.read_text().replace("1", "2", 1))
    with pytest.raises(ValidationError, match="field_02.affine"):
        load_dataset(tmp_path)
    (tmp_path / "manifest.txt").write_text("garbage\n")
    with pytest.raises(ValidationError, match="header"):
        load_dataset(tmp_path)
