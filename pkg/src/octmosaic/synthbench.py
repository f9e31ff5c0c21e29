"""Synthetic multi-field mosaicking problems with known ground truth.

A centre crop of the source is the undistorted reference; the remaining
crops are laid out around it (diagonal neighbours for five fields, a ring
otherwise) and each is distorted by a seeded rigid motion about its centre
followed by a smooth elastic field. The stored ground truth maps
distorted-field pixel coordinates into the reference frame.
"""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .affine import read_affine, write_affine
from .core import (AffineTransform, DisplacementField, Image2D, compose_affine,
                   load_image, load_mask, sample, save_image, save_mask)
from .deform import read_field, write_field
from .errors import GenerationError, ParameterError, ValidationError

MANIFEST_HEADER = "MOSAIC-MANIFEST v1"


@dataclass
class SynthSpec:
    n_fields: int = 5
    crop_size: int = 256
    rotation_range: float = 20.0
    translation_range: float = 10.0
    elastic_magnitude: float = 5.0
    elastic_grid: int = 4
    seed: int = 0
    spacing: float = 0.23
    scale_range: float = 0.0
    shear_range: float = 0.0
    noise_sigma: float = 0.0

    def validate(self):
        if self.n_fields < 2:
            raise ParameterError("synth.n_fields must be >= 2")
        if self.crop_size < 16:
            raise ParameterError("synth.crop_size must be >= 16")
        for name in ("rotation_range", "translation_range", "elastic_magnitude",
                     "scale_range", "shear_range", "noise_sigma", "spacing"):
            if getattr(self, name) < 0:
                raise ParameterError(f"synth.{name} must be >= 0")
        if self.elastic_grid < 2:
            raise ParameterError("synth.elastic_grid must be >= 2")
        if self.scale_range >= 1:
            raise ParameterError("synth.scale_range must be < 1")


@dataclass
class SynthField:
    image: Image2D
    gt_affine: AffineTransform
    gt_field: DisplacementField
    crop_origin: tuple[int, int]
    rotation_deg: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    label: str = ""

    def rigid(self, reference_origin) -> AffineTransform:
        """Distortion map from distorted-field to clean-crop coordinates."""
        dx = self.crop_origin[0] - reference_origin[0]
        dy = self.crop_origin[1] - reference_origin[1]
        return compose_affine(AffineTransform.translation(-dx, -dy), self.gt_affine)


@dataclass
class SynthDataset:
    reference: Image2D
    reference_origin: tuple[int, int]
    fields: list
    spec: SynthSpec


def layout_offsets(n_fields: int, crop_size: int, spacing: float) -> list[tuple[int, int]]:
    """Crop origins of the moving fields relative to the reference crop."""
    d = spacing * crop_size
    if n_fields == 5 or n_fields < 5:
        diag = [(d, d), (-d, d), (-d, -d), (d, -d)]
        pts = diag[:n_fields - 1]
    else:
        r = d * math.sqrt(2.0)
        pts = []
        for k in range(n_fields - 1):
            a = math.radians(45.0) + 2 * math.pi * k / (n_fields - 1)
            pts.append((r * math.cos(a), r * math.sin(a)))
    return [(int(round(x)), int(round(y))) for x, y in pts]


def minimum_source_size(spec: SynthSpec) -> int:
    offs = layout_offsets(spec.n_fields, spec.crop_size, spec.spacing)
    reach = max(max(abs(x), abs(y)) for x, y in offs)
    return spec.crop_size + 2 * reach


def overlap_fraction(offset, crop_size: int) -> float:
    ox, oy = offset
    return max(crop_size - abs(ox), 0) * max(crop_size - abs(oy), 0) / crop_size ** 2


def elastic_field(rng: np.random.Generator, shape, magnitude: float, grid: int) -> DisplacementField:
    """Control-grid displacements, cubic-spline upsampled, magnitude-clipped.

    Values are rounded to float32 so the binary field format stores them
    exactly.
    """
    h, w = shape
    if magnitude == 0:
        return DisplacementField.zeros(shape)
    cu = rng.uniform(-magnitude, magnitude, (grid, grid))
    cv = rng.uniform(-magnitude, magnitude, (grid, grid))
    gy = np.linspace(0, grid - 1, h)
    gx = np.linspace(0, grid - 1, w)
    yy, xx = np.meshgrid(gy, gx, indexing="ij")
    u = ndimage.map_coordinates(cu, [yy, xx], order=3, mode="nearest")
    v = ndimage.map_coordinates(cv, [yy, xx], order=3, mode="nearest")
    mag = np.hypot(u, v)
    scale = np.where(mag > magnitude, magnitude / np.maximum(mag, 1e-300), 1.0)
    u = (u * scale).astype(np.float32)
    v = (v * scale).astype(np.float32)
    # float32 rounding may nudge a clipped vector a hair past the bound
    over = np.hypot(u.astype(np.float64), v.astype(np.float64)) > magnitude
    u[over] = np.nextafter(u[over], np.float32(0))
    v[over] = np.nextafter(v[over], np.float32(0))
    return DisplacementField(u.astype(np.float64), v.astype(np.float64))


def generate_subfields(source: Image2D, spec: SynthSpec | None = None) -> SynthDataset:
    spec = spec or SynthSpec()
    spec.validate()
    h, w = source.shape
    c = spec.crop_size
    need = minimum_source_size(spec)
    if h < need or w < need:
        raise GenerationError(
            f"source {w}x{h} too small for {spec.n_fields} fields of {c}px crops; "
            f"need at least {need}x{need}")
    ref_origin = ((w - c) // 2, (h - c) // 2)
    rx, ry = ref_origin
    reference = Image2D(source.data[ry:ry + c, rx:rx + c].copy(),
                        source.mask[ry:ry + c, rx:rx + c].copy())
    if spec.noise_sigma > 0:
        nrng = np.random.default_rng([spec.seed, 0])
        reference = Image2D(np.clip(reference.data + nrng.normal(0, spec.noise_sigma, (c, c)), 0, 1),
                            reference.mask)

    centre = (c - 1) / 2.0
    ys, xs = np.mgrid[0:c, 0:c].astype(np.float64)
    out = []
    for k, (ox, oy) in enumerate(layout_offsets(spec.n_fields, c, spec.spacing), start=1):
        rng = np.random.default_rng([spec.seed, k])
        theta = rng.uniform(-spec.rotation_range, spec.rotation_range)
        t = rng.uniform(-spec.translation_range, spec.translation_range, 2)
        s = 1.0 + rng.uniform(-spec.scale_range, spec.scale_range)
        sh = rng.uniform(-spec.shear_range, spec.shear_range)
        e = elastic_field(rng, (c, c), spec.elastic_magnitude, spec.elastic_grid)

        th = math.radians(theta)
        lin = s * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        lin = lin @ np.array([[1.0, sh], [0.0, 1.0]])
        off = np.array([centre, centre]) - lin @ [centre, centre] + t
        rigid = AffineTransform(lin[0, 0], lin[0, 1], lin[1, 0], lin[1, 1], off[0], off[1])
        gt = compose_affine(AffineTransform.translation(ox, oy), rigid)

        # distorted(y) = source(crop_origin + rigid(y + e(y)))
        px, py = xs + e.u, ys + e.v
        zx = rigid.a11 * px + rigid.a12 * py + rigid.tx + rx + ox
        zy = rigid.a21 * px + rigid.a22 * py + rigid.ty + ry + oy
        vals, valid = sample(source, zx, zy, fill=0.0)
        if spec.noise_sigma > 0:
            vals = np.clip(vals + rng.normal(0, spec.noise_sigma, vals.shape), 0, 1)
        out.append(SynthField(Image2D(vals, valid), gt, e, (rx + ox, ry + oy), theta,
                              (float(t[0]), float(t[1])), label=f"field_{k:02d}"))
    return SynthDataset(reference, ref_origin, out, spec)


# --------------------------------------------------------------------------
# on-disk dataset

def _sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def export_dataset(dataset: SynthDataset, directory) -> Path:
    """Write images (16-bit PNG), masks, transforms, fields and a manifest.

    Returns the manifest path.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_image(dataset.reference, d / "reference.png", bit_depth=16)
    lines = [MANIFEST_HEADER]
    for f in dc_fields(SynthSpec):
        lines.append(f"{f.name}: {getattr(dataset.spec, f.name)!r}")
    rx, ry = dataset.reference_origin
    lines += [f"reference: reference.png {_sha256(d / 'reference.png')}",
              f"reference_origin: {rx} {ry}"]
    for fld in dataset.fields:
        name = fld.label
        save_image(fld.image, d / f"{name}.png", bit_depth=16)
        save_mask(fld.image.mask, d / f"{name}_mask.png")
        write_affine(fld.gt_affine, d / f"{name}.affine")
        write_field(fld.gt_field, d / f"{name}.field")
        lines.append("")
        lines.append(f"[{name}]")
        for kind, fname in (("image", f"{name}.png"), ("mask", f"{name}_mask.png"),
                            ("affine", f"{name}.affine"), ("field", f"{name}.field")):
            lines.append(f"{kind}: {fname} {_sha256(d / fname)}")
        lines.append(f"crop_origin: {fld.crop_origin[0]} {fld.crop_origin[1]}")
        lines.append(f"rotation_deg: {fld.rotation_deg!r}")
        lines.append(f"translation: {fld.translation[0]!r} {fld.translation[1]!r}")
    path = d / "manifest.txt"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _parse_manifest(path):
    top: dict = {}
    blocks: list = []
    cur = top
    with open(path, encoding="utf-8") as fh:
        text = fh.read().splitlines()
    if not text or text[0].strip() != MANIFEST_HEADER:
        raise ValidationError(f"{path}: missing '{MANIFEST_HEADER}' header")
    for lineno, raw in enumerate(text[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            cur = {"label": line[1:-1]}
            blocks.append(cur)
            continue
        if ":" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key: value'")
        k, v = line.split(":", 1)
        cur[k.strip()] = v.strip()
    return top, blocks


def _literal(v: str):
    import ast
    return ast.literal_eval(v)


def load_dataset(directory, verify_checksums: bool = True) -> SynthDataset:
    """Re-import an exported dataset; checksum mismatches name the file."""
    d = Path(directory)
    top, blocks = _parse_manifest(d / "manifest.txt")
    spec_kwargs = {f.name: _literal(top[f.name]) for f in dc_fields(SynthSpec) if f.name in top}
    spec = SynthSpec(**spec_kwargs)

    def checked(entry):
        fname, digest = entry.split()
        p = d / fname
        if not p.exists():
            raise ValidationError(f"{p}: listed in manifest but missing")
        if verify_checksums and _sha256(p) != digest:
            raise ValidationError(f"{p}: checksum mismatch with manifest")
        return p

    reference = load_image(checked(top["reference"]))
    ox, oy = (int(v) for v in top["reference_origin"].split())
    out = []
    for b in blocks:
        img = load_image(checked(b["image"]))
        mask = load_mask(checked(b["mask"]))
        gt = read_affine(checked(b["affine"]))
        fld = read_field(checked(b["field"]))
        cx, cy = (int(v) for v in b["crop_origin"].split())
        tx, ty = (float(v) for v in b["translation"].split())
        out.append(SynthField(Image2D(img.data, mask), gt, fld, (cx, cy),
                              float(b["rotation_deg"]), (tx, ty), label=b["label"]))
    return SynthDataset(reference, (ox, oy), out, spec)


def is_dataset_dir(directory) -> bool:
    return os.path.exists(os.path.join(directory, "manifest.txt"))
