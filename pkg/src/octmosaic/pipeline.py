"""End-to-end pairwise registration and star-topology stitching.

Per moving field: CLAHE, keypoint matching (or imported matches), feature
images, least-squares initialisation, intensity affine, SyN refinement.
Geometry is estimated on the standardised images; metrics, blending and
verification use the raw intensities.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .affine import (AffineParams, fit_affine_ls, rasterize_feature_images,
                     register_affine_intensity)
from .core import AffineTransform, ClaheParams, Image2D, clahe, warp_affine
from .deform import DiffeoResult, SynParams, register_syn
from .errors import RegistrationError, ValidationError
from .evalverify import PairMetrics, VerificationReport, VerifyParams, pair_metrics, verify_mosaic
from .features import FeatureParams, Keypoints, MatchSet, match_images
from .mosaic import Blend, MosaicResult, RegisteredField, composite, warp_registered

MIN_MATCHES = 3


@dataclass
class PipelineConfig:
    clahe: ClaheParams = field(default_factory=ClaheParams)
    features: FeatureParams = field(default_factory=FeatureParams)
    affine: AffineParams = field(default_factory=AffineParams)
    syn: SynParams = field(default_factory=SynParams)
    verify: VerifyParams = field(default_factory=VerifyParams)
    blend: str = "feather"
    use_syn: bool = True
    run_verify: bool = True

    def validate(self):
        self.clahe.validate()
        self.features.validate()
        self.affine.validate()
        self.syn.validate()
        self.verify.validate()
        Blend.parse(self.blend)


@dataclass
class PairResult:
    label: str
    matches: MatchSet
    fixed_keypoints: Keypoints
    moving_keypoints: Keypoints
    ls_init: AffineTransform
    affine: AffineTransform
    syn: DiffeoResult | None
    aligned: Image2D
    aligned_affine: Image2D
    metrics: PairMetrics
    metrics_affine: PairMetrics
    verification: VerificationReport | None = None
    verification_affine: VerificationReport | None = None
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def registered(self) -> RegisteredField:
        return RegisteredField(None, self.affine, self.syn.forward if self.syn else None, self.label)


def preprocess(image: Image2D, params: ClaheParams) -> Image2D:
    if not params.enabled:
        return image
    return clahe(image, params.clip_limit, params.tiles_x, params.tiles_y, params.bins)


def _check_imported(matches: MatchSet, fixed: Image2D, moving: Image2D):
    if tuple(matches.fixed_size) != (fixed.width, fixed.height) or \
            tuple(matches.moving_size) != (moving.width, moving.height):
        raise ValidationError(
            f"match file sizes {matches.fixed_size}/{matches.moving_size} do not fit images "
            f"{(fixed.width, fixed.height)}/{(moving.width, moving.height)}")


def _verify(fixed: Image2D, aligned: Image2D, ms: MatchSet, kf: Keypoints, cfg: PipelineConfig,
            warnings: list):
    """Blend the pair on the reference grid and compare segmentations over the overlap."""
    overlap = fixed.mask & aligned.mask
    blend = Blend.parse(cfg.blend)
    if blend is Blend.FIRST_WINS:
        # the reference would hide the field entirely; compare the field itself
        blended = Image2D(np.where(aligned.mask, aligned.data, 0.0), aligned.mask)
    else:
        mos = composite(fixed, [RegisteredField(Image2D(aligned.data, aligned.mask),
                                                AffineTransform.identity())], blend)
        blended = Image2D(mos.reference_window(mos.canvas.data).copy(),
                          mos.reference_window(mos.canvas.mask).copy())
    try:
        return verify_mosaic(fixed, blended, overlap, ms, kf, cfg.verify)
    except ValidationError as exc:
        warnings.append(f"verification skipped: {exc}")
        return None


def register_pair(fixed: Image2D, moving: Image2D, config: PipelineConfig | None = None,
                  matches: MatchSet | None = None, label: str = "") -> PairResult:
    """Register ``moving`` onto ``fixed``; raises a MosaicError subclass on failure."""
    cfg = config or PipelineConfig()
    cfg.validate()
    timings = {}
    warnings: list = []

    t0 = time.perf_counter()
    pf = preprocess(fixed, cfg.clahe)
    pm = preprocess(moving, cfg.clahe)
    timings["preprocess"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if matches is None:
        ms, kf, km = match_images(pf, pm, cfg.features)
    else:
        _check_imported(matches, fixed, moving)
        ms, kf, km = matches, matches.fixed, matches.moving
    timings["features"] = time.perf_counter() - t0
    if len(ms) < MIN_MATCHES:
        raise RegistrationError(f"only {len(ms)} matches; need at least {MIN_MATCHES}")

    t0 = time.perf_counter()
    feat = rasterize_feature_images(ms, fixed.shape, moving.shape, cfg.affine.blob_sigma)
    ls = fit_affine_ls(ms, cfg.affine.model)
    A = register_affine_intensity(feat, cfg.affine, ls)
    if not A.is_acceptable():
        raise RegistrationError(f"affine estimate rejected (det = {A.det:.3g})")
    timings["affine"] = time.perf_counter() - t0

    aligned_affine = warp_affine(moving, A, output_shape=fixed.shape)
    if not (fixed.mask & aligned_affine.mask).any():
        raise RegistrationError("affine estimate leaves no overlap with the reference")

    syn = None
    t0 = time.perf_counter()
    if cfg.use_syn:
        pre_aligned = warp_affine(pm, A, output_shape=fixed.shape)
        syn = register_syn(pf, pre_aligned, cfg.syn)
        warnings += syn.warnings
        aligned = warp_registered(RegisteredField(moving, A, syn.forward), fixed.shape)
    else:
        aligned = aligned_affine
    timings["syn"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    m_aff = pair_metrics(fixed, aligned_affine)
    m_fin = pair_metrics(fixed, aligned) if syn is not None else m_aff
    ver = ver_aff = None
    if cfg.run_verify:
        ver_aff = _verify(fixed, aligned_affine, ms, kf, cfg, warnings)
        ver = _verify(fixed, aligned, ms, kf, cfg, []) if syn is not None else ver_aff
    timings["evaluate"] = time.perf_counter() - t0
    return PairResult(label, ms, kf, km, ls, A, syn, aligned, aligned_affine, m_fin, m_aff,
                      ver, ver_aff, timings, warnings)


@dataclass
class FieldFailure:
    label: str
    reason: str


@dataclass
class StitchResult:
    pairs: list            # PairResult or FieldFailure, in input order
    mosaic: MosaicResult

    @property
    def failures(self) -> list:
        return [p for p in self.pairs if isinstance(p, FieldFailure)]


def stitch(reference: Image2D, moving, config: PipelineConfig | None = None,
           labels=None, matches=None) -> StitchResult:
    """Register each moving field to the reference and composite the successes.

    ``matches`` may hold one imported MatchSet (or None) per moving field.
    """
    from .errors import MosaicError

    cfg = config or PipelineConfig()
    cfg.validate()
    moving = list(moving)
    labels = list(labels) if labels else [f"field_{k + 1:02d}" for k in range(len(moving))]
    matches = list(matches) if matches else [None] * len(moving)
    pairs = []
    regs = []
    for img, lab, ms in zip(moving, labels, matches):
        try:
            res = register_pair(reference, img, cfg, ms, lab)
            pairs.append(res)
            regs.append(RegisteredField(img, res.affine, res.syn.forward if res.syn else None, lab))
        except MosaicError as exc:
            pairs.append(FieldFailure(lab, f"{type(exc).__name__}: {exc}"))
    mos = composite(reference, regs, cfg.blend)
    return StitchResult(pairs, mos)
