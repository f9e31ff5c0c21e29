"""Alignment metrics and segmentation-consistency verification.

Verification segments the reference and the mosaic (restricted to their
overlap) with the same prompt-gated vesselness segmenter and compares the
masks: misalignment creates ghost vessels in the blend, which shows up as a
drop in Dice and a rise in boundary distances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import AffineTransform, Image2D
from .errors import MetricError, ParameterError, ValidationError
from .features import Keypoints, MatchSet
from .report import csv_cell

SSIM_SIZE = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
BUILTIN_NEG_THRESHOLD = 0.05
LEARNED_NEG_THRESHOLD = 0.0009


# --------------------------------------------------------------------------
# rotation error

@dataclass(frozen=True)
class RotationError:
    delta: float


def rotation_angle(t: AffineTransform) -> float:
    """Angle (degrees) of the orthogonal polar factor of the linear part."""
    if t.det <= 0:
        raise MetricError(f"transform is not orientation preserving (det = {t.det:.3g})")
    return math.degrees(math.atan2(t.a21 - t.a12, t.a11 + t.a22))


def wrap_degrees(a: float) -> float:
    a = math.fmod(a + 180.0, 360.0)
    if a < 0:
        a += 360.0
    return a - 180.0


def rotation_error(estimated: AffineTransform, ground_truth: AffineTransform) -> RotationError:
    return RotationError(abs(wrap_degrees(rotation_angle(estimated) - rotation_angle(ground_truth))))


# --------------------------------------------------------------------------
# intensity agreement

@dataclass
class PairMetrics:
    rmse: float
    ssim: float
    psnr: float
    overlap_pixels: int


def _ssim_window() -> np.ndarray:
    r = SSIM_SIZE // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Local SSIM at every pixel (window taps falling off the raster read zeros)."""
    w = _ssim_window()

    def filt(x):
        return ndimage.correlate(x, w, mode="constant", cval=0.0)

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    return num / den


def ssim_support(overlap: np.ndarray) -> np.ndarray:
    """Pixels whose whole 11x11 window lies in ``overlap``."""
    return ndimage.binary_erosion(overlap, structure=np.ones((SSIM_SIZE, SSIM_SIZE), bool),
                                  border_value=0)


def pair_metrics(reference: Image2D, aligned: Image2D, overlap=None) -> PairMetrics:
    if reference.shape != aligned.shape:
        raise MetricError(f"shape mismatch: {reference.shape} vs {aligned.shape}")
    if overlap is None:
        overlap = reference.mask & aligned.mask
    overlap = np.asarray(overlap, dtype=bool)
    n = int(overlap.sum())
    if n == 0:
        raise MetricError("empty overlap")
    a, b = reference.data, aligned.data
    diff = a[overlap] - b[overlap]
    rmse = float(math.sqrt(np.mean(diff * diff)))
    psnr = math.inf if rmse == 0 else 20.0 * math.log10(1.0 / rmse)
    support = ssim_support(overlap)
    if not support.any():
        raise MetricError(f"overlap has no {SSIM_SIZE}x{SSIM_SIZE} region for SSIM")
    ssim = float(ssim_map(np.where(overlap, a, 0.0), np.where(overlap, b, 0.0))[support].mean())
    return PairMetrics(rmse, ssim, psnr, n)


# --------------------------------------------------------------------------
# vesselness and prompted segmentation

def _derivative_kernels(sigma: float):
    """Smoothing, first and second derivative kernels with exact moments.

    Truncated Gaussian derivative kernels do not sum to zero, which leaks a
    response to flat regions; these are corrected so that the derivative
    kernels annihilate constants and reproduce unit slope/curvature.
    """
    r = max(int(math.ceil(4.0 * sigma)), 1)
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    k0 = g / g.sum()
    k1 = x * g
    k1 /= (k1 * x).sum()
    k2 = (x * x - sigma * sigma) * g
    k2 -= k2.mean()
    k2 /= 0.5 * (k2 * x * x).sum()
    return k0, k1, k2


def hessian(data: np.ndarray, sigma: float):
    """Scale-normalised Hessian entries ``(hxx, hxy, hyy)``."""
    k0, k1, k2 = _derivative_kernels(sigma)

    def sep(kx, ky):
        t = ndimage.correlate1d(data, kx, axis=1, mode="nearest")
        return ndimage.correlate1d(t, ky, axis=0, mode="nearest")

    s2 = sigma * sigma
    return sep(k2, k0) * s2, sep(k1, k1) * s2, sep(k0, k2) * s2


def vesselness(image: Image2D, scales=(1.0, 2.0, 3.0), beta: float = 0.5) -> Image2D:
    """Multi-scale Frangi response for bright ridges, in [0, 1].

    ``c`` is half the largest Hessian Frobenius norm at each scale; the
    per-pixel maximum over scales is returned.
    """
    h, w = image.shape
    if h < 32 or w < 32:
        raise ParameterError(f"vesselness needs at least 32x32, got {w}x{h}")
    data = np.asarray(image.data, dtype=np.float64)
    out = np.zeros_like(data)
    for s in scales:
        hxx, hxy, hyy = hessian(data, float(s))
        tr = hxx + hyy
        disc = np.sqrt((hxx - hyy) ** 2 + 4.0 * hxy ** 2)
        e1 = 0.5 * (tr + disc)
        e2 = 0.5 * (tr - disc)
        swap = np.abs(e1) > np.abs(e2)
        l1 = np.where(swap, e2, e1)  # smaller magnitude
        l2 = np.where(swap, e1, e2)
        frob = np.sqrt(l1 * l1 + l2 * l2)
        c = 0.5 * float(frob.max())
        if c <= 1e-12:
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            rb = np.where(l2 != 0, l1 / l2, 0.0)
        v = np.exp(-rb ** 2 / (2 * beta ** 2)) * (1.0 - np.exp(-frob ** 2 / (2 * c * c)))
        v = np.where(l2 < 0, v, 0.0)
        out = np.maximum(out, v)
    return Image2D(np.clip(out, 0.0, 1.0), image.mask.copy())


@dataclass
class VerifyParams:
    # None picks the matcher-appropriate default (built-in vs imported scores)
    neg_prompt_threshold: float | None = None
    vesselness_scales: tuple = (1.0, 2.0, 3.0)
    hysteresis_high: float = 0.6
    hysteresis_low: float = 0.4
    min_component: int = 10
    pos_radius: float = 3.0
    neg_radius: float = 1.0
    beta: float = 0.5

    def validate(self):
        if not self.hysteresis_low < self.hysteresis_high:
            raise ParameterError("verify.hysteresis_low must be < verify.hysteresis_high")
        sc = list(self.vesselness_scales)
        if not sc or any(s <= 0 for s in sc) or any(b <= a for a, b in zip(sc, sc[1:])):
            raise ParameterError("verify.vesselness_scales must be positive and ascending")
        if self.min_component < 0:
            raise ParameterError("verify.min_component must be >= 0")

    def threshold_for(self, source: str) -> float:
        if self.neg_prompt_threshold is not None:
            return float(self.neg_prompt_threshold)
        return BUILTIN_NEG_THRESHOLD if source == "builtin" else LEARNED_NEG_THRESHOLD


def _as_points(prompts) -> np.ndarray:
    if prompts is None:
        return np.zeros((0, 2))
    if isinstance(prompts, Keypoints):
        return prompts.xy
    return np.asarray(prompts, dtype=np.float64).reshape(-1, 2)


def _labels_near(labels: np.ndarray, pts: np.ndarray, radius: float) -> set:
    h, w = labels.shape
    hits = set()
    r = int(math.ceil(radius))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dx * dx + dy * dy <= radius * radius + 1e-9
    dx, dy = dx[keep], dy[keep]
    for x, y in pts:
        cx, cy = int(math.floor(x + 0.5)), int(math.floor(y + 0.5))
        xs, ys = cx + dx, cy + dy
        ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        lab = labels[ys[ok], xs[ok]]
        hits.update(int(v) for v in lab[lab > 0])
    return hits


def segment_vesselness(v: np.ndarray, pos, neg, params: VerifyParams, region=None) -> np.ndarray:
    """Hysteresis + prompt gating on a precomputed vesselness map."""
    pos = _as_points(pos)
    neg = _as_points(neg)
    if len(pos) == 0:
        raise ParameterError("prompt_segment needs at least one positive prompt")
    low = v > params.hysteresis_low
    if region is not None:
        low &= np.asarray(region, dtype=bool)
    labels, n = ndimage.label(low, structure=np.ones((3, 3), bool))
    if n == 0:
        return np.zeros(v.shape, bool)
    idx = np.arange(1, n + 1)
    peak = ndimage.maximum(v, labels, idx)
    size = ndimage.sum(np.ones_like(v), labels, idx)
    keep = np.zeros(n + 1, bool)
    keep[1:] = (peak > params.hysteresis_high) & (size >= params.min_component)
    gate = np.zeros(n + 1, bool)
    for lab in _labels_near(labels, pos, params.pos_radius):
        gate[lab] = True
    for lab in _labels_near(labels, neg, params.neg_radius):
        gate[lab] = False
    keep &= gate
    return keep[labels]


def prompt_segment(image: Image2D, pos_prompts, neg_prompts, params: VerifyParams | None = None,
                   region=None) -> np.ndarray:
    """Vessel mask made of hysteresis components touched by a positive prompt.

    A component is kept if it reaches ``hysteresis_high``, holds at least
    ``min_component`` pixels and has a positive prompt within ``pos_radius``;
    a negative prompt within ``neg_radius`` removes it regardless.
    """
    params = params or VerifyParams()
    params.validate()
    v = vesselness(image, params.vesselness_scales, params.beta).data
    return segment_vesselness(v, pos_prompts, neg_prompts, params, region)


# --------------------------------------------------------------------------
# mask agreement

def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    s = int(a.sum()) + int(b.sum())
    if s == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / s


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 8-neighbour outside the mask (or raster)."""
    mask = np.asarray(mask, bool)
    return mask & ~ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool), border_value=0)


def boundary_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from each boundary pixel of ``a`` to ``b``'s boundary and back, pooled.

    The pooled distances are sorted so reductions over them are symmetric
    in ``a`` and ``b`` to the last bit.
    """
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    ba, bb = boundary(a), boundary(b)
    na, nb = int(ba.sum()), int(bb.sum())
    if na == 0 and nb == 0:
        return np.zeros(0)
    if na == 0 or nb == 0:
        raise MetricError("boundary distance undefined: one mask is empty")
    da = ndimage.distance_transform_edt(~bb)[ba]
    db = ndimage.distance_transform_edt(~ba)[bb]
    return np.sort(np.concatenate([da, db]))


def asd(a, b) -> float:
    """Average symmetric surface distance over the pooled boundary pixels."""
    d = boundary_distances(a, b)
    return float(d.mean()) if d.size else 0.0


def hd95(a, b) -> float:
    """95th percentile (linear interpolation) of the pooled boundary distances."""
    d = boundary_distances(a, b)
    return float(np.percentile(d, 95)) if d.size else 0.0


# --------------------------------------------------------------------------
# verification

@dataclass
class VerificationReport:
    dice: float
    asd: float | None
    hd95: float | None
    pos_prompt_count: int
    neg_prompt_count: int
    reference_mask: np.ndarray = field(repr=False, default=None)
    mosaic_mask: np.ndarray = field(repr=False, default=None)
    flags: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"dice": self.dice, "asd": self.asd, "hd95": self.hd95,
                "pos_prompts": self.pos_prompt_count, "neg_prompts": self.neg_prompt_count,
                "flags": list(self.flags)}


def _inside(points: np.ndarray, region: np.ndarray) -> np.ndarray:
    h, w = region.shape
    if len(points) == 0:
        return np.zeros(0, bool)
    xi = np.floor(points[:, 0] + 0.5).astype(int)
    yi = np.floor(points[:, 1] + 0.5).astype(int)
    ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros(len(points), bool)
    out[ok] = region[yi[ok], xi[ok]]
    return out


def select_prompts(matches: MatchSet, ref_keypoints: Keypoints, overlap: np.ndarray,
                   threshold: float):
    """Positive prompts are matched reference keypoints, negative ones are weak
    reference keypoints; both restricted to the overlap."""
    pos = matches.fixed_points
    pos = pos[_inside(pos, overlap)]
    neg = ref_keypoints.xy[(ref_keypoints.scores <= threshold) & _inside(ref_keypoints.xy, overlap)]
    return pos, neg


def compare_masks(ref_mask: np.ndarray, mos_mask: np.ndarray, overlap: np.ndarray,
                  pos_count: int = 0, neg_count: int = 0) -> VerificationReport:
    a = ref_mask & overlap
    b = mos_mask & overlap
    flags = []
    if not a.any() or not b.any():
        flags.append("empty segmentation" + (" (reference)" if not a.any() else "")
                     + (" (mosaic)" if not b.any() else ""))
        return VerificationReport(0.0, None, None, pos_count, neg_count, a, b, flags)
    return VerificationReport(dice(a, b), asd(a, b), hd95(a, b), pos_count, neg_count, a, b, flags)


def verify_mosaic(reference: Image2D, mosaic_over_reference: Image2D, overlap, matches: MatchSet,
                  all_ref_keypoints: Keypoints, params: VerifyParams | None = None,
                  external_masks=None) -> VerificationReport:
    """Segment reference and mosaic with identical prompts and compare over the overlap.

    ``external_masks`` (a ``(reference, mosaic)`` pair of boolean arrays)
    bypasses the built-in segmenter.
    """
    params = params or VerifyParams()
    params.validate()
    overlap = np.asarray(overlap, dtype=bool)
    if reference.shape != mosaic_over_reference.shape or overlap.shape != reference.shape:
        raise ValidationError("reference, mosaic and overlap must share one grid")
    if not overlap.any():
        raise ValidationError("verify_mosaic: empty overlap")
    thr = params.threshold_for(matches.source)
    pos, neg = select_prompts(matches, all_ref_keypoints, overlap, thr)
    if external_masks is not None:
        ra, mb = (np.asarray(m, bool) for m in external_masks)
        return compare_masks(ra, mb, overlap, len(pos), len(neg))
    if len(pos) == 0:
        raise ValidationError("verify_mosaic: no matched feature inside the overlap")
    ra = prompt_segment(reference, pos, neg, params, region=overlap)
    mb = prompt_segment(mosaic_over_reference, pos, neg, params, region=overlap)
    return compare_masks(ra, mb, overlap, len(pos), len(neg))


# --------------------------------------------------------------------------
# all-pairs sweep

PAIR_COLUMNS = ("fixed", "moving", "status", "rmse", "ssim", "psnr", "overlap_pixels",
                "rotation_error", "dice", "reason")


@dataclass
class PairTable:
    rows: list
    aggregate: dict

    def to_csv(self) -> str:
        lines = [",".join(PAIR_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(csv_cell(r.get(c)) for c in PAIR_COLUMNS))
        return "\n".join(lines) + "\n"


def _aggregate(rows) -> dict:
    out = {"pairs": len(rows), "ok": sum(r["status"] == "ok" for r in rows)}
    for key in ("rmse", "ssim", "psnr", "rotation_error", "dice"):
        vals = np.array([r[key] for r in rows if r["status"] == "ok" and r.get(key) is not None
                         and np.isfinite(r[key])], dtype=np.float64)
        out[key] = None if vals.size == 0 else {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def evaluate_all_pairs(fields, config=None, labels=None, ground_truth=None) -> PairTable:
    """Run the pairwise pipeline for every ordered pair ``(fixed i, moving j)``, ``i != j``.

    ``ground_truth`` optionally holds each field's affine into a common
    frame; the pair truth is then ``gt[i]^-1 o gt[j]``. Failures are kept
    as rows with a reason.
    """
    from .core import compose_affine, invert_affine
    from .pipeline import PipelineConfig, register_pair

    fields = list(fields)
    if len(fields) < 2:
        raise ParameterError("evaluate_all_pairs needs at least two fields")
    config = config or PipelineConfig()
    labels = labels or [f"field_{k:02d}" for k in range(len(fields))]
    rows = []
    for i, fixed in enumerate(fields):
        for j, moving in enumerate(fields):
            if i == j:
                continue
            row = {"fixed": labels[i], "moving": labels[j], "status": "ok"}
            try:
                res = register_pair(fixed, moving, config)
                m = res.metrics
                row.update(rmse=m.rmse, ssim=m.ssim, psnr=m.psnr, overlap_pixels=m.overlap_pixels)
                if res.verification is not None:
                    row["dice"] = res.verification.dice
                if ground_truth is not None:
                    gt = compose_affine(invert_affine(ground_truth[i]), ground_truth[j])
                    row["rotation_error"] = rotation_error(res.affine, gt).delta
            except Exception as exc:  # noqa: BLE001 - every failure becomes a row
                row["status"] = "failed"
                row["reason"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    return PairTable(rows, _aggregate(rows))
