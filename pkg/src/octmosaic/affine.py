"""Bridge stage: feature images and intensity-based global affine registration.

Matched keypoints are rendered as Gaussian blobs, pair ``k`` receiving the
same unique peak value in both images, and the affine map is found by
maximising the Pearson correlation between the two feature images. Point
based least squares and RANSAC homography estimation are the baselines.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from ._kernels import affine_correlation_sums, pearson_from_sums
from .core import (AffineTransform, Image2D, downsample, invert_affine, smooth_array,
                   warp_affine)
from .errors import (EstimationError, FitError, ParameterError, RegistrationError,
                     ScaleError, ValidationError)
from .features import MatchSet

AFFINE_HEADER = "MOSAIC-AFFINE v1"
HOMOGRAPHY_HEADER = "MOSAIC-HOMOGRAPHY v1"
MODELS = ("rigid", "similarity", "affine")


@dataclass
class FeatureImagePair:
    fixed_feat: Image2D
    moving_feat: Image2D
    pair_count: int
    blob_sigma: float


@dataclass
class AffineParams:
    model: str = "affine"
    shrink_factors: tuple = (4, 2, 1)
    level_sigmas: tuple = (24.0, 6.0, 1.0)
    iterations: int = 200
    translation_step: float = 1.0
    linear_step: float = 0.01
    tolerance: float = 1e-6
    window: int = 5
    blob_sigma: float = 2.0
    # coarse rigid hypothesis search before the ascent (0 range disables it)
    search_range: float = 30.0
    search_step: float = 2.0
    search_shrink: int = 4
    search_sigma: float = 6.0
    search_margin: float = 0.05

    def validate(self):
        if self.model not in MODELS:
            raise ParameterError(f"affine.model must be one of {MODELS}, got {self.model!r}")
        if len(self.shrink_factors) < 1 or len(self.level_sigmas) != len(self.shrink_factors):
            raise ParameterError("affine.shrink_factors and affine.level_sigmas need equal, "
                                 "non-zero length")
        if any(int(s) != s or s < 1 for s in self.shrink_factors):
            raise ParameterError("affine.shrink_factors must be positive integers")
        if self.iterations < 1 or self.tolerance <= 0 or self.window < 1:
            raise ParameterError("affine.iterations/window must be >= 1, tolerance > 0")
        if self.translation_step <= 0 or self.linear_step <= 0 or self.blob_sigma <= 0:
            raise ParameterError("affine step sizes and blob_sigma must be > 0")
        if self.search_range < 0 or self.search_step <= 0 or self.search_shrink < 1:
            raise ParameterError("affine.search_range must be >= 0, search_step > 0, "
                                 "search_shrink >= 1")


@dataclass
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) < 1e-15:
            raise EstimationError("homography with h33 = 0 cannot be normalised")
        self.matrix = m / m[2, 2]

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        q = p @ self.matrix[:, :2].T + self.matrix[:, 2]
        return q[:, :2] / q[:, 2:3]


# --------------------------------------------------------------------------
# feature images

def _render_blobs(shape, points, values, sigma):
    h, w = shape
    img = np.zeros(shape)
    r = int(math.ceil(3.0 * sigma))
    for (x, y), val in zip(points, values):
        x0, x1 = max(int(math.floor(x)) - r, 0), min(int(math.ceil(x)) + r, w - 1)
        y0, y1 = max(int(math.floor(y)) - r, 0), min(int(math.ceil(y)) + r, h - 1)
        if x0 > x1 or y0 > y1:
            continue
        yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        d2 = (xx - x) ** 2 + (yy - y) ** 2
        blob = np.where(d2 <= r * r, val * np.exp(-0.5 * d2 / sigma ** 2), 0.0)
        np.maximum(img[y0:y1 + 1, x0:x1 + 1], blob, out=img[y0:y1 + 1, x0:x1 + 1])
    return img


def rasterize_feature_images(matches: MatchSet, fixed_shape, moving_shape,
                             blob_sigma: float = 2.0) -> FeatureImagePair:
    """Render matched pair ``k`` (ordered by fixed index) with peak ``(k+1)/N``.

    Shapes are ``(height, width)``. Blobs are truncated at radius
    ``ceil(3 * blob_sigma)`` and overlaps resolve by maximum.
    """
    if len(matches) == 0:
        raise ParameterError("cannot rasterise an empty match set")
    m = matches.sorted()
    n = len(m)
    vals = (np.arange(n) + 1.0) / n
    ff = _render_blobs(tuple(fixed_shape), m.fixed_points, vals, blob_sigma)
    mf = _render_blobs(tuple(moving_shape), m.moving_points, vals, blob_sigma)
    return FeatureImagePair(Image2D(ff), Image2D(mf), n, blob_sigma)


# --------------------------------------------------------------------------
# least squares

def fit_affine_ls(matches: MatchSet, model: str = "affine") -> AffineTransform:
    """Least-squares ``A p_m + t ~ p_f``; Procrustes for rigid/similarity."""
    return fit_points(matches.moving_points, matches.fixed_points, model)


def fit_points(src, dst, model: str = "affine") -> AffineTransform:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if model not in MODELS:
        raise ParameterError(f"unknown model {model!r}")
    n = len(src)
    need = 3 if model == "affine" else 2
    if n < need:
        raise FitError(f"{model} fit needs at least {need} correspondences, got {n}")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    sv = np.linalg.svd(a, compute_uv=False)
    scale = max(sv[0], 1e-300)
    if sv[0] <= 1e-12:
        raise FitError("degenerate correspondences: all source points coincide")
    if model == "affine":
        if sv[1] / scale < 1e-9:
            raise FitError("degenerate correspondences: source points are collinear")
        design = np.column_stack([src, np.ones(n)])
        sol = np.linalg.solve(design.T @ design, design.T @ dst)
        return AffineTransform(sol[0, 0], sol[1, 0], sol[0, 1], sol[1, 1], sol[2, 0], sol[2, 1])
    cov = b.T @ a / n
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    D = np.diag([1.0, d])
    rot = u @ D @ vt
    c = 1.0
    if model == "similarity":
        c = float(np.trace(np.diag(s) @ D) / (a * a).sum(axis=1).mean())
    lin = c * rot
    t = cd - lin @ cs
    return AffineTransform(lin[0, 0], lin[0, 1], lin[1, 0], lin[1, 1], t[0], t[1])


def reprojection_rms(transform: AffineTransform, matches: MatchSet) -> float:
    r = transform.apply(matches.moving_points) - matches.fixed_points
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


# --------------------------------------------------------------------------
# intensity registration

class _Model:
    """Parameter vector <-> transform, parametrised about the moving centre."""

    def __init__(self, kind, centre):
        self.kind = kind
        self.c = np.asarray(centre, dtype=np.float64)

    def to_params(self, t: AffineTransform) -> np.ndarray:
        lin = t.linear
        tc = t.apply(self.c[None])[0] - self.c
        if self.kind == "affine":
            return np.array([lin[0, 0], lin[0, 1], lin[1, 0], lin[1, 1], tc[0], tc[1]])
        theta = math.atan2(lin[1, 0] - lin[0, 1], lin[0, 0] + lin[1, 1])
        if self.kind == "rigid":
            return np.array([theta, tc[0], tc[1]])
        s = math.sqrt(max(abs(t.det), 1e-300))
        return np.array([s, theta, tc[0], tc[1]])

    def to_transform(self, p) -> AffineTransform:
        if self.kind == "affine":
            lin = np.array([[p[0], p[1]], [p[2], p[3]]])
        else:
            s = p[0] if self.kind == "similarity" else 1.0
            th = p[-3]
            lin = s * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        t = self.c + p[-2:] - lin @ self.c
        return AffineTransform(lin[0, 0], lin[0, 1], lin[1, 0], lin[1, 1], t[0], t[1])


class _LevelObjective:
    def __init__(self, fixed: Image2D, moving: Image2D, shrink: int, zero_outside: bool = True):
        self.zero_outside = zero_outside
        self.fixed = np.ascontiguousarray(fixed.data)
        self.fmask = np.ascontiguousarray(fixed.mask)
        self.moving = np.ascontiguousarray(moving.data)
        self.mmask = np.ascontiguousarray(moving.mask)
        self.f = float(shrink)
        self.evals = 0

    def __call__(self, t: AffineTransform) -> float:
        self.evals += 1
        if not t.is_acceptable():
            return -np.inf
        inv = invert_affine(t)
        # level coordinates are full-resolution coordinates divided by shrink
        sums = affine_correlation_sums(self.fixed, self.fmask, self.moving, self.mmask,
                                       inv.a11, inv.a12, inv.a21, inv.a22,
                                       inv.tx / self.f, inv.ty / self.f, self.zero_outside)
        return pearson_from_sums(*sums)


def pearson(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Pearson correlation over ``mask``; -inf where undefined."""
    n = np.count_nonzero(mask)
    if n < 2:
        return -np.inf
    x = a[mask]
    y = b[mask]
    x = x - x.mean()
    y = y - y.mean()
    sxx = float(np.dot(x, x))
    syy = float(np.dot(y, y))
    if sxx <= 1e-300 or syy <= 1e-300:
        return -np.inf
    return float(np.dot(x, y) / math.sqrt(sxx * syy))


def _ascend(obj, model: _Model, p0, steps, params: AffineParams):
    p = np.array(p0, dtype=np.float64)
    best = obj(model.to_transform(p))
    alpha = 1.0
    history = [best]
    for _ in range(params.iterations):
        g = np.empty_like(p)
        for i in range(len(p)):
            d = np.zeros_like(p)
            d[i] = 0.5 * steps[i] * max(alpha, 0.05)
            fp = obj(model.to_transform(p + d))
            fm = obj(model.to_transform(p - d))
            g[i] = (fp - fm) / (2 * d[i]) if np.isfinite(fp) and np.isfinite(fm) else 0.0
        gs = g * steps
        norm = np.linalg.norm(gs)
        if norm <= 0 or not np.isfinite(norm):
            break
        direction = steps * gs / norm
        improved = False
        a = alpha
        for _ in range(8):
            cand = p + a * direction
            val = obj(model.to_transform(cand))
            if val > best:
                p, best, improved = cand, val, True
                break
            a *= 0.5
        if not improved:
            break
        alpha = min(1.0, a * 1.5)
        history.append(best)
        if (len(history) > params.window
                and history[-1] - history[-1 - params.window] < params.tolerance):
            break
    return p, best


def _rigid_about(theta_deg, centre, shift):
    t = AffineTransform.rotation(theta_deg, centre)
    return AffineTransform(t.a11, t.a12, t.a21, t.a22, t.tx + shift[0], t.ty + shift[1])


def _coarse_search(fixed: Image2D, moving: Image2D, init: AffineTransform,
                   params: AffineParams) -> AffineTransform:
    """Replace ``init`` by the best rigid hypothesis if it scores clearly higher.

    Rotations about the moving centre are tried on a grid; for each, the
    translation comes from the FFT cross-correlation peak of the coarse
    feature images. Candidates are ranked by the same Pearson objective.
    """
    s = int(params.search_shrink)
    try:
        fl = downsample(Image2D(smooth_array(fixed.data, params.search_sigma), fixed.mask), s)
        ml = downsample(Image2D(smooth_array(moving.data, params.search_sigma), moving.mask), s)
    except ScaleError:
        return init
    obj = _LevelObjective(fl, ml, s)
    base = obj(init)
    centre = ((moving.width - 1) / 2.0, (moving.height - 1) / 2.0)
    fdat = np.where(fl.mask, fl.data, 0.0)
    mh, mw = ml.shape
    n = int(math.floor(params.search_range / params.search_step + 1e-9))
    best_t, best = init, base
    for k in range(-n, n + 1):
        theta = k * params.search_step
        rot = _rigid_about(theta, centre, (0.0, 0.0))
        # rotated moving image on the coarse fixed grid
        coarse = AffineTransform(rot.a11, rot.a12, rot.a21, rot.a22, rot.tx / s, rot.ty / s)
        w = warp_affine(ml, coarse, output_shape=fl.shape)
        wdat = np.where(w.mask, w.data, 0.0)
        xc = signal.fftconvolve(fdat, wdat[::-1, ::-1], mode="full")
        r, c = np.unravel_index(int(np.argmax(xc)), xc.shape)
        shift = ((c - (fl.width - 1)) * s, (r - (fl.height - 1)) * s)
        cand = _rigid_about(theta, centre, shift)
        val = obj(cand)
        if val > best:
            best_t, best = cand, val
    if best_t is not init and best > base + params.search_margin:
        return best_t
    return init


def register_affine_intensity(feat: FeatureImagePair, params: AffineParams | None = None,
                              init: AffineTransform | None = None) -> AffineTransform:
    """Maximise feature-image Pearson correlation over the transform, coarse to fine.

    Gradient ascent with central-difference gradients and backtracking at
    each pyramid level; step sizes start at ``translation_step`` coarse
    pixels and ``linear_step`` and halve per level. For the rigid and
    similarity models ``init`` is first projected onto the model. The
    starting point is returned unless the result beats it at full
    resolution by more than ``tolerance``.
    """
    params = params or AffineParams()
    params.validate()
    init = init or AffineTransform.identity()
    fixed, moving = feat.fixed_feat, feat.moving_feat
    full = _LevelObjective(fixed, moving, 1)
    centre = ((moving.width - 1) / 2.0, (moving.height - 1) / 2.0)
    model = _Model(params.model, centre)
    p = model.to_params(init)
    start_t = init if params.model == "affine" else model.to_transform(p)
    start = full(start_t)
    if not np.isfinite(start):
        raise RegistrationError("correlation undefined at the initial transform "
                                "(a feature image is constant over the overlap)")
    if params.search_range > 0:
        searched = _coarse_search(fixed, moving, start_t, params)
        if searched is not start_t:
            p = model.to_params(searched)
    nlin = len(p) - 2
    for level, (shrink, sigma) in enumerate(zip(params.shrink_factors, params.level_sigmas)):
        shrink = int(shrink)
        try:
            fl = downsample(Image2D(smooth_array(fixed.data, sigma), fixed.mask), shrink)
            ml = downsample(Image2D(smooth_array(moving.data, sigma), moving.mask), shrink)
        except ScaleError:
            continue
        decay = 0.5 ** level
        steps = np.array([params.linear_step * decay] * nlin
                         + [params.translation_step * shrink * decay] * 2)
        p, _ = _ascend(_LevelObjective(fl, ml, shrink), model, p, steps, params)
    result = model.to_transform(p)
    # gains below the convergence tolerance are not significant
    return result if full(result) > start + params.tolerance else start_t


def feature_correlation(feat: FeatureImagePair, transform: AffineTransform) -> float:
    return _LevelObjective(feat.fixed_feat, feat.moving_feat, 1)(transform)


# --------------------------------------------------------------------------
# RANSAC homography baseline

def _normalizer(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d if d > 1e-12 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _dlt(src, dst):
    n = len(src)
    A = np.zeros((2 * n, 9))
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    A[0::2, 0:3] = np.column_stack([x, y, np.ones(n)])
    A[0::2, 6:9] = -u[:, None] * np.column_stack([x, y, np.ones(n)])
    A[1::2, 3:6] = np.column_stack([x, y, np.ones(n)])
    A[1::2, 6:9] = -v[:, None] * np.column_stack([x, y, np.ones(n)])
    _, s, vt = np.linalg.svd(A)
    return vt[-1].reshape(3, 3), s


def _homography_from(src, dst):
    Ts, Td = _normalizer(src), _normalizer(dst)
    hs = src @ Ts[:2, :2].T + Ts[:2, 2]
    hd = dst @ Td[:2, :2].T + Td[:2, 2]
    Hn, _ = _dlt(hs, hd)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < 1e-12 or abs(np.linalg.det(H)) < 1e-12 * abs(H[2, 2]) ** 3:
        return None
    return H / H[2, 2]


def _collinear(p, tol=1e-6):
    for i in range(4):
        q = np.delete(p, i, axis=0)
        a = (q[1, 0] - q[0, 0]) * (q[2, 1] - q[0, 1]) - (q[1, 1] - q[0, 1]) * (q[2, 0] - q[0, 0])
        span = max(np.ptp(q[:, 0]), np.ptp(q[:, 1]), 1e-12)
        if abs(a) <= tol * span * span:
            return True
    return False


def _project(H, pts):
    q = pts @ H[:, :2].T + H[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return q[:, :2] / q[:, 2:3]


def estimate_homography_ransac(matches: MatchSet, inlier_px: float = 2.0,
                               iterations: int = 2000, seed: int = 0):
    """Classic RANSAC over 4-point normalised DLT hypotheses.

    Scores hypotheses by inlier count (ties keep the earliest), then refits
    on the winning inlier set. Returns ``(homography, inlier_mask)``.
    """
    src, dst = matches.moving_points, matches.fixed_points
    n = len(src)
    if n < 4:
        raise EstimationError(f"homography needs >= 4 matches, got {n}")
    rng = np.random.default_rng(seed)
    best_count, best_inl = -1, None
    for _ in range(int(iterations)):
        idx = rng.choice(n, 4, replace=False)
        if _collinear(src[idx]) or _collinear(dst[idx]):
            continue
        H = _homography_from(src[idx], dst[idx])
        if H is None:
            continue
        err = np.linalg.norm(_project(H, src) - dst, axis=1)
        inl = np.nan_to_num(err, nan=np.inf) <= inlier_px
        c = int(inl.sum())
        if c > best_count:
            best_count, best_inl = c, inl
    if best_inl is None or best_count < 4:
        raise EstimationError("all RANSAC hypotheses were degenerate")
    H = _homography_from(src[best_inl], dst[best_inl])
    if H is None:
        raise EstimationError("degenerate inlier set in homography refit")
    return Homography(H), best_inl


def homography_sample_points(domain):
    w, h = domain
    return np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1],
                     [(w - 1) / 2.0, (h - 1) / 2.0]], dtype=np.float64)


def homography_to_affine(h: Homography, domain) -> AffineTransform:
    """Least-squares affine through the homography's images of the domain
    corners and centre; ``domain`` is ``(width, height)``."""
    pts = homography_sample_points(domain)
    return fit_points(pts, h.apply(pts), "affine")


def homography_affine_deviation(h: Homography, domain) -> float:
    """Largest corner discrepancy between ``h`` and its affine approximation."""
    pts = homography_sample_points(domain)[:4]
    a = homography_to_affine(h, domain)
    return float(np.linalg.norm(h.apply(pts) - a.apply(pts), axis=1).max())


# --------------------------------------------------------------------------
# transform files

def write_affine(t: AffineTransform, path) -> None:
    vals = (t.a11, t.a12, t.tx, t.a21, t.a22, t.ty)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(AFFINE_HEADER + "\n" + " ".join(repr(float(v)) for v in vals) + "\n")


def _read_numbers(path, header, count):
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln.split("#", 1)[0].strip() for ln in fh.read().splitlines()]
    except (OSError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: cannot read ({exc})") from exc
    lines = [ln for ln in lines if ln]
    if not lines or lines[0] != header:
        raise ValidationError(f"{path}: missing '{header}' header")
    toks = " ".join(lines[1:]).split()
    if len(toks) != count:
        raise ValidationError(f"{path}: expected {count} values, found {len(toks)}")
    try:
        vals = [float(v) for v in toks]
    except ValueError:
        raise ValidationError(f"{path}: non-numeric value")
    if not all(math.isfinite(v) for v in vals):
        raise ValidationError(f"{path}: non-finite value")
    return vals


def read_affine(path) -> AffineTransform:
    a11, a12, tx, a21, a22, ty = _read_numbers(path, AFFINE_HEADER, 6)
    t = AffineTransform(a11, a12, a21, a22, tx, ty)
    if abs(t.det) <= 1e-12:
        raise ValidationError(f"{path}: singular affine transform")
    return t


def write_homography(h: Homography, path) -> None:
    vals = h.matrix.ravel()[:8]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(HOMOGRAPHY_HEADER + "\n" + " ".join(repr(float(v)) for v in vals) + "\n")


def read_homography(path) -> Homography:
    vals = _read_numbers(path, HOMOGRAPHY_HEADER, 8)
    return Homography(np.array(vals + [1.0]).reshape(3, 3))
