"""Corner detection, patch descriptors, mutual nearest-neighbour matching and the
match-interchange text format used to ingest externally computed matches."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import Image2D, sample, smooth_array
from .errors import ParameterError, ValidationError

MATCH_HEADER = "MOSAIC-MATCHES v1"
KEYPOINT_HEADER = "MOSAIC-KEYPOINTS v1"
DESCRIPTOR_SIZE = 128


@dataclass
class FeatureParams:
    max_count: int = 1024
    nms_radius: float = 4.0
    min_score: float = 1e-3
    ratio: float = 0.9
    min_cosine: float = 0.6
    tensor_sigma: float = 1.0
    border: int = 3

    def validate(self):
        if self.max_count < 1:
            raise ParameterError("features.max_count must be >= 1")
        if self.nms_radius < 0 or self.min_score < 0 or self.tensor_sigma <= 0:
            raise ParameterError("features.nms_radius/min_score must be >= 0, tensor_sigma > 0")
        if not 0 < self.ratio <= 1:
            raise ParameterError("features.ratio must be in (0, 1]")
        if not -1 <= self.min_cosine <= 1:
            raise ParameterError("features.min_cosine must be in [-1, 1]")


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float


@dataclass
class Keypoints:
    """Array-backed keypoint list: ``xy`` is ``(n, 2)`` (x, y), ``scores`` ``(n,)``."""

    xy: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.xy) != len(self.scores):
            raise ParameterError("keypoint coordinate and score counts differ")

    @classmethod
    def empty(cls) -> "Keypoints":
        return cls(np.zeros((0, 2)), np.zeros(0))

    @classmethod
    def from_list(cls, kps) -> "Keypoints":
        kps = list(kps)
        return cls(np.array([[k.x, k.y] for k in kps]).reshape(-1, 2),
                   np.array([k.score for k in kps]))

    def __len__(self):
        return len(self.scores)

    def __eq__(self, other):
        if not isinstance(other, Keypoints):
            return NotImplemented
        return np.array_equal(self.xy, other.xy) and np.array_equal(self.scores, other.scores)

    def __getitem__(self, i) -> Keypoint:
        return Keypoint(float(self.xy[i, 0]), float(self.xy[i, 1]), float(self.scores[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "Keypoints":
        idx = np.asarray(idx, dtype=np.intp)
        return Keypoints(self.xy[idx], self.scores[idx])


# --------------------------------------------------------------------------
# detection

def corner_response(data: np.ndarray, tensor_sigma: float = 1.0) -> np.ndarray:
    """Minimum eigenvalue of the Gaussian-weighted structure tensor."""
    gx = ndimage.sobel(data, axis=1, mode="reflect") / 8.0
    gy = ndimage.sobel(data, axis=0, mode="reflect") / 8.0
    a = smooth_array(gx * gx, tensor_sigma)
    b = smooth_array(gx * gy, tensor_sigma)
    c = smooth_array(gy * gy, tensor_sigma)
    resp = 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)
    return np.maximum(resp, 0.0)


def _disk(radius: float) -> np.ndarray:
    r = int(math.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= radius * radius


def _quadratic_offset(lo, mid, hi):
    den = lo - 2.0 * mid + hi
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(den < 0, 0.5 * (lo - hi) / den, 0.0)
    return np.clip(off, -0.5, 0.5)


def detect_keypoints(image: Image2D, max_count: int = 1024, nms_radius: float = 4.0,
                     min_score: float = 1e-3, tensor_sigma: float = 1.0,
                     border: int = 3) -> Keypoints:
    """Shi-Tomasi corners, strongest first, scores normalised so the top one is 1.

    Corners whose neighbourhood touches an invalid (mask False) pixel or lies
    within ``border`` pixels of the raster edge are discarded.
    """
    h, w = image.shape
    if h < 16 or w < 16:
        raise ParameterError(f"image {w}x{h} too small for detection (need >= 16x16)")
    resp = corner_response(image.data, tensor_sigma)
    valid = image.mask
    if not valid.all():
        valid = ndimage.binary_erosion(valid, np.ones((7, 7), bool), border_value=0)
    b = max(int(border), 1)
    inner = np.zeros_like(valid)
    inner[b:h - b, b:w - b] = True
    valid = valid & inner
    top = resp[valid].max(initial=0.0)
    if top <= 1e-12:
        return Keypoints.empty()

    if nms_radius >= 1:
        peak = resp >= ndimage.maximum_filter(resp, footprint=_disk(nms_radius), mode="constant")
    else:
        peak = np.ones_like(valid)
    cand = peak & valid & (resp >= min_score * top) & (resp > 1e-12)
    ys, xs = np.nonzero(cand)
    sc = resp[ys, xs]
    order = np.lexsort((xs, ys, -sc))  # score desc, raster order on ties
    ys, xs, sc = ys[order], xs[order], sc[order]

    # greedy suppression resolves plateaus left by the maximum filter
    keep = []
    r2 = nms_radius * nms_radius
    taken = np.zeros((0, 2))
    for i in range(len(sc)):
        if nms_radius > 0 and len(taken):
            d2 = (taken[:, 0] - xs[i]) ** 2 + (taken[:, 1] - ys[i]) ** 2
            if np.any(d2 <= r2):
                continue
        keep.append(i)
        taken = np.vstack([taken, [xs[i], ys[i]]])
        if len(keep) >= max_count:
            break
    keep = np.asarray(keep, dtype=np.intp)
    ys, xs, sc = ys[keep], xs[keep], sc[keep]

    dx = _quadratic_offset(resp[ys, xs - 1], sc, resp[ys, xs + 1])
    dy = _quadratic_offset(resp[ys - 1, xs], sc, resp[ys + 1, xs])
    xy = np.column_stack([xs + dx, ys + dy])
    return Keypoints(xy, sc / top)


# --------------------------------------------------------------------------
# description

def describe(image: Image2D, keypoints: Keypoints) -> np.ndarray:
    """128-d gradient-orientation histograms (4x4 cells x 8 bins) per keypoint.

    The 16x16 patch is resampled bilinearly around the subpixel location and
    zero-padded outside the raster. Samples are distributed trilinearly over
    cells and orientation bins, Gaussian-weighted, then L2-normalised with
    the usual 0.2 clamp. Returns an ``(n, 128)`` array.
    """
    n = len(keypoints)
    if n == 0:
        return np.zeros((0, DESCRIPTOR_SIZE))
    offs = np.arange(18, dtype=np.float64) - 8.5
    ox, oy = np.meshgrid(offs, offs)
    px = keypoints.xy[:, 0, None, None] + ox
    py = keypoints.xy[:, 1, None, None] + oy
    patch, _ = sample(Image2D(image.data), px, py, fill=0.0)
    gx = 0.5 * (patch[:, 1:-1, 2:] - patch[:, 1:-1, :-2])
    gy = 0.5 * (patch[:, 2:, 1:-1] - patch[:, :-2, 1:-1])
    o = offs[1:-1]
    gauss = np.exp(-(o[:, None] ** 2 + o[None, :] ** 2) / (2 * 8.0 ** 2))
    mag = np.hypot(gx, gy) * gauss
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi) * (8 / (2 * np.pi))

    cell = (o + 8.0) / 4.0 - 0.5  # continuous cell coordinate of each row/col
    c0 = np.floor(cell).astype(int)
    cf = cell - c0
    a0 = np.floor(ang).astype(int)
    af = ang - a0

    hist = np.zeros(n * 4 * 4 * 8)
    base = (np.arange(n) * 128)[:, None, None]
    for dy_ in (0, 1):
        ry = c0 + dy_
        wy = np.where(dy_, cf, 1 - cf)
        oky = (ry >= 0) & (ry < 4)
        for dx_ in (0, 1):
            rx = c0 + dx_
            wx = np.where(dx_, cf, 1 - cf)
            okx = (rx >= 0) & (rx < 4)
            wsp = (wy[:, None] * wx[None, :]) * (oky[:, None] & okx[None, :])
            cellidx = (np.clip(ry, 0, 3)[:, None] * 4 + np.clip(rx, 0, 3)[None, :]) * 8
            for da in (0, 1):
                wa = np.where(da, af, 1 - af)
                bins = np.mod(a0 + da, 8)
                idx = base + cellidx[None] + bins
                hist += np.bincount(idx.ravel(), weights=(mag * wa * wsp[None]).ravel(),
                                    minlength=hist.size)
    d = hist.reshape(n, DESCRIPTOR_SIZE)
    return _normalize_descriptors(d)


def _normalize_descriptors(d: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    flat = norm[:, 0] <= 1e-12
    d = np.where(flat[:, None], 1.0, d / np.where(flat, 1.0, norm[:, 0])[:, None])
    d = np.minimum(d, 0.2)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# matching

@dataclass
class MatchSet:
    """One-to-one correspondences ``fixed.xy[idx_fixed[k]] <-> moving.xy[idx_moving[k]]``.

    Sizes are ``(width, height)`` of the two source rasters.
    """

    fixed: Keypoints
    moving: Keypoints
    idx_fixed: np.ndarray
    idx_moving: np.ndarray
    confidence: np.ndarray
    fixed_size: tuple[int, int] = (0, 0)
    moving_size: tuple[int, int] = (0, 0)
    source: str = field(default="builtin", compare=False)

    def __post_init__(self):
        self.idx_fixed = np.asarray(self.idx_fixed, dtype=np.intp).reshape(-1)
        self.idx_moving = np.asarray(self.idx_moving, dtype=np.intp).reshape(-1)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        self.fixed_size = tuple(int(v) for v in self.fixed_size)
        self.moving_size = tuple(int(v) for v in self.moving_size)

    def __len__(self):
        return len(self.idx_fixed)

    def __eq__(self, other):
        """Same keypoints, pairs and confidences (``source`` is provenance only)."""
        if not isinstance(other, MatchSet):
            return NotImplemented
        return (self.fixed == other.fixed and self.moving == other.moving
                and self.fixed_size == other.fixed_size and self.moving_size == other.moving_size
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("idx_fixed", "idx_moving", "confidence")))

    @property
    def fixed_points(self) -> np.ndarray:
        return self.fixed.xy[self.idx_fixed]

    @property
    def moving_points(self) -> np.ndarray:
        return self.moving.xy[self.idx_moving]

    def swapped(self) -> "MatchSet":
        order = np.argsort(self.idx_moving, kind="stable")
        return MatchSet(self.moving, self.fixed, self.idx_moving[order], self.idx_fixed[order],
                        self.confidence[order], self.moving_size, self.fixed_size, self.source)

    def sorted(self) -> "MatchSet":
        order = np.argsort(self.idx_fixed, kind="stable")
        return MatchSet(self.fixed, self.moving, self.idx_fixed[order], self.idx_moving[order],
                        self.confidence[order], self.fixed_size, self.moving_size, self.source)

    def subset(self, rows) -> "MatchSet":
        rows = np.asarray(rows, dtype=np.intp)
        return MatchSet(self.fixed, self.moving, self.idx_fixed[rows], self.idx_moving[rows],
                        self.confidence[rows], self.fixed_size, self.moving_size, self.source)

    def compact(self) -> "MatchSet":
        """Sorted copy whose keypoint lists hold only the matched points."""
        s = self.sorted()
        n = len(s)
        return MatchSet(s.fixed.subset(s.idx_fixed), s.moving.subset(s.idx_moving),
                        np.arange(n), np.arange(n), s.confidence.copy(),
                        s.fixed_size, s.moving_size, s.source)

    def validate(self) -> None:
        nf, nm = len(self.fixed), len(self.moving)
        if len(self.idx_moving) != len(self) or len(self.confidence) != len(self):
            raise ValidationError("match arrays have inconsistent lengths")
        if len(self):
            if self.idx_fixed.min() < 0 or self.idx_fixed.max() >= nf:
                raise ValidationError("fixed keypoint index out of range")
            if self.idx_moving.min() < 0 or self.idx_moving.max() >= nm:
                raise ValidationError("moving keypoint index out of range")
        if len(np.unique(self.idx_fixed)) != len(self):
            raise ValidationError("a fixed keypoint appears in more than one match")
        if len(np.unique(self.idx_moving)) != len(self):
            raise ValidationError("a moving keypoint appears in more than one match")
        if not np.all(np.isfinite(self.confidence)):
            raise ValidationError("non-finite match confidence")


def match(desc_fixed: np.ndarray, desc_moving: np.ndarray, ratio: float = 0.9,
          min_cosine: float = 0.6, fixed: Keypoints | None = None,
          moving: Keypoints | None = None, fixed_size=(0, 0), moving_size=(0, 0)) -> MatchSet:
    """Mutual nearest neighbours under cosine similarity with a two-sided ratio test.

    A pair (i, j) survives when each is the other's nearest neighbour, the
    cosine similarity is at least ``min_cosine`` and, on both sides, the
    nearest/second-nearest Euclidean distance ratio is at most ``ratio``.
    The two-sided test keeps ``match(A, B)`` and ``match(B, A)`` mirror images.
    """
    df = np.asarray(desc_fixed, dtype=np.float64)
    dm = np.asarray(desc_moving, dtype=np.float64)
    if fixed is None:
        fixed = Keypoints(np.zeros((len(df), 2)), np.zeros(len(df)))
    if moving is None:
        moving = Keypoints(np.zeros((len(dm), 2)), np.zeros(len(dm)))
    if len(df) == 0 or len(dm) == 0:
        return MatchSet(fixed, moving, [], [], [], fixed_size, moving_size)
    sim = np.clip(df @ dm.T, -1.0, 1.0)
    dist = np.sqrt(np.maximum(2.0 - 2.0 * sim, 0.0))
    nn_f = np.argmax(sim, axis=1)
    nn_m = np.argmax(sim, axis=0)

    def ratio_ok(dmat, nn):
        # dmat rows are queries
        d1 = dmat[np.arange(len(dmat)), nn]
        if dmat.shape[1] < 2:
            return np.ones(len(dmat), bool)
        d2 = np.partition(dmat, 1, axis=1)[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            ok = d1 <= ratio * d2
        return ok | (d1 == 0) & (d2 > 0)

    ok_f = ratio_ok(dist, nn_f)
    ok_m = ratio_ok(dist.T, nn_m)
    i = np.arange(len(df))
    j = nn_f
    keep = (nn_m[j] == i) & ok_f & ok_m[j] & (sim[i, j] >= min_cosine)
    i, j = i[keep], j[keep]
    conf = np.clip(sim[i, j], 0.0, 1.0)
    return MatchSet(fixed, moving, i, j, conf, fixed_size, moving_size)


def match_images(fixed: Image2D, moving: Image2D, params: FeatureParams | None = None):
    """Detect, describe and match; returns ``(matches, fixed_kps, moving_kps)``."""
    p = params or FeatureParams()
    kf = detect_keypoints(fixed, p.max_count, p.nms_radius, p.min_score, p.tensor_sigma, p.border)
    km = detect_keypoints(moving, p.max_count, p.nms_radius, p.min_score, p.tensor_sigma, p.border)
    ms = match(describe(fixed, kf), describe(moving, km), p.ratio, p.min_cosine, kf, km,
               (fixed.width, fixed.height), (moving.width, moving.height))
    return ms, kf, km


# --------------------------------------------------------------------------
# interchange files

def _fmt(v: float) -> str:
    return repr(float(v))


def export_matches(matches: MatchSet, path) -> None:
    """Write the canonical text form (records sorted by fixed index)."""
    m = matches.sorted()
    fw, fh = m.fixed_size
    mw, mh = m.moving_size
    lines = [f"{MATCH_HEADER} {fw} {fh} {mw} {mh}"]
    for k in range(len(m)):
        i, j = m.idx_fixed[k], m.idx_moving[k]
        vals = (m.fixed.xy[i, 0], m.fixed.xy[i, 1], m.fixed.scores[i],
                m.moving.xy[j, 0], m.moving.xy[j, 1], m.moving.scores[j], m.confidence[k])
        lines.append(" ".join(_fmt(v) for v in vals))
    with open(path, "w", encoding="utf-8") as fh_:
        fh_.write("\n".join(lines) + "\n")


def _in_bounds(x, y, size):
    w, h = size
    return -0.5 <= x <= w - 0.5 and -0.5 <= y <= h - 0.5


def import_matches(path) -> MatchSet:
    """Parse a match-interchange file; any invariant violation names its line."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read ({exc})") from exc
    header = None
    rows = []
    seen_f: dict = {}
    seen_m: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if header is None:
            parts = line.split()
            if " ".join(parts[:2]) != MATCH_HEADER or len(parts) != 6:
                raise ValidationError(f"{path}:{lineno}: expected header "
                                      f"'{MATCH_HEADER} <fw> <fh> <mw> <mh>'")
            try:
                header = [int(v) for v in parts[2:]]
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: non-integer image size in header")
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValidationError(f"{path}:{lineno}: record needs 7 fields, got {len(parts)}")
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: non-numeric field in record")
        xf, yf, sf, xm, ym, sm, conf = vals
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"{path}:{lineno}: non-finite value")
        if sf < 0 or sm < 0:
            raise ValidationError(f"{path}:{lineno}: negative keypoint score")
        if not 0.0 <= conf <= 1.0:
            raise ValidationError(f"{path}:{lineno}: confidence {conf} outside [0, 1]")
        if not _in_bounds(xf, yf, header[:2]):
            raise ValidationError(f"{path}:{lineno}: fixed keypoint ({xf}, {yf}) out of range")
        if not _in_bounds(xm, ym, header[2:]):
            raise ValidationError(f"{path}:{lineno}: moving keypoint ({xm}, {ym}) out of range")
        if (xf, yf) in seen_f:
            raise ValidationError(f"{path}:{lineno}: fixed keypoint ({xf}, {yf}) already "
                                  f"matched on line {seen_f[(xf, yf)]}")
        if (xm, ym) in seen_m:
            raise ValidationError(f"{path}:{lineno}: moving keypoint ({xm}, {ym}) already "
                                  f"matched on line {seen_m[(xm, ym)]}")
        seen_f[(xf, yf)] = lineno
        seen_m[(xm, ym)] = lineno
        rows.append(vals)
    if header is None:
        raise ValidationError(f"{path}: missing '{MATCH_HEADER}' header")
    arr = np.array(rows, dtype=np.float64).reshape(-1, 7)
    n = len(arr)
    ms = MatchSet(Keypoints(arr[:, 0:2], arr[:, 2]), Keypoints(arr[:, 3:5], arr[:, 5]),
                  np.arange(n), np.arange(n), arr[:, 6], tuple(header[:2]), tuple(header[2:]),
                  source="imported")
    ms.validate()
    return ms


def export_keypoints(kps: Keypoints, size, path) -> None:
    lines = [f"{KEYPOINT_HEADER} {int(size[0])} {int(size[1])}"]
    lines += [f"{_fmt(x)} {_fmt(y)} {_fmt(s)}" for (x, y), s in zip(kps.xy, kps.scores)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def import_keypoints(path):
    """Returns ``(keypoints, (width, height))``."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read ({exc})") from exc
    size = None
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if size is None:
            if " ".join(parts[:2]) != KEYPOINT_HEADER or len(parts) != 4:
                raise ValidationError(f"{path}:{lineno}: expected '{KEYPOINT_HEADER} <w> <h>'")
            size = (int(parts[2]), int(parts[3]))
            continue
        if len(parts) != 3:
            raise ValidationError(f"{path}:{lineno}: keypoint record needs 3 fields")
        try:
            x, y, s = (float(v) for v in parts)
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: non-numeric keypoint field")
        if not (math.isfinite(s) and s >= 0 and _in_bounds(x, y, size)):
            raise ValidationError(f"{path}:{lineno}: invalid keypoint")
        rows.append((x, y, s))
    if size is None:
        raise ValidationError(f"{path}: missing '{KEYPOINT_HEADER}' header")
    arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return Keypoints(arr[:, :2], arr[:, 2]), size
