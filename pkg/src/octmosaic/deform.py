"""Symmetric diffeomorphic refinement driven by local normalised cross-correlation.

Greedy symmetric normalisation: two half-fields ``a`` and ``b`` live on the
fixed grid and pull the fixed and moving images towards a common midpoint,

    mid_f(x) = fixed(x + a(x)),    mid_m(x) = moving(x + b(x)).

Each iteration pushes both half-fields along the LNCC gradient of the
midpoint pair, smooths the update (fluid), normalises it to the current step,
composes it in and smooths the totals (elastic). Updates that lower the
metric or fold either half-field are rolled back and the step halved. The
final maps are ``forward = b o a^-1`` and ``inverse = a o b^-1``.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import DisplacementField, Image2D, sample, smooth_array
from .core.filters import MIN_LEVEL_SIZE
from .errors import MetricError, ParameterError, RegistrationError, ValidationError

log = logging.getLogger(__name__)

FIELD_HEADER = b"MOSAIC-FIELD v1\n"
VAR_EPS = 1e-10
STEP_FLOOR = 1e-4


@dataclass
class SynParams:
    levels: int = 5
    shrink_factors: tuple = (16, 8, 4, 2, 1)
    smoothing_sigmas: tuple = (4.0, 3.0, 2.0, 1.0, 0.0)
    iterations: tuple = (100, 100, 70, 50, 20)
    lncc_radius: int = 4
    update_sigma: float = 3.0
    total_sigma: float = 0.5
    step_length: float = 0.25
    max_step: float = 0.5
    convergence_window: int = 10
    convergence_tol: float = 1e-5
    inverse_iterations: int = 30

    def validate(self):
        n = self.levels
        if n < 1:
            raise ParameterError("syn.levels must be >= 1")
        for name in ("shrink_factors", "smoothing_sigmas", "iterations"):
            if len(getattr(self, name)) != n:
                raise ParameterError(f"syn.{name} must have {n} entries")
        sf = list(self.shrink_factors)
        if any(int(s) != s or s < 1 for s in sf):
            raise ParameterError("syn.shrink_factors must be positive integers")
        if any(b > a for a, b in zip(sf, sf[1:])):
            raise ParameterError("syn.shrink_factors must be non-increasing")
        if any(s < 0 for s in self.smoothing_sigmas) or any(i < 0 for i in self.iterations):
            raise ParameterError("syn.smoothing_sigmas and syn.iterations must be >= 0")
        if self.lncc_radius < 1:
            raise ParameterError("syn.lncc_radius must be >= 1")
        if self.update_sigma < 0 or self.total_sigma < 0:
            raise ParameterError("syn.update_sigma and syn.total_sigma must be >= 0")
        if not 0 < self.step_length <= self.max_step:
            raise ParameterError("syn.step_length must be in (0, max_step]")


@dataclass
class DiffeoResult:
    """Outcome of ``register_syn``.

    ``forward`` resamples the moving image onto the fixed grid,
    ``inverse`` the fixed image onto the moving grid. The trace holds the
    accepted midpoint LNCC values, one list per pyramid level.
    """

    forward: DisplacementField
    inverse: DisplacementField
    final_metric: float
    initial_metric: float = float("nan")
    per_level_metric_trace: list = field(default_factory=list)
    diffeomorphic: bool = True
    warnings: list = field(default_factory=list)


# --------------------------------------------------------------------------
# field algebra

def _sample_field(f: DisplacementField, xs, ys):
    # edge-clamped bilinear lookup; displacements extend constantly off-grid
    coords = [ys, xs]
    u = ndimage.map_coordinates(f.u, coords, order=1, mode="nearest")
    v = ndimage.map_coordinates(f.v, coords, order=1, mode="nearest")
    return u, v


def compose_fields(f: DisplacementField, g: DisplacementField) -> DisplacementField:
    """``(f o g)(x) = g(x) + f(x + g(x))``, bilinear in ``f``."""
    if f.shape != g.shape:
        raise ParameterError(f"field shapes differ: {f.shape} vs {g.shape}")
    h, w = f.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    fu, fv = _sample_field(f, xs + g.u, ys + g.v)
    return DisplacementField(g.u + fu, g.v + fv)


def composition_residual(f: DisplacementField, g: DisplacementField, interior: bool = True) -> float:
    """Mean magnitude of ``f o g``; zero when ``g`` inverts ``f``."""
    r = compose_fields(f, g).magnitude()
    if interior and min(r.shape) > 2:
        r = r[1:-1, 1:-1]
    return float(r.mean())


def invert_field(f: DisplacementField, iterations: int = 30, tol: float = 0.5) -> DisplacementField:
    """Fixed-point inverse ``g <- -f(x + g)`` started from ``-f``.

    A warning is attached to the result when the mean composition residual
    stays above ``tol`` pixels.
    """
    h, w = f.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    gu, gv = -f.u, -f.v
    for _ in range(int(iterations)):
        fu, fv = _sample_field(f, xs + gu, ys + gv)
        gu, gv = -fu, -fv
    g = DisplacementField(gu, gv)
    res = composition_residual(f, g, interior=False)
    if res > tol:
        g.warnings.append(f"field inversion residual {res:.3f} px after {iterations} iterations")
    return g


def jacobian_determinant(f: DisplacementField) -> Image2D:
    """det(I + grad u): central differences inside, one-sided on the border."""
    if min(f.shape) < 2:
        raise ParameterError(f"field too small for a Jacobian: {f.shape}")
    du_dy, du_dx = np.gradient(f.u)
    dv_dy, dv_dx = np.gradient(f.v)
    return Image2D((1.0 + du_dx) * (1.0 + dv_dy) - du_dy * dv_dx)


def min_interior_jacobian(f: DisplacementField) -> float:
    j = jacobian_determinant(f).data
    if min(j.shape) > 2:
        j = j[1:-1, 1:-1]
    return float(j.min())


def resize_field(f: DisplacementField, shape, scale: float) -> DisplacementField:
    """Resample a field onto a grid ``scale`` times finer (0 maps to 0)."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = _sample_field(f, xs / scale, ys / scale)
    return DisplacementField(u * scale, v * scale)


# --------------------------------------------------------------------------
# metric

@dataclass
class _WindowStats:
    cross: np.ndarray   # sum (a - mean a)(b - mean b)
    var_a: np.ndarray
    var_b: np.ndarray
    da: np.ndarray      # a - local mean
    db: np.ndarray
    ok: np.ndarray      # window has usable variance on both sides and centre is valid


def _window_stats(a: np.ndarray, b: np.ndarray, mask: np.ndarray, radius: int) -> _WindowStats:
    m = mask.astype(np.float64)
    size = 2 * radius + 1
    area = float(size * size)

    def box(x):
        return ndimage.uniform_filter(x, size=size, mode="constant", cval=0.0) * area

    am, bm = a * m, b * m
    n = box(m)
    sa, sb = box(am), box(bm)
    saa, sbb, sab = box(am * a), box(bm * b), box(am * b)
    with np.errstate(divide="ignore", invalid="ignore"):
        ninv = np.where(n > 0, 1.0 / np.maximum(n, 1.0), 0.0)
        cross = sab - sa * sb * ninv
        va = saa - sa * sa * ninv
        vb = sbb - sb * sb * ninv
        ok = mask & (n > 0) & (va * ninv >= VAR_EPS) & (vb * ninv >= VAR_EPS)
        da = a - sa * ninv
        db = b - sb * ninv
    return _WindowStats(cross, va, vb, da, db, ok)


def _lncc_from(stats: _WindowStats, mask: np.ndarray) -> float:
    cnt = int(mask.sum())
    if cnt == 0:
        return 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        cc = np.where(stats.ok, stats.cross ** 2 / (stats.var_a * stats.var_b), 0.0)
    return float(np.clip(cc, 0.0, 1.0)[mask].sum() / cnt)


def lncc_map(a: np.ndarray, b: np.ndarray, mask: np.ndarray, radius: int = 4) -> np.ndarray:
    """Per-pixel squared windowed correlation; zero where a window is flat."""
    st = _window_stats(np.asarray(a, float), np.asarray(b, float), np.asarray(mask, bool), radius)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.clip(np.where(st.ok, st.cross ** 2 / (st.var_a * st.var_b), 0.0), 0.0, 1.0)


def lncc(a: Image2D, b: Image2D, radius: int = 4, mask=None) -> float:
    """Mean over ``mask`` of the squared windowed correlation, in [0, 1].

    Window statistics use only masked pixels; windows whose variance falls
    below 1e-10 on either side contribute 0. ``mask`` defaults to the
    intersection of both image masks.
    """
    if a.shape != b.shape:
        raise MetricError(f"lncc needs equal shapes, got {a.shape} and {b.shape}")
    if mask is None:
        mask = a.mask & b.mask
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MetricError("lncc: empty overlap mask")
    st = _window_stats(a.data, b.data, mask, int(radius))
    return _lncc_from(st, mask)


# --------------------------------------------------------------------------
# registration

def _masked_level(image: Image2D, shrink: int, sigma: float):
    """Mask-normalised Gaussian blur, then decimation."""
    m = image.mask.astype(np.float64)
    if sigma > 0:
        num = smooth_array(image.data * m, sigma)
        den = smooth_array(m, sigma)
        data = np.where(den > 1e-6, num / np.maximum(den, 1e-6), 0.0)
    else:
        data = np.where(image.mask, image.data, 0.0)
    return Image2D(data[::shrink, ::shrink].copy(), image.mask[::shrink, ::shrink].copy())


class _Level:
    """Images, grid and metric plumbing for one pyramid level."""

    def __init__(self, fixed: Image2D, moving: Image2D, radius: int):
        self.fixed = fixed
        self.moving = moving
        self.radius = radius
        h, w = fixed.shape
        self.ys, self.xs = np.mgrid[0:h, 0:w].astype(np.float64)

    def evaluate(self, a: DisplacementField, b: DisplacementField):
        fw, fv = sample(self.fixed, self.xs + a.u, self.ys + a.v)
        mw, mv = sample(self.moving, self.xs + b.u, self.ys + b.v)
        mask = fv & mv
        st = _window_stats(fw, mw, mask, self.radius)
        return {"fw": fw, "mw": mw, "mask": mask, "stats": st, "metric": _lncc_from(st, mask)}

    def forces(self, state):
        st = state["stats"]
        core = ndimage.binary_erosion(state["mask"], structure=np.ones((3, 3), bool), border_value=0)
        ok = st.ok & core
        with np.errstate(divide="ignore", invalid="ignore"):
            vab = st.var_a * st.var_b
            k = np.where(ok, 2.0 * st.cross / vab, 0.0)
            ratio_b = np.where(ok, st.cross / st.var_b, 0.0)
            ratio_a = np.where(ok, st.cross / st.var_a, 0.0)
        # d metric / d mid_m and d metric / d mid_f
        gm = k * (st.da - ratio_b * st.db)
        gf = k * (st.db - ratio_a * st.da)
        gmy, gmx = np.gradient(state["mw"])
        gfy, gfx = np.gradient(state["fw"])
        return (gm * gmx, gm * gmy), (gf * gfx, gf * gfy)


def _normalised_update(fx, fy, sigma: float, step: float, max_step: float) -> DisplacementField | None:
    ux, uy = smooth_array(fx, sigma), smooth_array(fy, sigma)
    mag = np.hypot(ux, uy)
    peak = float(mag.max())
    if not np.isfinite(peak) or peak <= 1e-15:
        return None
    s = step / peak
    ux, uy = ux * s, uy * s
    mag = mag * s
    over = mag > max_step
    if over.any():
        c = np.where(over, max_step / np.maximum(mag, 1e-300), 1.0)
        ux, uy = ux * c, uy * c
    return DisplacementField(ux, uy)


def _smooth_field(f: DisplacementField, sigma: float) -> DisplacementField:
    if sigma <= 0:
        return f
    return DisplacementField(smooth_array(f.u, sigma), smooth_array(f.v, sigma))


def _run_level(lev: _Level, a, b, iters: int, params: SynParams, warnings: list):
    state = lev.evaluate(a, b)
    trace = [state["metric"]]
    step = params.step_length
    accepted = 0
    tries = 0
    while accepted < iters and tries < 4 * iters + 20:
        tries += 1
        (mx, my), (fx, fy) = lev.forces(state)
        db = _normalised_update(mx, my, params.update_sigma, step, params.max_step)
        da = _normalised_update(fx, fy, params.update_sigma, step, params.max_step)
        if db is None or da is None:
            break
        nb = _smooth_field(compose_fields(b, db), params.total_sigma)
        na = _smooth_field(compose_fields(a, da), params.total_sigma)
        folded = min(min_interior_jacobian(na), min_interior_jacobian(nb)) <= 0
        cand = None if folded else lev.evaluate(na, nb)
        if folded or cand["metric"] < state["metric"]:
            step *= 0.5
            if step < STEP_FLOOR:
                if folded:
                    warnings.append("step underflow after Jacobian rollback; kept best-so-far fields")
                break
            continue
        a, b, state = na, nb, cand
        trace.append(state["metric"])
        accepted += 1
        w = params.convergence_window
        if len(trace) > w and trace[-1] - trace[-1 - w] < params.convergence_tol:
            break
    return a, b, trace


def register_syn(fixed: Image2D, moving: Image2D, params: SynParams | None = None) -> DiffeoResult:
    """Symmetric multi-resolution LNCC registration of two same-grid images.

    Both images should already share a grid (the moving one resampled by
    the affine stage); masks mark observed pixels.
    """
    params = params or SynParams()
    params.validate()
    if fixed.shape != moving.shape:
        raise RegistrationError(f"register_syn needs equal shapes, got {fixed.shape} and {moving.shape}")
    overlap = fixed.mask & moving.mask
    if not overlap.any():
        raise RegistrationError("register_syn: fixed and moving do not overlap")
    h, w = fixed.shape
    initial = lncc(fixed, moving, params.lncc_radius, overlap)

    warnings: list = []
    trace: list = []
    a = b = None
    prev_shrink = None
    for shrink, sigma, iters in zip(params.shrink_factors, params.smoothing_sigmas, params.iterations):
        shrink = int(shrink)
        lh, lw = -(-h // shrink), -(-w // shrink)
        if min(lh, lw) < MIN_LEVEL_SIZE:
            continue
        lf = _masked_level(fixed, shrink, sigma)
        lm = _masked_level(moving, shrink, sigma)
        if a is None:
            a = DisplacementField.zeros((lh, lw))
            b = DisplacementField.zeros((lh, lw))
        else:
            scale = prev_shrink / shrink
            a = resize_field(a, (lh, lw), scale)
            b = resize_field(b, (lh, lw), scale)
        a, b, tr = _run_level(_Level(lf, lm, params.lncc_radius), a, b, int(iters), params, warnings)
        trace.append(tr)
        prev_shrink = shrink
    if a is None:
        raise RegistrationError(f"no usable pyramid level for a {w}x{h} image")
    if prev_shrink != 1:
        a = resize_field(a, (h, w), float(prev_shrink))
        b = resize_field(b, (h, w), float(prev_shrink))

    inv_a = invert_field(a, params.inverse_iterations)
    inv_b = invert_field(b, params.inverse_iterations)
    warnings += inv_a.warnings + inv_b.warnings
    forward = compose_fields(b, inv_a)
    inverse = compose_fields(a, inv_b)

    mw, mv = sample(moving, *_grid_plus(forward))
    final = lncc(fixed, Image2D(mw, mv), params.lncc_radius, overlap & mv) if (overlap & mv).any() else -1.0
    diffeo = min(min_interior_jacobian(forward), min_interior_jacobian(inverse)) > 0
    if final < initial or not diffeo:
        # refinement must never make things worse; fall back to identity
        warnings.append(
            f"refinement rejected (lncc {final:.6f} vs initial {initial:.6f}, "
            f"diffeomorphic={diffeo}); returning identity fields")
        forward = DisplacementField.zeros((h, w))
        inverse = DisplacementField.zeros((h, w))
        final = initial
        diffeo = True
    for msg in warnings:
        log.info("register_syn: %s", msg)
    return DiffeoResult(forward, inverse, float(final), float(initial), trace, diffeo, warnings)


def _grid_plus(f: DisplacementField):
    h, w = f.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs + f.u, ys + f.v


# --------------------------------------------------------------------------
# binary field format

def write_field(f: DisplacementField, path) -> None:
    """Header line, ``u32`` width and height, then row-major float32 (u, v) pairs."""
    h, w = f.shape
    buf = np.empty((h, w, 2), dtype="<f4")
    buf[..., 0] = f.u
    buf[..., 1] = f.v
    with open(path, "wb") as fh:
        fh.write(FIELD_HEADER)
        fh.write(struct.pack("<II", w, h))
        fh.write(buf.tobytes())


def read_field(path) -> DisplacementField:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read ({exc})") from exc
    n = len(FIELD_HEADER)
    if raw[:n] != FIELD_HEADER:
        raise ValidationError(f"{path}: not a MOSAIC-FIELD v1 file")
    if len(raw) < n + 8:
        raise ValidationError(f"{path}: truncated header")
    w, h = struct.unpack("<II", raw[n:n + 8])
    body = raw[n + 8:]
    if len(body) != w * h * 8:
        raise ValidationError(f"{path}: expected {w * h * 8} payload bytes for {w}x{h}, got {len(body)}")
    arr = np.frombuffer(body, dtype="<f4").reshape(h, w, 2).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{path}: non-finite displacement values")
    return DisplacementField(arr[..., 0].copy(), arr[..., 1].copy())
