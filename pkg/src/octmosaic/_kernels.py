"""Compiled inner loops for the affine objective."""
import math

import numba
import numpy as np

EDGE_EPS = 1e-6


@numba.njit(cache=True)
def affine_correlation_sums(fixed, fmask, moving, mmask, a11, a12, a21, a22, tx, ty,
                            zero_outside):
    """Warp ``moving`` through ``x_m = A x_f + t`` (bilinear, same validity rule
    as ``core.sample``) and accumulate Pearson sums over valid pixels. With
    ``zero_outside`` the moving raster is treated as extending with valid
    zeros, so every fixed pixel with ``fmask`` set takes part.

    Returns ``(n, sum_f, sum_m, sum_ff, sum_mm, sum_fm)``.
    """
    h, w = fixed.shape
    mh, mw = moving.shape
    n = 0.0
    sf = 0.0
    sm = 0.0
    sff = 0.0
    smm = 0.0
    sfm = 0.0
    for r in range(h):
        for c in range(w):
            if not fmask[r, c]:
                continue
            x = a11 * c + a12 * r + tx
            y = a21 * c + a22 * r + ty
            f = fixed[r, c]
            if x < -EDGE_EPS or x > mw - 1 + EDGE_EPS or y < -EDGE_EPS or y > mh - 1 + EDGE_EPS:
                if zero_outside:
                    n += 1.0
                    sf += f
                    sff += f * f
                continue
            x = min(max(x, 0.0), mw - 1.0)
            y = min(max(y, 0.0), mh - 1.0)
            x0 = min(int(math.floor(x)), max(mw - 2, 0))
            y0 = min(int(math.floor(y)), max(mh - 2, 0))
            x1 = min(x0 + 1, mw - 1)
            y1 = min(y0 + 1, mh - 1)
            fx = x - x0 if mw > 1 else 0.0
            fy = y - y0 if mh > 1 else 0.0
            wx0 = 1.0 - fx
            wy0 = 1.0 - fy
            if not (mmask[y0, x0] or wx0 == 0.0 or wy0 == 0.0):
                continue
            if not (mmask[y0, x1] or fx == 0.0 or wy0 == 0.0):
                continue
            if not (mmask[y1, x0] or wx0 == 0.0 or fy == 0.0):
                continue
            if not (mmask[y1, x1] or fx == 0.0 or fy == 0.0):
                continue
            v = (wy0 * (wx0 * moving[y0, x0] + fx * moving[y0, x1])
                 + fy * (wx0 * moving[y1, x0] + fx * moving[y1, x1]))
            n += 1.0
            sf += f
            sm += v
            sff += f * f
            smm += v * v
            sfm += f * v
    return n, sf, sm, sff, smm, sfm


def pearson_from_sums(n, sf, sm, sff, smm, sfm):
    if n < 2:
        return -np.inf
    cxx = sff - sf * sf / n
    cyy = smm - sm * sm / n
    cxy = sfm - sf * sm / n
    if cxx <= 1e-12 * max(sff, 1e-300) or cyy <= 1e-12 * max(smm, 1e-300):
        return -np.inf
    return cxy / math.sqrt(cxx * cyy)
