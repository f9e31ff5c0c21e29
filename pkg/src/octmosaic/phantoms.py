"""Deterministic test images: a retina-like vessel phantom and simple ridge phantoms."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .core import Image2D, smooth_array


def _walk(rng, start, heading, length, step=1.0, wiggle=0.012):
    pts = [np.asarray(start, dtype=float)]
    th = heading
    curv = 0.0
    for _ in range(int(length / step)):
        curv = 0.9 * curv + rng.normal(0, wiggle)
        th += curv
        pts.append(pts[-1] + step * np.array([np.cos(th), np.sin(th)]))
    return np.array(pts), th


def vessel_phantom(size: int = 400, seed: int = 0, n_trees: int = 14,
                   noise: float = 0.0) -> Image2D:
    """Bright branching vessels on a darker textured background, in [0, 1].

    Trees grow by smoothed random walks and branch at random points, with
    widths shrinking per generation; a band-passed noise texture stands in
    for the capillary bed so every region carries some structure.
    """
    rng = np.random.default_rng(seed)
    h = w = int(size)
    widths = (2.2, 1.4, 0.8)
    centre = [np.zeros((h, w), bool) for _ in widths]

    def draw(pts, gen):
        ij = np.round(pts).astype(int)
        ok = (ij[:, 0] >= 0) & (ij[:, 0] < w) & (ij[:, 1] >= 0) & (ij[:, 1] < h)
        centre[gen][ij[ok, 1], ij[ok, 0]] = True

    for t in range(n_trees):
        start = rng.uniform(0.05 * size, 0.95 * size, 2)
        heading = rng.uniform(0, 2 * np.pi)
        stack = [(start, heading, 0, size * rng.uniform(0.4, 0.7))]
        while stack:
            p0, hd, gen, length = stack.pop()
            pts, _ = _walk(rng, p0, hd, length)
            draw(pts, gen)
            if gen + 1 < len(widths):
                for _ in range(rng.integers(2, 5)):
                    k = rng.integers(len(pts) // 5, max(len(pts) - 1, len(pts) // 5 + 1))
                    side = rng.choice([-1.0, 1.0])
                    stack.append((pts[k], hd + side * rng.uniform(0.5, 1.2), gen + 1,
                                  length * rng.uniform(0.35, 0.6)))

    img = np.zeros((h, w))
    for gen, wd in enumerate(widths):
        if not centre[gen].any():
            continue
        d = ndimage.distance_transform_edt(~centre[gen])
        amp = (0.9, 0.7, 0.5)[gen]
        img = np.maximum(img, amp * np.exp(-0.5 * (d / wd) ** 2))

    tex = rng.normal(size=(h, w))
    band = smooth_array(tex, 1.2) - smooth_array(tex, 3.0)
    band /= np.abs(band).max() + 1e-12
    background = 0.18 + 0.08 * smooth_array(rng.normal(size=(h, w)), 25.0) * 25.0
    img = np.maximum(img, 0.0) + np.clip(background, 0.05, 0.35) + 0.12 * band
    if noise > 0:
        img = img + rng.normal(0, noise, img.shape)
    return Image2D(np.clip(img, 0.0, 1.0))


def ridge_image(shape, lines, sigma: float = 1.2, amplitude: float = 0.9,
                background: float = 0.1) -> Image2D:
    """Straight bright ridges with Gaussian cross-section.

    ``lines`` holds ``((x0, y0), (x1, y1))`` segments; intensity is
    ``background + amplitude * exp(-d^2 / (2 sigma^2))`` for distance ``d``
    to the nearest segment.
    """
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    out = np.zeros(shape)
    for (x0, y0), (x1, y1) in lines:
        dx, dy = x1 - x0, y1 - y0
        L2 = dx * dx + dy * dy
        t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / L2, 0.0, 1.0)
        d2 = (xs - x0 - t * dx) ** 2 + (ys - y0 - t * dy) ** 2
        out = np.maximum(out, np.exp(-0.5 * d2 / sigma ** 2))
    return Image2D(np.clip(background + amplitude * out, 0.0, 1.0))


def two_ridge_phantom(size: int = 64, sigma: float = 1.2) -> Image2D:
    """Two well-separated vertical ridges at x = size/3 and 2*size/3."""
    a = size / 3.0
    b = 2.0 * size / 3.0
    return ridge_image((size, size), [((a, 2), (a, size - 3)), ((b, 2), (b, size - 3))], sigma)
