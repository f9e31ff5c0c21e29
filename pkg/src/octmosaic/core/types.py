"""Image, transform and displacement-field containers.

Coordinates follow raster order: ``x`` is the column, ``y`` the row, pixel
centres sit on integer coordinates and the origin is the top-left pixel.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import GeometryError, ParameterError


class InterpKind(enum.Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"


@dataclass
class Image2D:
    """Dense grayscale raster with intensities in [0, 1] and a validity mask.

    ``data`` has shape ``(height, width)``. ``mask`` is True on observed
    pixels; it defaults to all-True.
    """

    data: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ParameterError(f"Image2D needs a 2D array, got shape {self.data.shape}")
        if self.mask is None:
            self.mask = np.ones(self.data.shape, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape:
                raise ParameterError(
                    f"mask shape {self.mask.shape} != data shape {self.data.shape}")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def copy(self) -> "Image2D":
        return Image2D(self.data.copy(), self.mask.copy())

    def validate(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("image contains non-finite intensities")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ParameterError("image intensities outside [0, 1]")


@dataclass(frozen=True)
class AffineTransform:
    """Maps a moving-frame point ``p_m`` to the fixed frame: ``A @ p_m + t``."""

    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "AffineTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(float(m[0, 0]), float(m[0, 1]), float(m[1, 0]), float(m[1, 1]),
                   float(m[0, 2]), float(m[1, 2]))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform":
        return cls(tx=float(tx), ty=float(ty))

    @classmethod
    def scaling(cls, s: float, sy: float | None = None) -> "AffineTransform":
        return cls(a11=float(s), a22=float(s if sy is None else sy))

    @classmethod
    def rotation(cls, degrees: float, center: tuple[float, float] = (0.0, 0.0)) -> "AffineTransform":
        """Counter-clockwise rotation in the (x, y) plane about ``center``."""
        th = math.radians(degrees)
        c, s = math.cos(th), math.sin(th)
        cx, cy = center
        return cls(c, -s, s, c, cx - c * cx + s * cy, cy - s * cx - c * cy)

    @property
    def linear(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def offset(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    @property
    def matrix(self) -> np.ndarray:
        """2x3 matrix ``[A | t]``."""
        return np.array([[self.a11, self.a12, self.tx], [self.a21, self.a22, self.ty]])

    @property
    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def apply(self, points) -> np.ndarray:
        """Map an ``(n, 2)`` array of (x, y) points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.linear.T + self.offset

    def params(self) -> np.ndarray:
        return np.array([self.a11, self.a12, self.a21, self.a22, self.tx, self.ty])

    @classmethod
    def from_params(cls, p) -> "AffineTransform":
        return cls(*(float(v) for v in p))

    def is_acceptable(self) -> bool:
        d = abs(self.det)
        return bool(np.all(np.isfinite(self.params()))) and 1e-3 <= d <= 1e3


def compose_affine(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """Return the transform ``p -> a(b(p))``."""
    return AffineTransform.from_matrix(a.homogeneous @ b.homogeneous)


def invert_affine(a: AffineTransform) -> AffineTransform:
    d = a.det
    if not np.isfinite(d) or abs(d) <= 1e-12:
        raise GeometryError(f"affine transform is singular (det={d:.3g})")
    inv = np.empty((2, 3))
    inv[0, 0] = a.a22 / d
    inv[0, 1] = -a.a12 / d
    inv[1, 0] = -a.a21 / d
    inv[1, 1] = a.a11 / d
    inv[:, 2] = -inv[:, :2] @ a.offset
    return AffineTransform.from_matrix(inv)


@dataclass
class DisplacementField:
    """Per-pixel displacement on a sampling grid (pull-back convention).

    ``warped(x) = moving(x + (u(x), v(x)))``; ``u`` is the x (column)
    component and ``v`` the y (row) component, both of shape
    ``(height, width)``.
    """

    u: np.ndarray
    v: np.ndarray
    warnings: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise GeometryError("field components must be 2D arrays of equal shape")

    @classmethod
    def zeros(cls, shape) -> "DisplacementField":
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def constant(cls, shape, u: float, v: float) -> "DisplacementField":
        return cls(np.full(shape, float(u)), np.full(shape, float(v)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def max_magnitude(self) -> float:
        return float(self.magnitude().max()) if self.u.size else 0.0

    def __neg__(self) -> "DisplacementField":
        return DisplacementField(-self.u, -self.v)

    def copy(self) -> "DisplacementField":
        return DisplacementField(self.u.copy(), self.v.copy(), list(self.warnings))
