from .filters import ClaheParams, clahe, downsample, gaussian_kernel, gaussian_smooth, smooth_array
from .io import load_image, load_mask, save_image, save_mask, save_rgb
from .types import (
    AffineTransform,
    DisplacementField,
    Image2D,
    InterpKind,
    compose_affine,
    invert_affine,
)
from .warp import grid, sample, warp_affine, warp_field

__all__ = [
    "AffineTransform", "DisplacementField", "Image2D", "InterpKind", "ClaheParams",
    "clahe", "compose_affine", "downsample", "gaussian_kernel", "gaussian_smooth",
    "grid", "invert_affine", "load_image", "load_mask", "sample", "save_image",
    "save_mask", "save_rgb", "smooth_array", "warp_affine", "warp_field",
]
