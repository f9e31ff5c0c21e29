"""Reading and writing single-channel PGM (P5) and PNG rasters."""
from __future__ import annotations

import os
import re

import numpy as np
from PIL import Image

from ..errors import LoadError, ParameterError
from .types import Image2D

_PGM_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def _read_pgm(raw: bytes, path) -> np.ndarray:
    m = _PGM_HEADER.match(raw)
    if m is None:
        raise LoadError(f"{path}: not a binary (P5) PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval not in (255, 65535):
        raise LoadError(f"{path}: unsupported PGM maxval {maxval} (need 255 or 65535)")
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    body = raw[m.end():]
    need = w * h * dtype.itemsize
    if len(body) < need:
        raise LoadError(f"{path}: truncated PGM body ({len(body)} of {need} bytes)")
    arr = np.frombuffer(body[:need], dtype=dtype).reshape(h, w)
    return arr.astype(np.float64) / maxval


def _read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "1"):
                return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                if mode == "I" and arr.max(initial=0) > 65535:
                    raise LoadError(f"{path}: integer PNG exceeds 16-bit range")
                return arr / 65535.0
            raise LoadError(f"{path}: unsupported PNG mode {mode!r} (need 8/16-bit grayscale)")
    except LoadError:
        raise
    except Exception as exc:  # PIL raises a zoo of types
        raise LoadError(f"{path}: cannot decode PNG ({exc})") from exc


def load_image(path) -> Image2D:
    """Load an 8/16-bit single-channel PGM or PNG into [0, 1] floats."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise LoadError(f"{path}: cannot read file ({exc})") from exc
    if raw.startswith(b"P5"):
        data = _read_pgm(raw, path)
    elif raw.startswith(b"\x89PNG\r\n\x1a\n"):
        data = _read_png(path)
    else:
        raise LoadError(f"{path}: unsupported format (need binary PGM or PNG)")
    return Image2D(data)


def quantize(data: np.ndarray, bit_depth: int) -> np.ndarray:
    if bit_depth not in (8, 16):
        raise ParameterError(f"bit_depth must be 8 or 16, got {bit_depth}")
    top = 255 if bit_depth == 8 else 65535
    q = np.floor(np.clip(data, 0.0, 1.0) * top + 0.5)
    return q.astype(np.uint8 if bit_depth == 8 else np.uint16)


def save_image(image: Image2D, path, bit_depth: int = 8) -> None:
    """Write ``image`` as PGM (``.pgm``) or PNG (anything else)."""
    q = quantize(image.data, bit_depth)
    path = os.fspath(path)
    if path.lower().endswith(".pgm"):
        top = 255 if bit_depth == 8 else 65535
        header = f"P5\n{image.width} {image.height}\n{top}\n".encode("ascii")
        body = q.astype(">u2").tobytes() if bit_depth == 16 else q.tobytes()
        with open(path, "wb") as fh:
            fh.write(header + body)
    else:
        Image.fromarray(q).save(path, format="PNG")


def save_mask(mask: np.ndarray, path) -> None:
    """Binary mask as an 8-bit PNG with values 0/255."""
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    return load_image(path).data >= 0.5


def save_rgb(rgb: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path, format="PNG")
