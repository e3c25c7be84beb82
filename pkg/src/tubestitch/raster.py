"""Shared raster helpers: color conversion, resampling, filtering, image file IO.

All images move through the pipeline as numpy arrays: color frames are
``uint8 [h, w, 3]`` (RGB), grayscale rasters ``uint8 [h, w]``, depth rasters
``float32 [h, w]``.  Pixel coordinates are ``(x, y)`` = (column, row) with the
origin at the top-left corner and y growing downward.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

#: Rec. 601 luminance weights, fixed across the pipeline.
_LUMA = (0.299, 0.587, 0.114)


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """Luminance as round(0.299 R + 0.587 G + 0.114 B), uint8."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an RGB raster, got shape {rgb.shape}")
    chans = rgb.astype(np.float64)
    y = _LUMA[0] * chans[..., 0] + _LUMA[1] * chans[..., 1] + _LUMA[2] * chans[..., 2]
    return round_u8(y)


def round_u8(values: np.ndarray) -> np.ndarray:
    """Round half away from zero and clip into the uint8 range."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``img`` at float positions with bilinear interpolation.

    Positions outside the raster clamp to the nearest edge pixel.  Works for
    2-D rasters and for ``[h, w, c]`` stacks (each channel interpolated
    identically).  Returns float64.
    """
    h, w = img.shape[:2]
    x = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1.0)
    y = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    data = img.astype(np.float64)
    top = data[y0, x0] * (1.0 - fx) + data[y0, x1] * fx
    bot = data[y1, x0] * (1.0 - fx) + data[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def read_image(path) -> np.ndarray:
    """Decode a PNG/PPM/PGM file into an RGB uint8 raster."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except Exception as exc:  # Pillow raises a zoo of decode errors
        raise FormatError(f"cannot decode image file {path}: {exc}") from exc


def write_image(path, raster: np.ndarray) -> None:
    """Encode an RGB or grayscale uint8 raster; format chosen by extension.

    ``.png`` -> PNG, ``.ppm`` -> binary P6, ``.pgm`` -> binary P5.
    """
    path = Path(path)
    arr = np.ascontiguousarray(raster)
    if arr.dtype != np.uint8:
        raise ValueError("rasters are written as uint8")
    suffix = path.suffix.lower()
    if suffix == ".pgm" and arr.ndim == 3:
        raise ValueError("PGM holds a single channel; convert to gray first")
    im = Image.fromarray(arr)
    if suffix == ".png":
        im.save(path, format="PNG")
    elif suffix == ".ppm":
        im.convert("RGB").save(path, format="PPM")
    elif suffix == ".pgm":
        im.convert("L").save(path, format="PPM")  # Pillow emits P5 for mode L
    else:
        raise ValueError(f"unsupported image extension: {path.suffix}")
