"""Raster conventions and image file I/O.

Images are plain numpy arrays:

* gray image   -- 2D float64, values in [0, 1]
* image stack  -- 3D float64 (depth, height, width), depth >= 1
* binary mask  -- 2D uint8 in {0, 1}
* instance mask-- 2D int32, 0 = background, 1..n = objects, no gaps

Files are single-channel PNG (8 or 16 bit) or binary PGM (P5). Instance
masks are stored as 16-bit PNG with the label as the pixel value.
"""

import os
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "ImageIOError", "MissingImageError", "MultiChannelImageError", "CorruptImageError",
    "LabelRangeError", "as_gray", "as_stack", "as_binary", "as_instance",
    "relabel_sequential", "binarize", "load_gray", "save_gray",
    "load_instance_mask", "save_instance_mask", "load_stack", "save_rgb",
]


class ImageIOError(Exception):
    """Base class for image file errors."""


class MissingImageError(ImageIOError, FileNotFoundError):
    pass


class MultiChannelImageError(ImageIOError):
    pass


class CorruptImageError(ImageIOError):
    pass


class LabelRangeError(ImageIOError, ValueError):
    """Instance labels cannot be stored as 16-bit integers."""


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def as_gray(img):
    """Validate and return a 2D float64 image with finite values in [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"gray image must be 2D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("gray image contains non-finite values")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError("gray image values must lie in [0, 1]")
    return a


def as_stack(stack):
    """Promote a 2D image to a depth-1 stack; validate a 3D stack."""
    a = np.asarray(stack, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[0] < 1:
        raise ValueError(f"image stack must be (depth, height, width), got {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("image stack contains non-finite values")
    return a


def as_binary(mask):
    a = np.asarray(mask)
    if a.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {a.shape}")
    if a.dtype == bool:
        return a.astype(np.uint8)
    if not np.isin(a, (0, 1)).all():
        raise ValueError("binary mask values must be 0 or 1")
    return a.astype(np.uint8)


def binarize(labels):
    return (np.asarray(labels) > 0).astype(np.uint8)


def relabel_sequential(labels):
    """Map the positive labels onto 1..n keeping their relative order."""
    a = np.asarray(labels)
    if a.size == 0:
        return a.astype(np.int32)
    values = np.unique(a)
    values = values[values > 0]
    lut = np.zeros(int(a.max()) + 1 if a.max() > 0 else 1, dtype=np.int32)
    lut[values] = np.arange(1, len(values) + 1, dtype=np.int32)
    return lut[a]


def as_instance(labels):
    """Validate an integer label image and compact its labels."""
    a = np.asarray(labels)
    if a.ndim != 2:
        raise ValueError(f"instance mask must be 2D, got shape {a.shape}")
    if not np.issubdtype(a.dtype, np.integer):
        if not np.issubdtype(a.dtype, np.floating) or not np.all(np.mod(a, 1) == 0):
            raise ValueError("instance labels must be integers")
        a = a.astype(np.int64)
    if a.size and a.min() < 0:
        raise ValueError("instance labels must be non-negative")
    return relabel_sequential(a)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

_MODE_MAX = {"L": 255, "1": 255, "I;16": 65535, "I;16B": 65535, "I;16L": 65535, "I": 65535}


def _open_raw(path):
    path = Path(path)
    if not path.is_file():
        raise MissingImageError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if im.getbands() != (im.getbands()[0],) or mode not in _MODE_MAX:
                raise MultiChannelImageError(f"{path}: expected a single-channel image, got mode {mode}")
            if mode == "1":
                im = im.convert("L")
            arr = np.array(im)
    except UnidentifiedImageError as exc:
        raise CorruptImageError(f"{path}: unreadable image ({exc})") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, ImageIOError):
            raise
        raise CorruptImageError(f"{path}: {exc}") from exc
    if mode == "I" and (arr.min() < 0 or arr.max() > 65535):
        raise CorruptImageError(f"{path}: pixel values outside the 16-bit range")
    return arr, _MODE_MAX[mode]


def load_gray(path):
    """Read a single-channel PNG/PGM and scale it to [0, 1] by the type max."""
    arr, vmax = _open_raw(path)
    return arr.astype(np.float64) / vmax


def _atomic_save(im, path, **kw):
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".ppm") else "PNG"
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        im.save(tmp, format=fmt, **kw)
        os.replace(tmp, path)
    except OSError as exc:
        if tmp.exists():
            tmp.unlink()
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def quantize(img, bit_depth=8):
    """Round-half-up quantization of [0, 1] values to unsigned integers."""
    vmax = {8: 255, 16: 65535}.get(bit_depth)
    if vmax is None:
        raise ValueError("bit_depth must be 8 or 16")
    a = as_gray(img)
    q = np.floor(a * vmax + 0.5)
    return q.astype(np.uint8 if bit_depth == 8 else np.uint16)


def save_gray(img, path, bit_depth=8):
    """Write a [0, 1] image as 8- or 16-bit single-channel PNG or PGM."""
    q = quantize(img, bit_depth)
    _atomic_save(Image.fromarray(q if bit_depth == 8 else q.astype("<u2")), path)


def load_instance_mask(path):
    """Read a label PNG; labels are compacted to 1..n on load."""
    arr, _ = _open_raw(path)
    return as_instance(arr.astype(np.int64))


def save_instance_mask(labels, path):
    a = np.asarray(labels)
    if not np.issubdtype(a.dtype, np.integer):
        raise ValueError("instance labels must be integers")
    if a.ndim != 2:
        raise ValueError(f"instance mask must be 2D, got shape {a.shape}")
    if a.size and (a.min() < 0 or a.max() > 65535):
        raise LabelRangeError("instance labels must lie in [0, 65535]")
    _atomic_save(Image.fromarray(a.astype("<u2")), path)


def load_stack(path):
    """A single image file becomes a depth-1 stack; a directory is read as
    its sorted PNG/PGM files, one plane per file."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".pgm"))
        if not files:
            raise MissingImageError(f"no PNG/PGM files in {path}")
        planes = [load_gray(p) for p in files]
        if len({p.shape for p in planes}) != 1:
            raise ValueError(f"planes in {path} differ in size")
        return np.stack(planes), files
    return load_gray(path)[None], [path]


def save_rgb(rgb, path):
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) array")
    _atomic_save(Image.fromarray(np.clip(a, 0, 255).astype(np.uint8)), path)
