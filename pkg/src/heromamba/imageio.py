"""8-bit RGB image read/write (PNG by default) as 3 x H x W float arrays."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

_EIGHT_BIT_MODES = {"RGB", "RGBA", "L", "LA", "P", "1"}


def read_image(path) -> np.ndarray:
    """Decode an 8-bit image into a float64 3 x H x W array in [0, 1].

    Grayscale images are promoted to three identical channels and alpha is
    dropped. Images with more than 8 bits per sample are rejected rather
    than truncated.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in _EIGHT_BIT_MODES:
                raise ValueError(f"{path}: unsupported image mode {mode!r} (need 8-bit RGB or grayscale)")
            if mode in ("L", "1"):
                arr = np.asarray(im.convert("L"))
                arr = np.repeat(arr[None], 3, axis=0)
            else:
                arr = np.asarray(im.convert("RGB")).transpose(2, 0, 1)
    except UnidentifiedImageError as exc:
        raise ValueError(f"{path}: not a decodable image") from exc
    except (SyntaxError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ValueError(f"{path}: corrupt image ({exc})") from exc
    return arr.astype(np.float64) / 255.0


def to_uint8(img) -> np.ndarray:
    """Quantize [0, 1] values to 8 bits, rounding half away from zero."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(x + 0.5).astype(np.uint8)


def write_image(img, path) -> None:
    """Encode a 3 x H x W (or H x W) [0, 1] array as an 8-bit image."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("refusing to write an image with non-finite values")
    Image.fromarray(to_uint8(arr).transpose(1, 2, 0), "RGB").save(Path(path))
