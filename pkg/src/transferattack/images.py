"""Pixel-array helpers shared by the oracle boundary and the attacks."""

from __future__ import annotations

import io

import numpy as np
from PIL import Image as PILImage


def quantize(x) -> np.ndarray:
    """Round to the nearest integer (halves away from zero) and clip to uint8."""
    x = np.asarray(x, dtype=np.float64)
    rounded = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(rounded, 0, 255).astype(np.uint8)


def check_image(x, name: str = "image") -> np.ndarray:
    """Validate an ``H x W x C`` array with intensities in ``[0, 255]``."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] not in (1, 3) or min(x.shape) < 1:
        raise ValueError(f"{name} must be HxWxC with C in (1, 3), got shape {x.shape}")
    if x.size and (np.nanmin(x) < 0 or np.nanmax(x) > 255 or not np.all(np.isfinite(x))):
        raise ValueError(f"{name} has intensities outside [0, 255]")
    return x


def as_uint8(x, name: str = "image") -> np.ndarray:
    """Return ``x`` as uint8, refusing arrays that are not already integral."""
    x = check_image(x, name)
    if x.dtype == np.uint8:
        return x
    if not np.array_equal(x, np.round(x)):
        raise ValueError(f"{name} must be quantized to integer intensities before it is sent")
    return x.astype(np.uint8)


def encode_png(x) -> bytes:
    x = as_uint8(x)
    mode = "L" if x.shape[2] == 1 else "RGB"
    buf = io.BytesIO()
    PILImage.fromarray(x[:, :, 0] if mode == "L" else x, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    try:
        img = PILImage.open(io.BytesIO(data))
    except OSError as exc:
        raise ValueError(f"unreadable image data: {exc}") from exc
    with img:
        if img.format != "PNG":
            raise ValueError(f"expected PNG data, got {img.format}")
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr
