"""Image distance and attack-success metrics.

Images are ``H x W x C`` arrays with intensities in ``[0, 255]``. A 2-D array
is treated as a single-channel image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_INTENSITY = 255.0

# returned by psnr() when the images are identical (mse == 0)
PSNR_IDENTICAL = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * MAX_INTENSITY) ** 2
SSIM_C2 = (0.03 * MAX_INTENSITY) ** 2


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: Optional[float]
    linf: float
    mse: float
    identical: bool = False

    def to_dict(self):
        return asdict(self)


def _as_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError(f"expected an HxWxC image, got array of shape {x.shape}")
    return x


def _pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    """Mean squared error over all rows, columns and channels."""
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with a peak of 255.

    Identical images have no finite PSNR; ``PSNR_IDENTICAL`` is returned so
    that averages over a batch stay finite.
    """
    err = mse(a, b)
    if err == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(MAX_INTENSITY**2 / err)


def linf_distance(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.max(np.abs(a - b)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian taps; the 2-D window is their outer product."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(r**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation of a 2-D array
    rows = sliding_window_view(img, taps.size, axis=0) @ taps
    return sliding_window_view(rows, taps.size, axis=1) @ taps


def _ssim_channel(x: np.ndarray, y: np.ndarray, taps: np.ndarray) -> float:
    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(y, taps)
    sxx = _filter_valid(x * x, taps) - mu_x * mu_x
    syy = _filter_valid(y * y, taps) - mu_y * mu_y
    sxy = _filter_valid(x * y, taps) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean structural similarity (Wang et al. 2004).

    Local statistics use an ``window x window`` Gaussian with standard
    deviation ``sigma``; only windows fully inside the image are scored. The
    per-channel means are averaged.
    """
    a, b = _pair(a, b)
    h, w, _ = a.shape
    if min(h, w) < window:
        raise ValueError(f"image {h}x{w} is smaller than the {window}x{window} SSIM window")
    taps = gaussian_window(window, sigma)
    vals = [_ssim_channel(a[:, :, c], b[:, :, c], taps) for c in range(a.shape[2])]
    return float(np.mean(vals))


def metric_report(adversarial, original) -> MetricReport:
    """All distances for a pair; SSIM is ``None`` when the image is below window size."""
    a, b = _pair(adversarial, original)
    err = float(np.mean((a - b) ** 2))
    try:
        s = ssim(a, b)
    except ValueError:
        s = None
    return MetricReport(
        psnr=psnr(a, b),
        ssim=s,
        linf=float(np.max(np.abs(a - b))),
        mse=err,
        identical=err == 0.0,
    )


def escape_rate(verdicts: Iterable[Sequence]) -> float:
    """Fraction of ``(true_label, predicted_label)`` pairs that disagree."""
    verdicts = list(verdicts)
    if not verdicts:
        raise ValueError("escape_rate needs at least one verdict")
    wrong = sum(1 for truth, pred in verdicts if pred != truth)
    return wrong / len(verdicts)
