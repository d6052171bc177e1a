"""Full-reference image quality: PSNR, SSIM and pixel-domain VIF.

The first argument is always the reference image. Inputs are 2D arrays (or
:class:`~aniso_sr.volume_io.Slice` objects) with intensities in
``[0, data_range]``.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..volume_io import DegenerateInputError, VolumeShapeError

PSNR_CAP_DB = 100.0
VIF_VARIANT = "VIFp"


def _as_image(x) -> np.ndarray:
    data = getattr(x, "data", x)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise VolumeShapeError(f"expected a 2D image, got shape {arr.shape}")
    return arr


def _pair(ref, test) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_image(ref), _as_image(test)
    if a.shape != b.shape:
        raise VolumeShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def filter_valid(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable correlation with ``outer(k1d, k1d)``, keeping only full windows."""
    n = k1d.size
    rows = sliding_window_view(img, n, axis=0) @ k1d
    return sliding_window_view(rows, n, axis=1) @ k1d


# ---------------------------------------------------------------------------


def psnr(ref, test, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    a, b = _pair(ref, test)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(ref, test, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all full Gaussian-window positions (no padding)."""
    a, b = _pair(ref, test)
    if min(a.shape) < window:
        raise VolumeShapeError(f"image {a.shape} smaller than the {window}x{window} SSIM window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    g = gaussian_kernel1d(window, sigma)
    mu_a, mu_b = filter_valid(a, g), filter_valid(b, g)
    var_a = filter_valid(a * a, g) - mu_a * mu_a
    var_b = filter_valid(b * b, g) - mu_b * mu_b
    cov = filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def vif_scales(scales: int = 4) -> list[tuple[int, float]]:
    """(kernel size, sigma) per scale, finest first: 17/3.4, 9/1.8, 5/1.0, 3/0.6."""
    out = []
    for s in range(1, scales + 1):
        size = 2 ** (scales - s + 1) + 1
        out.append((size, size / 5.0))
    return out


def vif(ref, test, scales: int = 4, sigma_nsq: float = 2.0, data_range: float = 1.0,
        eps: float = 1e-10) -> float:
    """Pixel-domain visual information fidelity of ``test`` against ``ref``.

    Intensities are rescaled to 0..255 so ``sigma_nsq`` keeps its usual
    meaning. Each scale smooths with a normalized Gaussian; coarser scales
    are smoothed and decimated by 2 before local statistics are taken.
    """
    a, b = _pair(ref, test)
    a = a * (255.0 / data_range)
    b = b * (255.0 / data_range)
    num = den = 0.0
    for s, (size, sd) in enumerate(vif_scales(scales), start=1):
        g = gaussian_kernel1d(size, sd)
        if s > 1:
            if min(a.shape) < size:
                raise VolumeShapeError(f"image too small for VIF scale {s}")
            a = filter_valid(a, g)[::2, ::2]
            b = filter_valid(b, g)[::2, ::2]
        if min(a.shape) < size:
            raise VolumeShapeError(f"image too small for VIF scale {s}")
        mu_a, mu_b = filter_valid(a, g), filter_valid(b, g)
        var_a = np.maximum(filter_valid(a * a, g) - mu_a * mu_a, 0.0)
        var_b = np.maximum(filter_valid(b * b, g) - mu_b * mu_b, 0.0)
        cov = filter_valid(a * b, g) - mu_a * mu_b

        gain = cov / (var_a + eps)
        sv = var_b - gain * cov
        flat_ref = var_a < eps
        gain = np.where(flat_ref, 0.0, gain)
        sv = np.where(flat_ref, var_b, sv)
        var_a = np.where(flat_ref, 0.0, var_a)
        flat_test = var_b < eps
        gain = np.where(flat_test, 0.0, gain)
        sv = np.where(flat_test, 0.0, sv)
        negative = gain < 0
        sv = np.where(negative, var_b, sv)
        gain = np.where(negative, 0.0, gain)
        sv = np.maximum(sv, eps)

        num += float(np.sum(np.log2(1.0 + gain * gain * var_a / (sv + sigma_nsq))))
        den += float(np.sum(np.log2(1.0 + var_a / sigma_nsq)))
    if den <= 0.0:
        raise DegenerateInputError("VIF undefined: reference has no local variance")
    return num / den
