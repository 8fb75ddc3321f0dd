"""MSE, PSNR and SSIM for flat vectors and small image grids."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_PIXEL = 255.0
PSNR_CAP = 200.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_value: float = MAX_PIXEL) -> float:
    """PSNR in dB; identical inputs give the capped value ``PSNR_CAP``."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    if not np.isfinite(err):
        return float("nan")
    return float(min(10.0 * np.log10(max_value**2 / err), PSNR_CAP))


def psnr_latent(reference, estimate) -> float:
    """PSNR over latent vectors with the peak taken as ``max |reference|``."""
    peak = float(np.max(np.abs(reference)))
    return psnr(reference, estimate, max_value=peak if peak > 0 else 1.0)


def ssim(a, b, window: int = SSIM_WINDOW, data_range: float = MAX_PIXEL) -> float:
    """Mean SSIM over every ``window x window`` patch (stride 1, uniform weights).

    Window statistics are population moments. 3-D inputs are treated as
    ``(channels, h, w)`` and the per-channel scores are averaged.
    """
    a, b = _pair(a, b)
    if a.ndim == 3:
        return float(np.mean([ssim(ac, bc, window, data_range) for ac, bc in zip(a, b)]))
    if a.ndim != 2:
        raise ValueError(f"ssim expects a 2-D grid, got shape {a.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    pa = sliding_window_view(a, (window, window))
    pb = sliding_window_view(b, (window, window))
    mu_a = pa.mean(axis=(-2, -1))
    mu_b = pb.mean(axis=(-2, -1))
    var_a = (pa * pa).mean(axis=(-2, -1)) - mu_a**2
    var_b = (pb * pb).mean(axis=(-2, -1)) - mu_b**2
    cov = (pa * pb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def to_pixels(x, shape, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Map latent values in ``[low, high]`` onto the 8-bit range and clip."""
    x = np.asarray(x, dtype=np.float64).reshape(shape)
    return np.clip((x - low) / (high - low) * MAX_PIXEL, 0.0, MAX_PIXEL)


def fidelity_row(reference, estimate, shape=None) -> dict:
    """Latent-domain MSE/PSNR plus pixel-domain SSIM when the grid allows it."""
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if not np.all(np.isfinite(estimate)):
        return {"mse": float("nan"), "psnr": float("nan"), "ssim": float("nan")}
    row = {"mse": mse(reference, estimate), "psnr": psnr_latent(reference, estimate), "ssim": float("nan")}
    if shape is not None and min(shape[-2:]) >= SSIM_WINDOW:
        row["ssim"] = ssim(to_pixels(reference, shape), to_pixels(estimate, shape))
    return row
