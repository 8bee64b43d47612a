"""Reconstruction quality metrics on images with intensities in ``[0, peak]``."""
from typing import NamedTuple

import numpy as np

from ldarecon.errors import InvalidArgument

PSNR_CAP = 100.0


class MetricsRow(NamedTuple):
    psnr: float
    rel_err: float
    ssim: float


def _pair(x, x_hat):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise InvalidArgument(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return x, x_hat


def psnr(x, x_hat, peak=1.0):
    """``10 log10(peak^2 / MSE)`` in dB, capped at 100 dB for identical images."""
    if not peak > 0:
        raise InvalidArgument("peak must be positive")
    x, x_hat = _pair(x, x_hat)
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def rel_err(x, x_hat):
    """``|x - x_hat| / |x_hat|``; not symmetric in its arguments."""
    x, x_hat = _pair(x, x_hat)
    denom = np.linalg.norm(x_hat)
    if denom == 0.0:
        raise InvalidArgument("reference image is zero")
    return float(np.linalg.norm(x - x_hat) / denom)


def gaussian_window(size=11, sigma=1.5):
    t = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (t / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img, w):
    # separable correlation, keeping only fully supported positions
    k = w.size
    rows = sum(w[i] * img[i:img.shape[0] - k + 1 + i, :] for i in range(k))
    return sum(w[j] * rows[:, j:rows.shape[1] - k + 1 + j] for j in range(k))


def ssim(x, x_hat, peak=1.0, win_size=11, sigma=1.5):
    """Mean structural similarity over all fully covered 11x11 Gaussian windows."""
    x, x_hat = _pair(x, x_hat)
    if x.ndim != 2 or min(x.shape) < win_size:
        raise InvalidArgument(f"ssim needs a 2-D image of at least {win_size}x{win_size}")
    w = gaussian_window(win_size, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mx = _filter_valid(x, w)
    my = _filter_valid(x_hat, w)
    vx = _filter_valid(x * x, w) - mx * mx
    vy = _filter_valid(x_hat * x_hat, w) - my * my
    cxy = _filter_valid(x * x_hat, w) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def metrics_row(x, x_hat, peak=1.0):
    return MetricsRow(psnr(x, x_hat, peak), rel_err(x, x_hat), ssim(x, x_hat, peak))
