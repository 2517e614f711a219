"""Image comparison metrics: windowed SSIM, MSSIM and masked relative RMSE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "SsimParams",
    "gaussian_window",
    "ssim_map",
    "mssim",
    "masked_relative_rmse",
    "log_intensity",
]


@dataclass(frozen=True)
class SsimParams:
    """SSIM settings. ``dynamic_range=None`` uses max - min over both images."""

    window: int = 9
    gaussian_sigma: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: Optional[float] = None

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd integer")
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be positive")
        if self.dynamic_range is not None and self.dynamic_range <= 0:
            raise ValueError("dynamic_range must be positive")


def gaussian_window(size, sigma):
    """Circularly symmetric Gaussian weights on a size x size grid, summing to 1."""
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def _prepare(reference, test, params):
    x = np.asarray(reference, dtype=float)
    y = np.asarray(test, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise ValueError("images must be 2-D")
    if params.window > min(x.shape):
        raise ValueError(f"window {params.window} larger than image {x.shape}")
    return x, y


def ssim_map(reference, test, params=None):
    """SSIM for every fully contained window position (stride 1, no padding).

    Output shape is ``(H - window + 1, W - window + 1)``. Local statistics
    are Gaussian-weighted means, variances and covariance.
    """
    params = SsimParams() if params is None else params
    x, y = _prepare(reference, test, params)
    if params.dynamic_range is None:
        L = max(x.max(), y.max()) - min(x.min(), y.min())
    else:
        L = params.dynamic_range
    c1 = (params.k1 * L) ** 2
    c2 = (params.k2 * L) ** 2
    w = gaussian_window(params.window, params.gaussian_sigma)
    xw = sliding_window_view(x, w.shape)
    yw = sliding_window_view(y, w.shape)
    mu_x = np.einsum("ijkl,kl->ij", xw, w)
    mu_y = np.einsum("ijkl,kl->ij", yw, w)
    dx = xw - mu_x[..., None, None]
    dy = yw - mu_y[..., None, None]
    var_x = np.einsum("ijkl,kl->ij", dx * dx, w)
    var_y = np.einsum("ijkl,kl->ij", dy * dy, w)
    cov = np.einsum("ijkl,kl->ij", dx * dy, w)
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    if L == 0:
        # both images are the same constant
        return np.ones_like(num)
    return num / den


def mssim(reference, test, params=None):
    """Mean of :func:`ssim_map` over all window placements."""
    return float(np.mean(ssim_map(reference, test, params)))


def masked_relative_rmse(fused, truth, mask):
    """``sqrt(mean(((fused - truth) / truth)^2))`` over ``mask``."""
    fused = np.asarray(fused, dtype=float)
    truth = np.asarray(truth, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if fused.shape != truth.shape or mask.shape != truth.shape:
        raise ValueError("fused, truth and mask must share a shape")
    if not mask.any():
        raise ValueError("mask is empty")
    t = truth[mask]
    if np.any(t <= 0):
        raise ValueError("truth must be strictly positive on the mask")
    rel = (fused[mask] - t) / t
    return float(np.sqrt(np.mean(rel * rel)))


def log_intensity(image):
    """``log(1 + image)`` for nonnegative images, used before comparing diffraction data."""
    image = np.asarray(image, dtype=float)
    if np.any(image < 0):
        raise ValueError("log_intensity expects a nonnegative image")
    return np.log1p(image)
