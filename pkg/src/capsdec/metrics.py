"""Image similarity: MSE, Pearson correlation and windowed SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError

K1, K2 = 0.01, 0.03


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricTriple:
    mse: float
    pcc: float
    ssim: float


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def pcc(a, b) -> float:
    a, b = _pair(a, b)
    x = a.ravel() - a.mean()
    y = b.ravel() - b.mean()
    sx = np.sqrt(x @ x)
    sy = np.sqrt(y @ y)
    if sx == 0 or sy == 0:
        raise UndefinedMetricError("correlation is undefined for a constant image")
    return float(np.clip((x @ y) / (sx * sy), -1.0, 1.0))


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, window: int = 7, sigma: float = 1.5, data_range: float = 1.0) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim != 2:
        a = a.reshape(a.shape[-2:])
        b = b.reshape(b.shape[-2:])
    if a.shape[0] < window or a.shape[1] < window:
        raise DimensionError(f"image {a.shape} smaller than the {window}×{window} window")
    w = gaussian_window(window, sigma)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, (window, window)), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window: int = 7, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean SSIM over every valid (unpadded) Gaussian-window position."""
    return float(np.mean(ssim_map(a, b, window, sigma, data_range)))


def score(reference, candidate, window: int = 7) -> MetricTriple:
    return MetricTriple(mse(reference, candidate), pcc(reference, candidate), ssim(reference, candidate, window))
