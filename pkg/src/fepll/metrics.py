"""PSNR and single-scale SSIM on [0, 1] images."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import DataError

__all__ = ["MetricReport", "mse", "psnr", "ssim", "evaluate"]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_dims(x: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise DataError(f"image shapes differ: {x.shape} vs {ref.shape}")
    return x, ref


def mse(x: np.ndarray, ref: np.ndarray) -> float:
    x, ref = _check_dims(x, ref)
    return float(np.mean((x - ref) ** 2))


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); +inf for identical images."""
    err = mse(x, ref)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def _ssim_window() -> np.ndarray:
    ax = np.arange(SSIM_WINDOW, dtype=np.float64) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-0.5 * (ax / SSIM_SIGMA) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x: np.ndarray, ref: np.ndarray, dynamic_range: float = 1.0) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows
    (sigma 1.5, k1 = 0.01, k2 = 0.03)."""
    x, ref = _check_dims(x, ref)
    if min(x.shape) < SSIM_WINDOW:
        raise DataError(f"images must be at least {SSIM_WINDOW} pixels per side")
    w = _ssim_window()
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    mu_x = fftconvolve(x, w, mode="valid")
    mu_y = fftconvolve(ref, w, mode="valid")
    xx = fftconvolve(x * x, w, mode="valid") - mu_x ** 2
    yy = fftconvolve(ref * ref, w, mode="valid") - mu_y ** 2
    xy = fftconvolve(x * ref, w, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    mse: float


def evaluate(x: np.ndarray, ref: np.ndarray) -> MetricReport:
    return MetricReport(psnr(x, ref), ssim(x, ref), mse(x, ref))
