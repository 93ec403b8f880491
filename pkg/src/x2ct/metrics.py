"""Reconstruction quality metrics: PSNR, SSIM, Dice, Frechet distance.

PSNR and SSIM come in a volumetric flavor and a slice-averaged flavor
(computed per slice along each storage axis, then averaged over all
slices), since 2D-trained baselines are usually reported slice-wise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Protocol

import numpy as np
from scipy import linalg, ndimage

from .errors import UnsupportedOperationError

PSNR_CAP_DB = 100.0


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(data_range**2 / mse), PSNR_CAP_DB)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    x = np.arange(window, dtype=np.float64) - half
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _windowed_means(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable Gaussian filtering cropped to the fully-valid interior."""
    out = x
    for axis in range(x.ndim):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="constant")
    r = (len(kernel) - 1) // 2
    sl = tuple(slice(r, n - r) for n in x.shape)
    return out[sl]


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    data_range: float = 2.0,
    *,
    window: int = 11,
    sigma: float = 1.5,
) -> float:
    """Structural similarity with a Gaussian window, valid-region mean.

    Works on 2D images and 3D volumes alike (the window becomes a
    separable 2D or 3D Gaussian). Every input extent must be at least
    the window width. Comparing an array against itself returns exactly
    1.0: numerator and denominator of each local term are computed with
    arithmetic that is bitwise identical when a == b.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise ValueError(f"ssim expects a 2D or 3D array, got ndim={a.ndim}")
    if min(a.shape) < window:
        raise ValueError(f"every extent must be >= window ({window}), got {a.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    kernel = _gaussian_kernel(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    mu_a = _windowed_means(a, kernel)
    mu_b = _windowed_means(b, kernel)
    m_aa = _windowed_means(a * a, kernel)
    m_bb = _windowed_means(b * b, kernel)
    m_ab = _windowed_means(a * b, kernel)
    var_a = m_aa - mu_a * mu_a
    var_b = m_bb - mu_b * mu_b
    cov = m_ab - mu_a * mu_b

    num = (mu_a * mu_b + mu_a * mu_b + c1) * (cov + cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _slice_average(metric, a: np.ndarray, b: np.ndarray) -> tuple[float, dict]:
    per_axis = {}
    total, count = 0.0, 0
    for letter, axis in (("A", 0), ("S", 1), ("C", 2)):
        vals = [
            metric(np.take(a, i, axis=axis), np.take(b, i, axis=axis))
            for i in range(a.shape[axis])
        ]
        per_axis[letter] = float(np.mean(vals))
        total += float(np.sum(vals))
        count += len(vals)
    return total / count, per_axis


def psnr_modes(a: np.ndarray, b: np.ndarray, data_range: float = 2.0):
    """Return (psnr_2d_avg, psnr_3d, per_axis_2d) for a pair of volumes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError("psnr_modes expects 3D volumes")
    avg2d, per_axis = _slice_average(lambda x, y: psnr(x, y, data_range), a, b)
    return avg2d, psnr(a, b, data_range), per_axis


def ssim_modes(a: np.ndarray, b: np.ndarray, data_range: float = 2.0):
    """Return (ssim_2d_avg, ssim_3d, per_axis_2d) for a pair of volumes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError("ssim_modes expects 3D volumes")
    avg2d, per_axis = _slice_average(lambda x, y: ssim(x, y, data_range), a, b)
    return avg2d, ssim(a, b, data_range), per_axis


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Dice overlap of two binary masks. Two empty masks count as 1.0."""
    mask_a = np.asarray(mask_a)
    mask_b = np.asarray(mask_b)
    if mask_a.shape != mask_b.shape:
        raise ValueError(f"shape mismatch: {mask_a.shape} vs {mask_b.shape}")
    for m in (mask_a, mask_b):
        if m.dtype != np.bool_ and not np.isin(m, (0, 1)).all():
            raise ValueError("dice expects binary masks (bool or {0,1} valued)")
    a = mask_a.astype(bool)
    b = mask_b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


class FeatureExtractor(Protocol):
    """Maps a stack of 2D slices (n, R, C) to feature vectors (n, d)."""

    def __call__(self, slices: np.ndarray) -> np.ndarray: ...


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    if feats_a.ndim != 2 or feats_b.ndim != 2 or feats_a.shape[1] != feats_b.shape[1]:
        raise ValueError("feature sets must be 2D with matching dimensionality")
    if feats_a.shape == feats_b.shape and np.array_equal(feats_a, feats_b):
        return 0.0
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(feats_a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(feats_b, rowvar=False))
    covmean, _ = linalg.sqrtm(cov_a @ cov_b, disp=False)
    covmean = np.real(covmean)
    d2 = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * covmean))
    return max(d2, 0.0)


def perceptual_metric(vol_a: np.ndarray, vol_b: np.ndarray, extractor: FeatureExtractor | None):
    """Frechet distance over per-slice features of two volumes.

    Slices are taken along the first storage axis. A feature extractor
    must be supplied; there is no bundled pretrained network.
    """
    if extractor is None:
        raise UnsupportedOperationError(
            "perceptual_metric needs a feature extractor; none is bundled"
        )
    vol_a = np.asarray(vol_a, dtype=np.float64)
    vol_b = np.asarray(vol_b, dtype=np.float64)
    if vol_a.shape != vol_b.shape or vol_a.ndim != 3:
        raise ValueError("perceptual_metric expects two 3D volumes of equal shape")
    return frechet_distance(extractor(vol_a), extractor(vol_b))


@dataclass
class MetricReport:
    """All standard metrics for one reconstructed volume."""

    psnr_2d_avg: float
    psnr_3d: float
    ssim_2d_avg: float
    ssim_3d: float
    psnr_2d_by_axis: dict
    ssim_2d_by_axis: dict
    dice: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def compute_report(
    recon: np.ndarray,
    reference: np.ndarray,
    data_range: float = 2.0,
    *,
    dice_masks: tuple[np.ndarray, np.ndarray] | None = None,
) -> MetricReport:
    p2, p3, p_axis = psnr_modes(recon, reference, data_range)
    s2, s3, s_axis = ssim_modes(recon, reference, data_range)
    d = dice(*dice_masks) if dice_masks is not None else None
    return MetricReport(
        psnr_2d_avg=p2,
        psnr_3d=p3,
        ssim_2d_avg=s2,
        ssim_3d=s3,
        psnr_2d_by_axis=p_axis,
        ssim_2d_by_axis=s_axis,
        dice=d,
    )
