"""Image-quality and motion-accuracy metrics."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .data import ImageSequence, MotionFieldSet

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

EXACT = "exact"


class PsnrReport(NamedTuple):
    per_frame: np.ndarray  # dB, +inf where the frame is reproduced exactly
    mean: float

    @property
    def exact(self) -> bool:
        return bool(np.all(np.isinf(self.per_frame)))


def format_db(v: float) -> str:
    return EXACT if math.isinf(v) else f"{v:.4f}"


def _frames(x) -> np.ndarray:
    return x.frames if isinstance(x, ImageSequence) else np.asarray(x)


def psnr(x, ref) -> PsnrReport:
    """Per-frame magnitude PSNR with the peak taken over the whole reference sequence."""
    a = np.abs(_frames(x))
    b = np.abs(_frames(ref))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    peak = float(b.max())
    if peak == 0:
        raise ValueError("reference is identically zero")
    mse = np.mean((a - b) ** 2, axis=(-2, -1))
    with np.errstate(divide="ignore"):
        per = np.where(mse > 0, 10.0 * np.log10(peak**2 / np.where(mse > 0, mse, 1.0)), np.inf)
    return PsnrReport(per, float(np.mean(per)))


def _gauss_window() -> np.ndarray:
    r = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-(r**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    p = SSIM_WIN // 2
    return out[p:-p, p:-p]


def ssim(x: np.ndarray, ref: np.ndarray, data_range: float | None = None) -> float:
    """Magnitude SSIM, 11x11 Gaussian window (sigma 1.5), mean over valid windows.

    The dynamic range defaults to the maximum magnitude of ``ref``, so the
    score is not symmetric in its arguments unless ``data_range`` is given.
    """
    a = np.abs(np.asarray(x)).astype(np.float64)
    b = np.abs(np.asarray(ref)).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    rng = float(b.max()) if data_range is None else float(data_range)
    if rng == 0:
        rng = 1.0
    c1 = (SSIM_K1 * rng) ** 2
    c2 = (SSIM_K2 * rng) ** 2
    g = _gauss_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim_sequence(x, ref) -> np.ndarray:
    a, b = _frames(x), _frames(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.array([ssim(a[t], b[t]) for t in range(a.shape[0])])


class EpeReport(NamedTuple):
    mean: float
    per_pair: np.ndarray  # (N, N) mean EPE over the ROI


def end_point_error(u_est: MotionFieldSet, u_gt: MotionFieldSet, roi=None) -> EpeReport:
    """Mean Euclidean displacement error over ``roi`` pixels and all frame pairs."""
    a = u_est.fields if isinstance(u_est, MotionFieldSet) else np.asarray(u_est)
    b = u_gt.fields if isinstance(u_gt, MotionFieldSet) else np.asarray(u_gt)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    roi = np.ones(a.shape[-2:], bool) if roi is None else np.asarray(roi, bool)
    if roi.shape != a.shape[-2:] or not roi.any():
        raise ValueError("roi must be a non-empty mask on the field grid")
    err = np.sqrt(np.sum((a - b) ** 2, axis=-3))
    per_pair = err[..., roi].mean(axis=-1)
    return EpeReport(float(per_pair.mean()), per_pair)
