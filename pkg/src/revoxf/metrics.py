"""Image quality metrics, computed in float64."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .errors import DomainError

PSNR_INF = "inf"
_LUMA = np.array([0.299, 0.587, 0.114])


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img[..., :3] @ _LUMA
    return img


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03):
    """Local SSIM over every full window position (no padding)."""
    a, b = _pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < size:
        raise DomainError(f"images smaller than the {size}x{size} window")
    w = gaussian_window(size, sigma)

    def filt(z):
        return fftconvolve(z, w, mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1, c2 = k1 ** 2, k2 ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(a, b, **kw) -> float:
    return float(np.clip(np.mean(ssim_map(a, b, **kw)), -1.0, 1.0))


def encode_psnr(v: float):
    return PSNR_INF if math.isinf(v) else v


@dataclass
class MetricReport:
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    names: list = field(default_factory=list)
    timings: dict | None = None

    def add(self, name: str, pred, gt) -> None:
        self.names.append(name)
        self.psnr.append(psnr(pred, gt))
        self.ssim.append(ssim(pred, gt))

    @property
    def count(self) -> int:
        return len(self.psnr)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def to_dict(self) -> dict:
        return {
            "views": [
                {"name": n, "psnr": encode_psnr(p), "ssim": s}
                for n, p, s in zip(self.names, self.psnr, self.ssim)
            ],
            "mean_psnr": encode_psnr(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
            "count": self.count,
            "lpips": None,
            "timings": self.timings,
        }
