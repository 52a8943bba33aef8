"""Image losses and quality metrics (PSNR, SSIM), with analytic loss gradients."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


_WINDOW = _gauss_window()


def _blur(img: np.ndarray) -> np.ndarray:
    # zero-padded "same" filtering; symmetric kernel so the operator is self-adjoint
    out = correlate1d(img, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode="constant", cval=0.0)


def _ssim_terms(a: np.ndarray, b: np.ndarray):
    mu1, mu2 = _blur(a), _blur(b)
    s11 = _blur(a * a) - mu1 * mu1
    s22 = _blur(b * b) - mu2 * mu2
    s12 = _blur(a * b) - mu1 * mu2
    a1 = 2 * mu1 * mu2 + SSIM_C1
    a2 = 2 * s12 + SSIM_C2
    b1 = mu1 * mu1 + mu2 * mu2 + SSIM_C1
    b2 = s11 + s22 + SSIM_C2
    return (a1 * a2) / (b1 * b2), (mu1, mu2, a1, a2, b1, b2)


def ssim(a, b) -> float:
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5, peak 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    smap, _ = _ssim_terms(a, b)
    return float(smap.mean())


def ssim_grad(a, b):
    """(SSIM, dSSIM/da)."""
    smap, (mu1, mu2, a1, a2, b1, b2) = _ssim_terms(a, b)
    g = np.full_like(smap, 1.0 / smap.size)
    d_mu1 = g * smap * (2 * mu2 / a1 - 2 * mu2 / a2 - 2 * mu1 / b1 + 2 * mu1 / b2)
    d_e11 = g * smap * (-1.0 / b2)
    d_e12 = g * smap * (2.0 / a2)
    grad = _blur(d_mu1) + 2 * a * _blur(d_e11) + b * _blur(d_e12)
    return float(smap.mean()), grad


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def loss(pred, target, lambda_dssim: float = 0.2):
    """(1 - lambda) * L1 + lambda * (1 - SSIM); returns (value, dL/dpred)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diff = pred - target
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - lambda_dssim) * np.sign(diff) / diff.size
    value = (1.0 - lambda_dssim) * l1
    if lambda_dssim:
        s, sg = ssim_grad(pred, target)
        value += lambda_dssim * (1.0 - s)
        grad -= lambda_dssim * sg
    return max(value, 0.0), grad
