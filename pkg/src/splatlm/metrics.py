"""Image quality metrics and the diagonal SSIM residual used as a training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 100.0
SSIM_LOSS_WEIGHT = 0.2


def _check_shapes(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_shapes(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for peak 1.0, capped at 100 dB."""
    err = mse(a, b)
    if err < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    out = correlate1d(img, window, axis=0, mode="reflect")
    return correlate1d(out, window, axis=1, mode="reflect")


def _as_channels(img: np.ndarray) -> np.ndarray:
    return img[..., None] if img.ndim == 2 else img


def _local_stats(a: np.ndarray, b: np.ndarray, window: np.ndarray):
    mu_a, mu_b = _filter(a, window), _filter(b, window)
    var_a = _filter(a * a, window) - mu_a * mu_a
    var_b = _filter(b * b, window) - mu_b * mu_b
    cov = _filter(a * b, window) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel, per-channel local SSIM with reflect padding, shape (H, W, C)."""
    a, b = _check_shapes(a, b)
    a, b = _as_channels(a), _as_channels(b)
    mu_a, mu_b, var_a, var_b, cov = _local_stats(a, b, gaussian_window())
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    """Mean of the local SSIM map over all pixels and channels."""
    return float(np.mean(ssim_map(a, b)))


def _center_weights(n: int, window: np.ndarray) -> np.ndarray:
    """Total window weight that lands on the center sample itself, per position.

    Reflect padding can map several taps of a border window onto the center.
    """
    half = len(window) // 2
    out = np.zeros(n)
    for i in range(n):
        for k, wk in enumerate(window):
            j = i + k - half
            # half-sample symmetric reflection, as in scipy's "reflect" mode
            while j < 0 or j >= n:
                j = -j - 1 if j < 0 else 2 * n - j - 1
            if j == i:
                out[i] += wk
    return out


def ssim_diag_residuals(rendered, gt):
    """Residuals sqrt(max(0, 1 - SSIM_local)) and their center-pixel derivatives.

    The derivative is taken with respect to the rendered value at the same
    pixel only; contributions through neighboring windows are dropped.
    """
    a, b = _check_shapes(rendered, gt)
    a, b = _as_channels(a), _as_channels(b)
    window = gaussian_window()
    mu_a, mu_b, var_a, var_b, cov = _local_stats(a, b, window)
    a1 = 2 * mu_a * mu_b + SSIM_C1
    a2 = 2 * cov + SSIM_C2
    b1 = mu_a**2 + mu_b**2 + SSIM_C1
    b2 = var_a + var_b + SSIM_C2
    s_map = a1 * a2 / (b1 * b2)
    g0 = np.outer(_center_weights(a.shape[0], window), _center_weights(a.shape[1], window))[..., None]

    d_ssim = (
        (2 * g0 * mu_b * a2 + a1 * 2 * g0 * (b - mu_b)) / (b1 * b2)
        - s_map * (2 * mu_a * g0 / b1 + 2 * g0 * (a - mu_a) / b2)
    )
    res = np.sqrt(np.maximum(0.0, 1.0 - s_map))
    safe = np.where(res > 0, res, 1.0)
    deriv = np.where(res > 0, -d_ssim / (2 * safe), 0.0)
    return res, deriv


def combined_loss(rendered, gt, ssim_weight: float = SSIM_LOSS_WEIGHT) -> float:
    """MSE plus ``ssim_weight`` times the mean squared SSIM residual."""
    base = mse(rendered, gt)
    if ssim_weight == 0:
        return base
    res, _ = ssim_diag_residuals(rendered, gt)
    return base + ssim_weight * float(np.mean(res**2))


@dataclass
class MetricReport:
    mse: float
    psnr: float
    ssim: float

    def as_dict(self) -> dict:
        return {"mse": self.mse, "psnr": self.psnr, "ssim": self.ssim}


def evaluate(rendered_images, gt_images) -> MetricReport:
    """Metrics averaged over image pairs (PSNR averaged per image)."""
    pairs = list(zip(rendered_images, gt_images))
    if not pairs:
        raise ValueError("no images to evaluate")
    return MetricReport(
        mse=float(np.mean([mse(r, g) for r, g in pairs])),
        psnr=float(np.mean([psnr(r, g) for r, g in pairs])),
        ssim=float(np.mean([ssim(r, g) for r, g in pairs])),
    )
