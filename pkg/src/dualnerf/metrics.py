"""Image fidelity and segmentation metrics for evaluation runs."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

PSNR_CAP = 99.0


def psnr(a, b, cap=PSNR_CAP):
    """10*log10(1/MSE) for images in [0, 1]; identical images hit the cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse <= 0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def ssim(a, b, window=8, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean structural similarity over all uniform windows.

    Uniform (box) window of size ``window`` slid over every valid
    position, computed per channel and averaged.  Inputs in [0, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < window:
        raise ShapeError(f"ssim: image smaller than {window}x{window} window")
    vals = []
    for c in range(a.shape[2]):
        wa = np.lib.stride_tricks.sliding_window_view(a[..., c], (window, window))
        wb = np.lib.stride_tricks.sliding_window_view(b[..., c], (window, window))
        mu_a = wa.mean(axis=(-1, -2))
        mu_b = wb.mean(axis=(-1, -2))
        var_a = wa.var(axis=(-1, -2))
        var_b = wb.var(axis=(-1, -2))
        cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
             / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
        vals.append(s.mean())
    return float(np.mean(vals))


def mask_iou(a, b):
    """Intersection over union of two boolean masks; empty/empty is 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask_iou: shapes {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
