"""PSNR and SSIM for images in [0, 1]."""

from __future__ import annotations

import numpy as np

PSNR_CAP = 99.0


def psnr(a, b):
    """10 log10(1 / MSE), capped at 99 dB for identical images."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    mse = np.mean((a - b) ** 2)
    if mse <= 10 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def psnr_masked(a, b, mask):
    """PSNR over the masked pixel set (all channels)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    sel = np.asarray(mask, dtype=bool)
    if not sel.any():
        return PSNR_CAP
    mse = np.mean((a[sel] - b[sel]) ** 2)
    if mse <= 10 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img, win):
    """2-D 'valid' correlation of [H, W] with the window."""
    k = win.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("hwij,ij->hw", view, win)


def ssim(a, b, window_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Structural similarity (Gaussian window, valid region).

    Returns (mean ssim, per-pixel map [H-w+1, W-w+1]) averaged over channels.
    """
    a = np.atleast_3d(np.asarray(a, dtype=np.float64))
    b = np.atleast_3d(np.asarray(b, dtype=np.float64))
    win = _gaussian_window(window_size, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    maps = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = _filter_valid(x, win)
        mu_y = _filter_valid(y, win)
        xx = _filter_valid(x * x, win) - mu_x ** 2
        yy = _filter_valid(y * y, win) - mu_y ** 2
        xy = _filter_valid(x * y, win) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        maps.append(num / den)
    smap = np.mean(maps, axis=0)
    return float(smap.mean()), smap


def ssim_masked_mean(smap, mask, window_size=11):
    """Mean of the SSIM map over mask pixels (mask cropped to the valid region)."""
    off = (window_size - 1) // 2
    core = np.asarray(mask, dtype=bool)[off:off + smap.shape[0], off:off + smap.shape[1]]
    if not core.any():
        return float(smap.mean())
    return float(smap[core].mean())
