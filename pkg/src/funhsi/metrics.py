"""Image-quality metrics on reconstructed cubes. Plain numpy, no autodiff."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("cube shapes differ: %r vs %r" % (a.shape, b.shape))
    if a.ndim != 3:
        raise ShapeError("expected [H,W,N] cubes, got %r" % (a.shape,))
    return a, b


def psnr(x_hat, x, peak=1.0):
    """Per-band 10 log10(peak^2 / MSE), averaged over bands, capped at 100 dB."""
    a, b = _check_pair(x_hat, x)
    vals = []
    for n in range(a.shape[2]):
        mse = np.mean((a[:, :, n] - b[:, :, n]) ** 2)
        if mse == 0.0:
            vals.append(PSNR_CAP_DB)
        else:
            vals.append(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB))
    return float(np.mean(vals))


def _gauss_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _filt(img, w):
    win = sliding_window_view(img, w.shape)
    return np.tensordot(win, w, axes=([2, 3], [0, 1]))


def ssim(x_hat, x, peak=1.0):
    """Band-averaged SSIM, 11x11 Gaussian window (sigma 1.5), valid region only."""
    a, b = _check_pair(x_hat, x)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ShapeError("cube %r too small for an 11x11 window" % (a.shape,))
    w = _gauss_window()
    c1 = (_SSIM_K1 * peak) ** 2
    c2 = (_SSIM_K2 * peak) ** 2
    vals = []
    for n in range(a.shape[2]):
        p, q = a[:, :, n], b[:, :, n]
        mu_p = _filt(p, w)
        mu_q = _filt(q, w)
        var_p = _filt(p * p, w) - mu_p * mu_p
        var_q = _filt(q * q, w) - mu_q * mu_q
        cov = _filt(p * q, w) - mu_p * mu_q
        num = (2.0 * mu_p * mu_q + c1) * (2.0 * cov + c2)
        den = (mu_p * mu_p + mu_q * mu_q + c1) * (var_p + var_q + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def sam(x_hat, x, return_excluded=False):
    """Mean spectral angle in degrees; zero-norm pixels are left out.

    With return_excluded=True also reports how many pixels were skipped.
    """
    a, b = _check_pair(x_hat, x)
    flat_a = a.reshape(-1, a.shape[2])
    flat_b = b.reshape(-1, b.shape[2])
    na = np.linalg.norm(flat_a, axis=1)
    nb = np.linalg.norm(flat_b, axis=1)
    valid = (na > 0.0) & (nb > 0.0)
    excluded = int(np.count_nonzero(~valid))
    if not valid.any():
        deg = 0.0
    else:
        va, vb = flat_a[valid], flat_b[valid]
        cos = np.sum(va * vb, axis=1) / (na[valid] * nb[valid])
        ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
        # arccos loses the exact zero for identical spectra (cos rounds just
        # below 1); pin those pixels instead of leaking ~1e-6 degrees
        ang[np.all(va == vb, axis=1)] = 0.0
        deg = float(ang.mean())
    if return_excluded:
        return deg, excluded
    return deg


def metrics_row(scene_id, psnr_db, ssim_v, sam_deg):
    return "%s\tpsnr=%.4f\tssim=%.6f\tsam=%.4f" % (scene_id, psnr_db, ssim_v, sam_deg)
