"""Training objective (mean L1 minus weighted SSIM) and PSNR/SSIM metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

PSNR_CAP = 100.0


@dataclass(frozen=True)
class SsimConfig:
    """Gaussian-window SSIM with the Wang et al. constants."""

    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @property
    def c1(self):
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.data_range) ** 2

    def taps(self):
        """Normalised 1-D Gaussian; the 2-D window is its outer product."""
        r = np.arange(self.window, dtype=np.float64) - (self.window - 1) / 2.0
        g = np.exp(-(r**2) / (2.0 * self.sigma**2))
        return g / g.sum()


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.2
    ssim_enabled: bool = True
    ssim: SsimConfig = SsimConfig()

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidArgument(f"lambda must be >= 0, got {self.lam}")


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise InvalidArgument(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def l1_loss(pred, target):
    _same_shape("l1_loss", pred, target)
    return float(np.mean(np.abs(pred - target)))


def l1_loss_backward(pred, target):
    _same_shape("l1_loss", pred, target)
    return np.sign(pred - target) / pred.size


def psnr(pred, target, peak=1.0):
    _same_shape("psnr", pred, target)
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return 10.0 * math.log10(peak**2 / mse)


def _as_nchw(x):
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise InvalidArgument(f"ssim: expected 2-D, 3-D (CHW) or 4-D (NCHW) image, got shape {x.shape}")


def _filter_valid(x, taps):
    """Separable 'valid' correlation over the last two axes."""
    w = len(taps)
    h_out, w_out = x.shape[-2] - w + 1, x.shape[-1] - w + 1
    tmp = taps[0] * x[..., 0:h_out, :]
    for i in range(1, w):
        tmp = tmp + taps[i] * x[..., i : i + h_out, :]
    out = taps[0] * tmp[..., 0:w_out]
    for j in range(1, w):
        out = out + taps[j] * tmp[..., j : j + w_out]
    return out


def _filter_valid_adjoint(g, taps, shape):
    w = len(taps)
    h_out, w_out = g.shape[-2], g.shape[-1]
    tmp = np.zeros(g.shape[:-1] + (shape[-1],), dtype=g.dtype)
    for j in range(w):
        tmp[..., j : j + w_out] += taps[j] * g
    out = np.zeros(shape, dtype=g.dtype)
    for i in range(w):
        out[..., i : i + h_out, :] += taps[i] * tmp
    return out


def _ssim_parts(pred, target, config):
    _same_shape("ssim", pred, target)
    x, y = _as_nchw(pred), _as_nchw(target)
    if x.shape[-2] < config.window or x.shape[-1] < config.window:
        raise InvalidArgument(
            f"ssim: image {x.shape[-2]}x{x.shape[-1]} is smaller than the {config.window}x{config.window} window"
        )
    taps = config.taps().astype(np.result_type(x, y, np.float32), copy=False)
    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(y, taps)
    e_xx = _filter_valid(x * x, taps)
    e_yy = _filter_valid(y * y, taps)
    e_xy = _filter_valid(x * y, taps)
    mu_xy = mu_x * mu_y
    s_xx = e_xx - mu_x * mu_x
    s_yy = e_yy - mu_y * mu_y
    s_xy = e_xy - mu_xy
    a1 = 2.0 * mu_xy + config.c1
    a2 = 2.0 * s_xy + config.c2
    b1 = mu_x * mu_x + mu_y * mu_y + config.c1
    b2 = s_xx + s_yy + config.c2
    smap = (a1 * a2) / (b1 * b2)
    return x, y, taps, mu_x, mu_y, a1, a2, b1, b2, smap


def ssim(pred, target, config=SsimConfig()):
    """Mean local SSIM (valid window positions), averaged over channels and batch."""
    smap = _ssim_parts(pred, target, config)[-1]
    return float(np.mean(smap))


def ssim_backward(pred, target, config=SsimConfig()):
    """Gradient of ``ssim(pred, target)`` with respect to ``pred``."""
    x, y, taps, mu_x, mu_y, a1, a2, b1, b2, smap = _ssim_parts(pred, target, config)
    g = 1.0 / smap.size
    den = b1 * b2
    # smap as a function of mu_x, E[x^2], E[xy] (the filtered moments of x)
    d_mu = g * (
        2.0 * mu_y * a2 / den
        - 2.0 * mu_y * a1 / den
        - smap * 2.0 * mu_x / b1
        + smap * 2.0 * mu_x / b2
    )
    d_exx = g * (-smap / b2)
    d_exy = g * (2.0 * a1 / den)
    grad = (
        _filter_valid_adjoint(d_mu, taps, x.shape)
        + 2.0 * x * _filter_valid_adjoint(d_exx, taps, x.shape)
        + y * _filter_valid_adjoint(d_exy, taps, x.shape)
    )
    return grad.reshape(pred.shape)


def combined_loss(pred, target, config=LossConfig()):
    """``l1 - lam * ssim``; plain l1 when SSIM is disabled."""
    loss = l1_loss(pred, target)
    if config.ssim_enabled:
        loss = loss - config.lam * ssim(pred, target, config.ssim)
    return loss


def combined_loss_backward(pred, target, config=LossConfig()):
    grad = l1_loss_backward(pred, target)
    if config.ssim_enabled and config.lam:
        grad = grad - config.lam * ssim_backward(pred, target, config.ssim)
    return grad
