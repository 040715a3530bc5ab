"""Quality metrics (PSNR, MS-SSIM, perceptual distance) and training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import engine as E
from .engine import InvalidShapeError, Tensor

PIXEL_MAX = 255.0
MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


# ---------------------------------------------------------------------------
# PSNR


def _mse255(x, x_hat) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise InvalidShapeError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return float(np.mean(((x - x_hat) * PIXEL_MAX) ** 2))


def psnr_from_mse(mse255: float) -> float:
    """10 log10(255^2 / MSE) with MSE on the 0..255 scale; +inf when MSE is 0."""
    if mse255 == 0.0:
        return math.inf
    return 10.0 * math.log10(PIXEL_MAX ** 2 / mse255)


def psnr(x, x_hat) -> float:
    """PSNR in dB for images in [0, 1]."""
    return psnr_from_mse(_mse255(x, x_hat))


# ---------------------------------------------------------------------------
# MS-SSIM


def _gauss1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _blur_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=-1) @ g
    return sliding_window_view(rows, k, axis=-2) @ g


def _ssim_terms(x: np.ndarray, y: np.ndarray, g: np.ndarray) -> tuple[float, float]:
    c1, c2 = K1 ** 2, K2 ** 2
    mx, my = _blur_valid(x, g), _blur_valid(y, g)
    sxx = _blur_valid(x * x, g) - mx * mx
    syy = _blur_valid(y * y, g) - my * my
    sxy = _blur_valid(x * y, g) - mx * my
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def msssim_scales(height: int, width: int) -> int:
    side = min(height, width)
    n = 0
    while n < len(MSSSIM_WEIGHTS) and side >= SSIM_WINDOW * 2 ** n:
        n += 1
    return n


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim(x, x_hat, allow_reduced: bool = False) -> float:
    """Multi-scale SSIM for images in [0, 1] (2-D, or a batch averaged over images).

    Five scales need both extents >= 176; smaller inputs raise unless
    ``allow_reduced``, in which case the usable leading scales are kept and
    their weights renormalized. Negative contrast terms are clipped to 0.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise InvalidShapeError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    if x.ndim > 2:
        flat_x = x.reshape(-1, *x.shape[-2:])
        flat_y = x_hat.reshape(-1, *x.shape[-2:])
        return float(np.mean([ms_ssim(a, b, allow_reduced) for a, b in zip(flat_x, flat_y)]))
    levels = msssim_scales(*x.shape)
    if levels < len(MSSSIM_WEIGHTS) and not allow_reduced:
        raise InvalidShapeError(f"{x.shape} too small for 5-scale MS-SSIM (need 176x176)")
    if levels == 0:
        raise InvalidShapeError(f"{x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    weights = MSSSIM_WEIGHTS[:levels] / MSSSIM_WEIGHTS[:levels].sum()
    g = _gauss1d()
    m = 1.0
    for j in range(levels):
        ssim_j, cs_j = _ssim_terms(x, x_hat, g)
        term = ssim_j if j == levels - 1 else cs_j
        m *= max(term, 0.0) ** weights[j]
        x, x_hat = _downsample(x), _downsample(x_hat)
    return float(min(m, 1.0))


def msssim_db(m: float) -> float:
    """-10 log10(1 - m); +inf at m = 1."""
    if m >= 1.0:
        return math.inf
    return -10.0 * math.log10(1.0 - m)


# ---------------------------------------------------------------------------
# perceptual distance (fixed random conv features)

PERC_SEED = 20220
PERC_CHANNELS = (8, 16, 32)


def _perc_kernels() -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(PERC_SEED)
    layers = []
    cin = 1
    for cout in PERC_CHANNELS:
        w = rng.normal(scale=1.0 / math.sqrt(cin * 9), size=(cout, cin, 3, 3))
        b = rng.normal(scale=0.1, size=cout)
        layers.append((w, b))
        cin = cout
    return layers


_PERC_LAYERS = _perc_kernels()


def perceptual_features(x) -> list[Tensor]:
    h = E.as_tensor(x) * 2.0 - 1.0
    feats = []
    for w, b in _PERC_LAYERS:
        h = E.relu(E.conv2d(h, w, b, stride=2, pad=1))
        feats.append(h)
    return feats


def _unit_normalize(f: Tensor) -> Tensor:
    return f / E.sqrt(E.square(f).sum(axis=1, keepdims=True) + 1e-10)


def perc_distance(x, x_hat) -> Tensor:
    """Mean over stages of the spatially averaged squared distance between
    channel-normalized random-conv features."""
    fa, fb = perceptual_features(x), perceptual_features(x_hat)
    total = None
    for a, b in zip(fa, fb):
        d = E.square(_unit_normalize(a) - _unit_normalize(b)).sum(axis=1).mean()
        total = d if total is None else total + d
    return total * (1.0 / len(fa))


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.0
    perc: float = 1.0
    adv: float = 0.1

    def __post_init__(self):
        if min(self.recon, self.perc, self.adv) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    rate_bits: float = 0.0
    rate_bpp: float = 0.0
    mse: float = 0.0
    perceptual: float = 0.0
    adversarial_g: float = 0.0
    distortion: float = 0.0
    rd_total: float = 0.0
    discriminator: float = 0.0


def mse255(x, x_hat) -> Tensor:
    """Mean squared error on the 0..255 scale (differentiable)."""
    return E.square(E.as_tensor(x) - x_hat).mean() * (PIXEL_MAX ** 2)


def distortion_loss(x, x_hat, disc_out, weights: LossWeights,
                    perceptual: Callable = perc_distance) -> tuple[Tensor, dict]:
    """recon * MSE + perc * d_perc(x, x') - adv * mean(log D(x', y)).

    ``disc_out`` may be ``None`` when the adversarial term is off.
    """
    x_hat = E.as_tensor(x_hat)
    mse = mse255(x, x_hat)
    total = mse * weights.recon
    parts = {"mse": mse.item(), "perceptual": 0.0, "adversarial_g": 0.0}
    if weights.perc > 0:
        perc = perceptual(x, x_hat)
        total = total + perc * weights.perc
        parts["perceptual"] = perc.item()
    if weights.adv > 0 and disc_out is not None:
        adv = -E.log(disc_out).mean()
        total = total + adv * weights.adv
        parts["adversarial_g"] = adv.item()
    return total, parts


def discriminator_loss(d_real, d_fake) -> Tensor:
    """mean(-log D(x, y)) + mean(-log(1 - D(x', y)))."""
    return -E.log(d_real).mean() - E.log(1.0 - E.as_tensor(d_fake)).mean()


def rd_objective(rate_bpp, distortion, lam: float):
    """R + lambda * D."""
    return rate_bpp + distortion * lam
