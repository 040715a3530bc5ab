"""Quantization, discretized-Gaussian likelihoods and the rate term.

The main latent is modeled slice by slice: slice ``i`` gets a mean and
scale from a small conv net fed with the hyper-synthesis context and the
already-decoded slices ``0..i-1``. The hyper-latent uses a per-channel
discretized Gaussian with learned location and scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine as E
from .engine import ContractError, Tensor
from .model import SIGMA_MIN, CodecModel

SYMBOL_MIN = -128
SYMBOL_MAX = 127
ALPHABET = np.arange(SYMBOL_MIN, SYMBOL_MAX + 1, dtype=np.float64)
LIKELIHOOD_FLOOR = 2.0 ** -64
_LN2 = math.log(2.0)


@dataclass
class GaussianParams:
    mu: Tensor
    sigma: Tensor


def quantize_round(v) -> Tensor:
    """Nearest integer, ties away from zero, clamped to the symbol alphabet."""
    data = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ContractError("cannot quantize non-finite values")
    r = np.sign(data) * np.floor(np.abs(data) + 0.5)
    return Tensor(np.clip(r, SYMBOL_MIN, SYMBOL_MAX) + 0.0)


def quantize_noise(v, rng: np.random.Generator) -> Tensor:
    """v + U(-0.5, 0.5); the noise is a constant on the tape."""
    v = E.as_tensor(v)
    return v + Tensor(rng.uniform(-0.5, 0.5, size=v.shape))


def gaussian_likelihood(k, mu, sigma) -> Tensor:
    """P(k) = Phi((k + .5 - mu)/s) - Phi((k - .5 - mu)/s) with tail-absorbing edge bins.

    ``sigma`` is clamped to ``SIGMA_MIN``; the result is floored at 2**-64.
    Interior bins are evaluated on the reflected side (|k - mu|) so that
    small tail probabilities keep their relative precision.
    """
    k, mu, sigma = E.as_tensor(k), E.as_tensor(mu), E.as_tensor(sigma)
    s = E.clamp(sigma, lo=SIGMA_MIN)
    d = k - mu
    a = E.abs_(d)
    mid = E.normal_cdf((0.5 - a) / s) - E.normal_cdf((-0.5 - a) / s)
    low_edge = E.normal_cdf((d + 0.5) / s)
    high_edge = E.normal_cdf((0.5 - d) / s)
    kd = np.broadcast_to(k.data, np.broadcast_shapes(k.shape, mu.shape, sigma.shape))
    m_low = (kd <= SYMBOL_MIN).astype(np.float64)
    m_high = (kd >= SYMBOL_MAX).astype(np.float64)
    m_mid = 1.0 - m_low - m_high
    p = mid * m_mid + low_edge * m_low + high_edge * m_high
    return E.clamp(p, lo=LIKELIHOOD_FLOOR)


def slice_conditioning(ctx, decoded_slices: Sequence, model: CodecModel, index: int | None = None
                       ) -> GaussianParams:
    """Mean/scale for slice ``len(decoded_slices)`` from context + earlier slices."""
    i = len(decoded_slices) if index is None else index
    arch = model.arch
    if i != len(decoded_slices) or not 0 <= i < arch.n_slices:
        raise ContractError(f"slice {i} needs exactly {i} decoded slices, got {len(decoded_slices)}")
    ctx = E.as_tensor(ctx)
    cs = arch.slice_channels
    for j, s in enumerate(decoded_slices):
        if s.shape[1] != cs or s.shape[2:] != ctx.shape[2:]:
            raise ContractError(f"decoded slice {j} has shape {s.shape}")
    h = E.concat([ctx, *decoded_slices], axis=1) if decoded_slices else ctx
    p = f"slice{i}"
    h = E.relu(E.conv2d(h, model[f"{p}.conv0.weight"], model[f"{p}.conv0.bias"], pad=1))
    h = E.relu(E.conv2d(h, model[f"{p}.conv1.weight"], model[f"{p}.conv1.bias"]))
    out = E.conv2d(h, model[f"{p}.conv2.weight"], model[f"{p}.conv2.bias"])
    mu = out[:, :cs]
    sigma = E.clamp(E.softplus(out[:, cs:]), lo=SIGMA_MIN)
    return GaussianParams(mu, sigma)


def z_prior(model: CodecModel) -> GaussianParams:
    c = model.arch.hyper_channels
    return GaussianParams(model["z_prior.loc"].reshape(1, c, 1, 1),
                          model["z_prior.scale"].reshape(1, c, 1, 1))


def z_likelihood(z_hat, model: CodecModel) -> Tensor:
    prior = z_prior(model)
    return gaussian_likelihood(z_hat, prior.mu, prior.sigma)


def rate_bits(*likelihoods) -> Tensor:
    """Total -log2 p over every given likelihood tensor."""
    total = None
    for lik in likelihoods:
        term = E.log(E.as_tensor(lik)).sum()
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total * (-1.0 / _LN2)


def bpp(rate, height: int, width: int, batch: int = 1):
    return rate / float(height * width * batch)


def split_slices(y: Tensor, n_slices: int) -> list[Tensor]:
    cs = y.shape[1] // n_slices
    return [y[:, i * cs:(i + 1) * cs] for i in range(n_slices)]
