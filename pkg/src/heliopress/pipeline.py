"""End-to-end forward pass shared by training, evaluation and the codec."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .entropy import (
    GaussianParams,
    bpp,
    gaussian_likelihood,
    quantize_noise,
    quantize_round,
    rate_bits,
    slice_conditioning,
    split_slices,
    z_likelihood,
)
from .model import CodecModel
from .transforms import analysis_transform, hyper_analysis, hyper_synthesis, synthesis_transform


@dataclass
class ForwardResult:
    x_hat: Tensor
    y: Tensor
    y_q: Tensor
    z: Tensor
    z_q: Tensor
    slice_params: list[GaussianParams]
    y_likelihoods: list[Tensor]
    z_likelihoods: Tensor
    bits: Tensor
    bpp: Tensor


def latent_params(model: CodecModel, ctx: Tensor, y_q: Tensor) -> list[GaussianParams]:
    """Per-slice (mu, sigma), each conditioned on the quantized earlier slices."""
    slices = split_slices(y_q, model.arch.n_slices)
    return [slice_conditioning(ctx, slices[:i], model) for i in range(len(slices))]


def forward(model: CodecModel, x, rng: np.random.Generator | None = None) -> ForwardResult:
    """Run g_a -> h_a -> h_s -> slices -> g_s.

    With ``rng`` both latents get additive uniform noise (training);
    without it they are rounded (evaluation / coding).
    """
    x = E.as_tensor(x)
    y = analysis_transform(x, model)
    z = hyper_analysis(y, model)
    if rng is None:
        y_q, z_q = quantize_round(y), quantize_round(z)
    else:
        # draw z noise first so the order is fixed regardless of shapes
        z_q = quantize_noise(z, rng)
        y_q = quantize_noise(y, rng)
    ctx = hyper_synthesis(z_q, model)
    params = latent_params(model, ctx, y_q)
    y_slices = split_slices(y_q, model.arch.n_slices)
    y_lik = [gaussian_likelihood(s, gp.mu, gp.sigma) for s, gp in zip(y_slices, params)]
    z_lik = z_likelihood(z_q, model)
    bits = rate_bits(*y_lik, z_lik)
    n, _, h, w = x.shape
    x_hat = synthesis_transform(y_q, model)
    return ForwardResult(x_hat, y, y_q, z, z_q, params, y_lik, z_lik, bits, bpp(bits, h, w, n))
