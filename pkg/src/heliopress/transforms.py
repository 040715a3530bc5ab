"""Analysis/synthesis transforms, hyper path and the conditional discriminator."""

from __future__ import annotations

from . import engine as E
from .attention import residual_attention_block
from .engine import InvalidShapeError, Tensor
from .model import DOWNSCALE, CodecModel


def gdn_forward(x, beta, gamma) -> Tensor:
    """x_c / (beta_c + sum_k gamma[c, k] |x_k|), per spatial location."""
    x = E.as_tensor(x)
    gamma = E.as_tensor(gamma)
    c = gamma.shape[0]
    norm = E.conv2d(E.abs_(x), gamma.reshape(c, c, 1, 1), beta)
    return x / norm


def igdn_forward(x, beta, gamma) -> Tensor:
    """x_c * (beta_c + sum_k gamma[c, k] |x_k|)."""
    x = E.as_tensor(x)
    gamma = E.as_tensor(gamma)
    c = gamma.shape[0]
    return x * E.conv2d(E.abs_(x), gamma.reshape(c, c, 1, 1), beta)


def _conv(model: CodecModel, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = model[f"{name}.weight"]
    return E.conv2d(x, w, model[f"{name}.bias"], stride=stride, pad=w.shape[-1] // 2)


def _tconv(model: CodecModel, name: str, x: Tensor) -> Tensor:
    w = model[f"{name}.weight"]
    k = w.shape[-1]
    # k odd: pad k//2 with output_padding 1 gives exactly 2x
    return E.conv2d_transpose(x, w, model[f"{name}.bias"], stride=2, pad=k // 2, output_padding=1)


def _gdn(model, name, x, inverse=False):
    fn = igdn_forward if inverse else gdn_forward
    return fn(x, model[f"{name}.beta"], model[f"{name}.gamma"])


def _check_4d(x: Tensor, channels: int, multiple: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise InvalidShapeError(f"{what}: expected N x {channels} x H x W, got {x.shape}")
    if x.shape[2] % multiple or x.shape[3] % multiple:
        raise InvalidShapeError(f"{what}: spatial extents {x.shape[2:]} not divisible by {multiple}")


def analysis_transform(x, model: CodecModel) -> Tensor:
    x = E.as_tensor(x)
    _check_4d(x, 1, DOWNSCALE, "analysis")
    h = _gdn(model, "g_a.gdn0", _conv(model, "g_a.conv0", x, 2))
    h = _gdn(model, "g_a.gdn1", _conv(model, "g_a.conv1", h, 2))
    h = residual_attention_block(h, model, "g_a.attn0")
    h = _gdn(model, "g_a.gdn2", _conv(model, "g_a.conv2", h, 2))
    h = _conv(model, "g_a.conv3", h, 2)
    return residual_attention_block(h, model, "g_a.attn1")


def synthesis_transform(y_hat, model: CodecModel, clamp: bool = True) -> Tensor:
    y_hat = E.as_tensor(y_hat)
    _check_4d(y_hat, model.arch.latent_channels, 1, "synthesis")
    h = _gdn(model, "g_s.igdn0", _tconv(model, "g_s.tconv0", y_hat), inverse=True)
    h = residual_attention_block(h, model, "g_s.attn0")
    h = _gdn(model, "g_s.igdn1", _tconv(model, "g_s.tconv1", h), inverse=True)
    h = _gdn(model, "g_s.igdn2", _tconv(model, "g_s.tconv2", h), inverse=True)
    h = residual_attention_block(h, model, "g_s.attn1")
    out = _tconv(model, "g_s.tconv3", h)
    return E.clamp(out, 0.0, 1.0) if clamp else out


def hyper_analysis(y, model: CodecModel) -> Tensor:
    y = E.as_tensor(y)
    _check_4d(y, model.arch.latent_channels, 4, "hyper_analysis")
    h = E.relu(_conv(model, "h_a.conv0", y, 2))
    return _conv(model, "h_a.conv1", h, 2)


def hyper_synthesis(z_hat, model: CodecModel) -> Tensor:
    z_hat = E.as_tensor(z_hat)
    _check_4d(z_hat, model.arch.hyper_channels, 1, "hyper_synthesis")
    h = E.relu(_tconv(model, "h_s.tconv0", z_hat))
    return _tconv(model, "h_s.tconv1", h)


def discriminator_forward(x_in, y, model: CodecModel) -> Tensor:
    """Per-patch probability that ``x_in`` is real, conditioned on latent ``y``."""
    x_in, y = E.as_tensor(x_in), E.as_tensor(y)
    _check_4d(x_in, 1, DOWNSCALE, "discriminator")
    if (y.ndim != 4 or y.shape[0] != x_in.shape[0]
            or y.shape[2] * DOWNSCALE != x_in.shape[2] or y.shape[3] * DOWNSCALE != x_in.shape[3]):
        raise InvalidShapeError(f"latent {y.shape} does not match image {x_in.shape}")
    cond = E.upsample_nearest(E.conv2d(y, model["disc.proj.weight"], model["disc.proj.bias"]), DOWNSCALE)
    h = E.concat([x_in, cond], axis=1)
    for i in range(3):
        h = E.leaky_relu(_conv(model, f"disc.conv{i}", h, 2), 0.2)
    return E.sigmoid(_conv(model, "disc.conv3", h, 2))
