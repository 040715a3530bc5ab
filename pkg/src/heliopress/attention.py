"""Window-based attention: non-local mixing (WNLAM), channel/spatial gating
(WCBAM) and the residual trunk/mask block that hosts both."""

from __future__ import annotations

from dataclasses import dataclass

from . import engine as E
from .engine import InvalidShapeError, Tensor


@dataclass
class WnlamParams:
    theta: Tensor  # [Cb, C, 1, 1]
    phi: Tensor
    g: Tensor
    z: Tensor  # [C, Cb, 1, 1]

    @classmethod
    def from_model(cls, model, prefix: str) -> "WnlamParams":
        return cls(*(model[f"{prefix}.{k}"] for k in ("theta", "phi", "g", "z")))


@dataclass
class WcbamParams:
    fc1_w: Tensor  # [C/r, C]
    fc1_b: Tensor
    fc2_w: Tensor  # [C, C/r]
    fc2_b: Tensor
    spatial_w: Tensor  # [1, 2, k, k]
    spatial_b: Tensor
    window: int

    @classmethod
    def from_model(cls, model, prefix: str, window: int) -> "WcbamParams":
        return cls(model[f"{prefix}.fc1.weight"], model[f"{prefix}.fc1.bias"],
                   model[f"{prefix}.fc2.weight"], model[f"{prefix}.fc2.bias"],
                   model[f"{prefix}.spatial.weight"], model[f"{prefix}.spatial.bias"], window)


def window_partition(x, w: int) -> Tensor:
    """[N, C, H, W] -> [N*nH*nW, C, w, w], tiles in row-major order per image."""
    x = E.as_tensor(x)
    n, c, h, wd = x.shape
    if w <= 0 or h % w or wd % w:
        raise InvalidShapeError(f"window {w} does not divide {h}x{wd}")
    t = x.reshape(n, c, h // w, w, wd // w, w).transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(n * (h // w) * (wd // w), c, w, w)


def window_merge(windows, n: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    windows = E.as_tensor(windows)
    _, c, ws, _ = windows.shape
    t = windows.reshape(n, h // ws, w // ws, c, ws, ws).transpose(0, 3, 1, 4, 2, 5)
    return t.reshape(n, c, h, w)


def _embed(x: Tensor, kernel: Tensor) -> Tensor:
    """1x1 conv, flattened to [B, n_positions, Cb]."""
    e = E.conv2d(x, kernel)
    b, cb, h, w = e.shape
    return e.reshape(b, cb, h * w).transpose(0, 2, 1)


def wnlam_weights(xw: Tensor, p: WnlamParams) -> Tensor:
    """Softmax attention weights [B, n, n] inside each window."""
    th = _embed(xw, p.theta)
    ph = _embed(xw, p.phi)
    return E.softmax_axis(th @ ph.transpose(0, 2, 1), -1)


def wnlam_forward(x, p: WnlamParams, w: int) -> Tensor:
    x = E.as_tensor(x)
    n, c, h, wd = x.shape
    xw = window_partition(x, w)
    attn = wnlam_weights(xw, p)
    y = attn @ _embed(xw, p.g)  # [B, n, Cb]
    b, npos, cb = y.shape
    y = y.transpose(0, 2, 1).reshape(b, cb, w, w)
    z = E.conv2d(y, p.z) + xw
    return window_merge(z, n, h, wd)


def _shared_fc(v: Tensor, p: WcbamParams) -> Tensor:
    hidden = E.relu(v @ p.fc1_w.transpose(1, 0) + p.fc1_b)
    return hidden @ p.fc2_w.transpose(1, 0) + p.fc2_b


def wcbam_channel_attention(x_window, p: WcbamParams) -> Tensor:
    """sigmoid(F(avg) + F(max)) per window and channel, shape [B, C, 1, 1]."""
    x_window = E.as_tensor(x_window)
    b, c = x_window.shape[:2]
    avg = E.pool_window(x_window, "avg").reshape(b, c)
    mx = E.pool_window(x_window, "max").reshape(b, c)
    return E.sigmoid(_shared_fc(avg, p) + _shared_fc(mx, p)).reshape(b, c, 1, 1)


def wcbam_spatial_attention(x_ca, p: WcbamParams) -> Tensor:
    x_ca = E.as_tensor(x_ca)
    pooled = E.concat([x_ca.mean(axis=1, keepdims=True), x_ca.max(axis=1, keepdims=True)], axis=1)
    k = p.spatial_w.shape[-1]
    return E.sigmoid(E.conv2d(pooled, p.spatial_w, p.spatial_b, pad=k // 2))


def wcbam_forward(x, p: WcbamParams) -> Tensor:
    x = E.as_tensor(x)
    n, c, h, w = x.shape
    xw = window_partition(x, p.window)
    x_ca = window_merge(xw * wcbam_channel_attention(xw, p), n, h, w)
    return x_ca * wcbam_spatial_attention(x_ca, p)


def residual_block(x: Tensor, model, prefix: str) -> Tensor:
    h = E.relu(E.conv2d(x, model[f"{prefix}.conv0.weight"], model[f"{prefix}.conv0.bias"], pad=1))
    return x + E.conv2d(h, model[f"{prefix}.conv1.weight"], model[f"{prefix}.conv1.bias"], pad=1)


def attention_gate(x: Tensor, trunk: Tensor, mask_logits: Tensor) -> Tensor:
    return x + trunk * E.sigmoid(mask_logits)


def residual_attention_block(x, model, prefix: str) -> Tensor:
    """x + trunk(x) * sigmoid(mask(x)).

    trunk: residual blocks. mask: residual blocks -> WNLAM -> WCBAM -> 1x1 conv.
    """
    x = E.as_tensor(x)
    n_rb = model.arch.residual_blocks
    w = model.arch.window_size
    t = x
    for i in range(n_rb):
        t = residual_block(t, model, f"{prefix}.trunk.rb{i}")
    m = x
    for i in range(n_rb):
        m = residual_block(m, model, f"{prefix}.mask.rb{i}")
    m = wnlam_forward(m, WnlamParams.from_model(model, f"{prefix}.mask.nl"), w)
    m = wcbam_forward(m, WcbamParams.from_model(model, f"{prefix}.mask.cbam", w))
    m = E.conv2d(m, model[f"{prefix}.mask.out.weight"], model[f"{prefix}.mask.out.bias"])
    return attention_gate(x, t, m)
