"""Spatial primitives on N x C x H x W tensors: convolution, pooling, resampling."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import InvalidShapeError, Tensor, _record, as_tensor, pad2d


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # N, C, Ho, Wo, kh, kw (strided view, no copy)
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    out = np.tensordot(_windows(xp, w.shape[2], w.shape[3], stride), w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _kernel_grad(xp: np.ndarray, g: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = _windows(xp, kh, kw, stride)[:, :, : g.shape[2], : g.shape[3]]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def _scatter(g: np.ndarray, w: np.ndarray, stride: int, out_shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`_correlate`: spread each output back over its window."""
    kh, kw = w.shape[2:]
    ho, wo = g.shape[2:]
    cols = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, Cin, kh, kw
    out = np.zeros(out_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def _check(x: Tensor, kernel: Tensor, in_axis: int, stride: int, pad: int) -> None:
    if x.ndim != 4 or kernel.ndim != 4:
        raise InvalidShapeError(f"expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[in_axis]:
        raise InvalidShapeError(
            f"input has {x.shape[1]} channels but kernel expects {kernel.shape[in_axis]}")
    if stride < 1 or pad < 0:
        raise InvalidShapeError(f"bad stride/pad ({stride}, {pad})")


def conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with explicit zero padding.

    ``kernel`` is ``[Cout, Cin, kh, kw]``; output extent is
    ``(H + 2*pad - kh) // stride + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check(x, kernel, 1, stride, pad)
    kh, kw = kernel.shape[2:]
    if kh > x.shape[2] + 2 * pad or kw > x.shape[3] + 2 * pad:
        raise InvalidShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    w = kernel.data
    out = _correlate(xp, w, stride)
    parents: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape(1, -1, 1, 1)
        parents += (bias,)
    h, wd = x.shape[2:]

    def back(g):
        gxp = _scatter(g, w, stride, xp.shape) if x.requires_grad else None
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if gxp is not None else None
        gw = _kernel_grad(xp, g, kh, kw, stride) if kernel.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _record(out, parents, back, "conv2d")


def conv2d_transpose(x, kernel, bias=None, stride: int = 1, pad: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` for the same kernel and geometry.

    ``kernel`` is ``[Cin, Cout, kh, kw]`` (the conv2d kernel read backwards);
    output extent is ``(H - 1)*stride - 2*pad + kh + output_padding``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check(x, kernel, 0, stride, pad)
    if not 0 <= output_padding < stride:
        raise InvalidShapeError("output_padding must be in [0, stride)")
    n, _, h, wd = x.shape
    cout, kh, kw = kernel.shape[1:]
    ho = (h - 1) * stride - 2 * pad + kh + output_padding
    wo = (wd - 1) * stride - 2 * pad + kw + output_padding
    if ho <= 0 or wo <= 0:
        raise InvalidShapeError(f"transposed conv collapses {x.shape} to {ho}x{wo}")
    w = kernel.data
    padded = (n, cout, ho + 2 * pad, wo + 2 * pad)
    out = _scatter(x.data, w, stride, padded)[:, :, pad:pad + ho, pad:pad + wo]
    out = np.ascontiguousarray(out)
    parents: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape(1, -1, 1, 1)
        parents += (bias,)
    xd = x.data

    def back(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        gx = _correlate(gp, w, stride)[:, :, :h, :wd] if x.requires_grad else None
        gw = _kernel_grad(gp, xd, kh, kw, stride) if kernel.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _record(out, parents, back, "conv2d_transpose")


def _window_arg(window, h: int, w: int) -> tuple[int, int]:
    if window is None or window == "global":
        return h, w
    if isinstance(window, int):
        return window, window
    return int(window[0]), int(window[1])


def pool_window(x, kind: str, window=None, pad_allowed: bool = False) -> Tensor:
    """Average or max over non-overlapping windows (``None`` = global).

    Extents that the window does not divide raise unless ``pad_allowed``,
    in which case the bottom/right border is padded (zeros for ``avg``,
    ``-inf`` for ``max``). Max ties route the gradient to the first
    row-major occurrence.
    """
    x = as_tensor(x)
    if kind not in ("avg", "max"):
        raise ValueError(f"unknown pool kind {kind!r}")
    n, c, h, w = x.shape
    wh, ww = _window_arg(window, h, w)
    if h % wh or w % ww:
        if not pad_allowed:
            raise InvalidShapeError(f"window {wh}x{ww} does not divide {h}x{w}")
        fill = 0.0 if kind == "avg" else -np.inf
        x = pad2d(x, (0, -h % wh, 0, -w % ww), value=fill)
        n, c, h, w = x.shape
    gh, gw = h // wh, w // ww
    blocks = x.data.reshape(n, c, gh, wh, gw, ww).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, gh, gw, wh * ww)
    if kind == "avg":
        out = blocks.mean(axis=-1)

        def back(g):
            gb = np.broadcast_to(g[..., None] / (wh * ww), blocks.shape)
            return (_unblock(gb, n, c, gh, gw, wh, ww),)
    else:
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], -1)[..., 0]

        def back(g):
            gb = np.zeros(blocks.shape)
            np.put_along_axis(gb, idx[..., None], g[..., None], -1)
            return (_unblock(gb, n, c, gh, gw, wh, ww),)

    return _record(out, (x,), back, f"pool_{kind}")


def _unblock(gb, n, c, gh, gw, wh, ww) -> np.ndarray:
    return gb.reshape(n, c, gh, gw, wh, ww).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, gh * wh, gw * ww)


def upsample_nearest(x, factor: int) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def back(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _record(out, (x,), back, "upsample_nearest")
