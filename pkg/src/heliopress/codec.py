"""Image <-> SDC bitstream using a trained :class:`CodecModel`."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .entropy import quantize_round, slice_conditioning, split_slices, z_prior
from .model import HYPER_DOWNSCALE, CodecModel
from .pipeline import latent_params
from .rans import RansDecodeError, RansDecoder, gaussian_freqs, rans_encode_indexed
from .transforms import analysis_transform, hyper_analysis, hyper_synthesis, synthesis_transform

SDC_MAGIC = b"SDOC"
SDC_VERSION = 1
_HEADER = struct.Struct("<4sBQIIIIIII")


class CorruptStreamError(ValueError):
    """Bitstream failed magic, length or CRC validation, or did not decode."""


class WrongModelError(ValueError):
    """Bitstream was produced by a model with a different digest."""


@dataclass(frozen=True)
class Bitstream:
    digest: int
    orig_width: int
    orig_height: int
    padded_width: int
    padded_height: int
    z_bytes: bytes
    y_bytes: bytes

    @property
    def payload(self) -> bytes:
        return self.z_bytes + self.y_bytes

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(SDC_MAGIC, SDC_VERSION, self.digest, self.orig_width, self.orig_height,
                              self.padded_width, self.padded_height, len(self.z_bytes),
                              len(self.y_bytes), zlib.crc32(self.payload))
        return header + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Bitstream":
        if len(blob) < _HEADER.size:
            raise CorruptStreamError("stream shorter than header")
        magic, version, digest, ow, oh, pw, ph, zl, yl, crc = _HEADER.unpack_from(blob)
        if magic != SDC_MAGIC or version != SDC_VERSION:
            raise CorruptStreamError("bad magic or version")
        payload = blob[_HEADER.size:]
        if len(payload) != zl + yl:
            raise CorruptStreamError(f"payload is {len(payload)} bytes, header says {zl + yl}")
        if zlib.crc32(payload) != crc:
            raise CorruptStreamError("CRC32 mismatch")
        if pw % HYPER_DOWNSCALE or ph % HYPER_DOWNSCALE or ow > pw or oh > ph or ow == 0 or oh == 0:
            raise CorruptStreamError("inconsistent image geometry")
        return cls(digest, ow, oh, pw, ph, payload[:zl], payload[zl:])

    def __len__(self) -> int:
        return _HEADER.size + len(self.z_bytes) + len(self.y_bytes)


HEADER_BYTES = _HEADER.size


def pad_to_multiple(image: np.ndarray, multiple: int = HYPER_DOWNSCALE) -> np.ndarray:
    """Edge-replicate the bottom/right border up to the next multiple."""
    h, w = image.shape
    return np.pad(image, ((0, -h % multiple), (0, -w % multiple)), mode="edge")


def _symbols(t: E.Tensor) -> np.ndarray:
    return t.data.astype(np.int64).reshape(-1)


def _z_tables(model: CodecModel, z_shape) -> tuple[np.ndarray, np.ndarray]:
    prior = z_prior(model)
    freqs = gaussian_freqs(prior.mu.data.reshape(-1), prior.sigma.data.reshape(-1))
    n, c, h, w = z_shape
    index = np.broadcast_to(np.arange(c)[None, :, None, None], z_shape).reshape(-1)
    return freqs, np.ascontiguousarray(index)


def _param_freqs(gp) -> np.ndarray:
    return gaussian_freqs(gp.mu.data.reshape(-1), gp.sigma.data.reshape(-1))


@dataclass
class EncodeInfo:
    """Side results of :func:`compress_image`, kept for rate bookkeeping."""

    y_hat: E.Tensor
    z_hat: E.Tensor
    y_freqs: np.ndarray
    z_freqs: np.ndarray


def compress_image(model: CodecModel, image: np.ndarray, return_info: bool = False):
    """Encode a 2-D grayscale image in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise E.InvalidShapeError(f"expected a 2-D image, got {image.shape}")
    oh, ow = image.shape
    padded = pad_to_multiple(image)
    ph, pw = padded.shape
    with E.no_grad():
        y = analysis_transform(padded[None, None], model)
        z_hat = quantize_round(hyper_analysis(y, model))
        y_hat = quantize_round(y)
        ctx = hyper_synthesis(z_hat, model)
        # condition on rounded slices exactly as the decoder will
        params = latent_params(model, ctx, y_hat)
    z_tab, z_idx = _z_tables(model, z_hat.shape)
    z_bytes = rans_encode_indexed(_symbols(z_hat), z_tab, z_idx)
    slices = split_slices(y_hat, model.arch.n_slices)
    y_syms = np.concatenate([_symbols(s) for s in slices])
    y_freqs = np.concatenate([_param_freqs(gp) for gp in params])
    y_bytes = rans_encode_indexed(y_syms, y_freqs, np.arange(y_syms.size))
    bs = Bitstream(model.digest_int(), ow, oh, pw, ph, z_bytes, y_bytes)
    if return_info:
        return bs, EncodeInfo(y_hat, z_hat, y_freqs, z_tab[z_idx])
    return bs


def decode_latents(model: CodecModel, bs: Bitstream) -> E.Tensor:
    """Recover the quantized latent from a bitstream."""
    if bs.digest != model.digest_int():
        raise WrongModelError(f"bitstream digest {bs.digest:016x} != model {model.digest_int():016x}")
    arch = model.arch
    zh, zw = bs.padded_height // HYPER_DOWNSCALE, bs.padded_width // HYPER_DOWNSCALE
    z_shape = (1, arch.hyper_channels, zh, zw)
    try:
        zdec = RansDecoder(bs.z_bytes)
        z_tab, z_idx = _z_tables(model, z_shape)
        z_hat = E.Tensor(zdec.decode_indexed(z_tab, z_idx).reshape(z_shape).astype(np.float64))
        zdec.finish()
        with E.no_grad():
            ctx = hyper_synthesis(z_hat, model)
        ydec = RansDecoder(bs.y_bytes)
        slices: list[E.Tensor] = []
        cs = arch.slice_channels
        shape = (1, cs, ctx.shape[2], ctx.shape[3])
        for _ in range(arch.n_slices):
            with E.no_grad():
                gp = slice_conditioning(ctx, slices, model)
            freqs = _param_freqs(gp)
            sym = ydec.decode_indexed(freqs, np.arange(freqs.shape[0]))
            slices.append(E.Tensor(sym.reshape(shape).astype(np.float64)))
        ydec.finish()
    except RansDecodeError as exc:
        raise CorruptStreamError(str(exc)) from exc
    return E.concat(slices, axis=1)


def decompress_image(model: CodecModel, bs: Bitstream | bytes) -> np.ndarray:
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bytes(bs))
    y_hat = decode_latents(model, bs)
    with E.no_grad():
        x_hat = synthesis_transform(y_hat, model)
    return x_hat.data[0, 0, :bs.orig_height, :bs.orig_width].copy()


def reconstruct_in_memory(model: CodecModel, image: np.ndarray) -> np.ndarray:
    """Quantized forward pass without entropy coding (for parity checks)."""
    image = np.asarray(image, dtype=np.float64)
    oh, ow = image.shape
    with E.no_grad():
        y_hat = quantize_round(analysis_transform(pad_to_multiple(image)[None, None], model))
        x_hat = synthesis_transform(y_hat, model)
    return x_hat.data[0, 0, :oh, :ow].copy()
