"""Architecture config, parameter container and the SDW weight file."""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from .engine import InvalidShapeError, Tensor

BETA_MIN = 1e-6
SIGMA_MIN = 0.11
DOWNSCALE = 16
HYPER_DOWNSCALE = 64
GREY_INIT = 0.25
# Latents start wide (and the first decoder layer narrow) so unit-width
# quantization noise does not swamp the signal at initialization.
INIT_GAIN = {"conv": 1.0, "linear": 1.0, "conv_small": 0.1, "conv_wide": 6.0,
             "tconv": 1.0, "tconv_small": 0.1, "tconv_narrow": 1.0 / 6.0}


class WeightFileError(ValueError):
    """Malformed or corrupted SDW file."""


@dataclass(frozen=True)
class ArchConfig:
    n_channels: int = 8
    latent_channels: int = 12
    hyper_channels: int = 6
    ctx_channels: int = 16
    window_size: int = 4
    n_slices: int = 4
    main_kernel: int = 5
    hyper_kernel: int = 5
    residual_blocks: int = 3
    slice_hidden: int = 16
    wcbam_reduction: int = 2
    spatial_kernel: int = 7
    disc_channels: int = 8
    disc_proj_channels: int = 4

    def __post_init__(self):
        if self.latent_channels % self.n_slices:
            raise InvalidShapeError(
                f"latent_channels={self.latent_channels} not divisible by n_slices={self.n_slices}")
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")

    @property
    def slice_channels(self) -> int:
        return self.latent_channels // self.n_slices

    @property
    def downscale_factor(self) -> int:
        return DOWNSCALE

    @classmethod
    def full(cls) -> "ArchConfig":
        """Full-size geometry (N=192, M=320); forward-only at desk scale."""
        return cls(n_channels=192, latent_channels=320, hyper_channels=192, ctx_channels=320,
                   window_size=8, n_slices=10, slice_hidden=224, wcbam_reduction=16,
                   disc_channels=64, disc_proj_channels=16)

    def to_ints(self) -> list[int]:
        return [getattr(self, f.name) for f in fields(self)]

    @classmethod
    def from_ints(cls, values) -> "ArchConfig":
        names = [f.name for f in fields(cls)]
        if len(values) != len(names):
            raise WeightFileError(f"arch block has {len(values)} ints, expected {len(names)}")
        return cls(**dict(zip(names, (int(v) for v in values))))

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parameter layout

def _conv(specs, name, cout, cin, k, init="conv"):
    specs.append((f"{name}.weight", (cout, cin, k, k), init))
    specs.append((f"{name}.bias", (cout,), "zeros"))


def _tconv(specs, name, cin, cout, k, init="tconv", bias="zeros"):
    specs.append((f"{name}.weight", (cin, cout, k, k), init))
    specs.append((f"{name}.bias", (cout,), bias))


def _gdn(specs, name, c):
    specs.append((f"{name}.beta", (c,), "ones"))
    specs.append((f"{name}.gamma", (c, c), "gdn_gamma"))


def _attention(specs, name, c, arch: ArchConfig):
    for branch in ("trunk", "mask"):
        for i in range(arch.residual_blocks):
            _conv(specs, f"{name}.{branch}.rb{i}.conv0", c, c, 3)
            _conv(specs, f"{name}.{branch}.rb{i}.conv1", c, c, 3, init="conv_small")
    cb = max(c // 2, 1)
    for emb in ("theta", "phi", "g"):
        specs.append((f"{name}.mask.nl.{emb}", (cb, c, 1, 1), "conv"))
    specs.append((f"{name}.mask.nl.z", (c, cb, 1, 1), "conv_small"))
    cr = max(c // arch.wcbam_reduction, 1)
    specs.append((f"{name}.mask.cbam.fc1.weight", (cr, c), "linear"))
    specs.append((f"{name}.mask.cbam.fc1.bias", (cr,), "zeros"))
    specs.append((f"{name}.mask.cbam.fc2.weight", (c, cr), "linear"))
    specs.append((f"{name}.mask.cbam.fc2.bias", (c,), "zeros"))
    _conv(specs, f"{name}.mask.cbam.spatial", 1, 2, arch.spatial_kernel)
    _conv(specs, f"{name}.mask.out", c, c, 1)


def parameter_specs(arch: ArchConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init) for every learned tensor; depends on ``arch`` only."""
    n, m, k = arch.n_channels, arch.latent_channels, arch.main_kernel
    s: list = []
    # analysis
    _conv(s, "g_a.conv0", n, 1, k)
    _gdn(s, "g_a.gdn0", n)
    _conv(s, "g_a.conv1", n, n, k)
    _gdn(s, "g_a.gdn1", n)
    _attention(s, "g_a.attn0", n, arch)
    _conv(s, "g_a.conv2", n, n, k)
    _gdn(s, "g_a.gdn2", n)
    _conv(s, "g_a.conv3", m, n, k, init="conv_wide")
    _attention(s, "g_a.attn1", m, arch)
    # synthesis
    _tconv(s, "g_s.tconv0", m, n, k, init="tconv_narrow")
    _gdn(s, "g_s.igdn0", n)
    _attention(s, "g_s.attn0", n, arch)
    _tconv(s, "g_s.tconv1", n, n, k)
    _gdn(s, "g_s.igdn1", n)
    _tconv(s, "g_s.tconv2", n, n, k)
    _gdn(s, "g_s.igdn2", n)
    _attention(s, "g_s.attn1", n, arch)
    # start near a flat mid-grey image so the output clamp is not saturated
    _tconv(s, "g_s.tconv3", n, 1, k, init="tconv_small", bias="grey")
    # hyper path
    hk = arch.hyper_kernel
    _conv(s, "h_a.conv0", n, m, hk)
    _conv(s, "h_a.conv1", arch.hyper_channels, n, hk)
    _tconv(s, "h_s.tconv0", arch.hyper_channels, n, hk)
    _tconv(s, "h_s.tconv1", n, arch.ctx_channels, hk)
    # channel slices
    cs = arch.slice_channels
    for i in range(arch.n_slices):
        _conv(s, f"slice{i}.conv0", arch.slice_hidden, arch.ctx_channels + i * cs, 3)
        _conv(s, f"slice{i}.conv1", arch.slice_hidden, arch.slice_hidden, 1)
        _conv(s, f"slice{i}.conv2", 2 * cs, arch.slice_hidden, 1, init="conv_small")
    s.append(("z_prior.loc", (arch.hyper_channels,), "zeros"))
    s.append(("z_prior.scale", (arch.hyper_channels,), "ones"))
    # conditional discriminator
    d = arch.disc_channels
    _conv(s, "disc.proj", arch.disc_proj_channels, m, 1)
    _conv(s, "disc.conv0", d, 1 + arch.disc_proj_channels, k)
    _conv(s, "disc.conv1", d, d, k)
    _conv(s, "disc.conv2", d, d, k)
    _conv(s, "disc.conv3", 1, d, k)
    return s


def _init_value(rng: np.random.Generator, shape, init: str) -> np.ndarray:
    if init == "zeros":
        return np.zeros(shape)
    if init == "ones":
        return np.ones(shape)
    if init == "gdn_gamma":
        return 0.1 * np.eye(shape[0])
    if init == "grey":
        return np.full(shape, GREY_INIT)
    if init.startswith("tconv"):
        fan_in = shape[0] * shape[2] * shape[3] / 4.0  # stride-2 upsampling: ~1/4 taps active
        return rng.normal(scale=INIT_GAIN[init] / np.sqrt(fan_in), size=shape)
    fan_in = int(np.prod(shape[1:]))
    scale = INIT_GAIN[init] / np.sqrt(fan_in)
    return rng.normal(scale=scale, size=shape)


class CodecModel:
    """All learned tensors plus the architecture they were built for."""

    def __init__(self, arch: ArchConfig, params: dict[str, Tensor]):
        expected = {name: shape for name, shape, _ in parameter_specs(arch)}
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise WeightFileError(f"parameter set mismatch; missing={missing[:3]} extra={extra[:3]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise WeightFileError(f"{name}: shape {params[name].shape} != {shape}")
        self.arch = arch
        # keep the canonical order
        self.params = {name: params[name] for name in expected}

    @classmethod
    def initialize(cls, arch: ArchConfig | None = None, seed: int = 0) -> "CodecModel":
        arch = arch or ArchConfig()
        rng = np.random.default_rng(seed)
        params = {name: Tensor(_init_value(rng, shape, init), requires_grad=True)
                  for name, shape, init in parameter_specs(arch)}
        return cls(arch, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def generator_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, p) for n, p in self.params.items() if not n.startswith("disc."))

    def discriminator_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, p) for n, p in self.params.items() if n.startswith("disc."))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def project(self) -> None:
        """Clip GDN and z-prior parameters back into their feasible sets."""
        for name, p in self.params.items():
            if name.endswith(".beta"):
                np.maximum(p.data, BETA_MIN, out=p.data)
            elif name.endswith(".gamma"):
                np.maximum(p.data, 0.0, out=p.data)
            elif name == "z_prior.scale":
                np.maximum(p.data, SIGMA_MIN, out=p.data)

    def copy(self) -> "CodecModel":
        return CodecModel(self.arch, {n: Tensor(p.data.copy(), requires_grad=True)
                                      for n, p in self.params.items()})

    def parameter_table(self) -> bytes:
        return _pack_params(self.params)

    def digest(self) -> bytes:
        """First 8 bytes of SHA-256 over the serialized parameter table."""
        return hashlib.sha256(self.parameter_table()).digest()[:8]

    def digest_int(self) -> int:
        return int.from_bytes(self.digest(), "little")

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


# ---------------------------------------------------------------------------
# SDW file:  "SDW1" | u32 count, i32 arch ints | u32 nparams, param records | u32 crc32

SDW_MAGIC = b"SDW1"


def _pack_params(params: dict[str, Tensor]) -> bytes:
    out = [struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(out)


def model_to_bytes(model: CodecModel) -> bytes:
    ints = model.arch.to_ints()
    body = SDW_MAGIC + struct.pack("<I", len(ints)) + struct.pack(f"<{len(ints)}i", *ints)
    body += model.parameter_table()
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(blob: bytes) -> CodecModel:
    if len(blob) < 12 or blob[:4] != SDW_MAGIC:
        raise WeightFileError("not an SDW1 weight file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise WeightFileError("SDW checksum mismatch")
    pos = 4
    (n_ints,) = struct.unpack_from("<I", body, pos)
    pos += 4
    ints = struct.unpack_from(f"<{n_ints}i", body, pos)
    pos += 4 * n_ints
    arch = ArchConfig.from_ints(ints)
    try:
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(body, dtype="<f8", count=size, offset=pos).astype(np.float64)
            pos += 8 * size
            params[name] = Tensor(data.reshape(shape), requires_grad=True)
    except (struct.error, ValueError) as exc:
        raise WeightFileError(f"truncated parameter table: {exc}") from exc
    if pos != len(body):
        raise WeightFileError("trailing bytes after parameter table")
    return CodecModel(arch, params)
