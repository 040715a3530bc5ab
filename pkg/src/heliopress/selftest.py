"""Built-in self test: gradient checks, coder round trips and attention oracles."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special
from scipy.signal import correlate2d

from . import engine as E
from .attention import WcbamParams, WnlamParams, residual_attention_block, wcbam_forward, wnlam_forward
from .codec import compress_image, decompress_image, reconstruct_in_memory
from .data import synthetic_sun
from .entropy import gaussian_likelihood, rate_bits
from .metrics import LossWeights, distortion_loss, rd_objective
from .model import ArchConfig, CodecModel
from .pipeline import forward
from .rans import gaussian_freqs, rans_decode, rans_encode_indexed
from .transforms import discriminator_forward, gdn_forward, igdn_forward

GRAD_TOL = 1e-4
# Small steps keep central differences from straddling ReLU/clamp kinks,
# which are dense in the full network; float64 round-off stays ~1e-8 here.
GRAD_STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# gradient cases: each builder returns (f, points, max_coords)

def _projector(rng, shape):
    r = E.Tensor(rng.normal(size=shape))
    return lambda out: (out * r).sum()


def _case_gdn(rng, inverse=False):
    c = 4
    x = rng.normal(size=(2, c, 4, 4))
    beta = rng.uniform(0.5, 1.5, size=c)
    gamma = rng.uniform(0.0, 0.2, size=(c, c))
    proj = _projector(rng, x.shape)
    fn = igdn_forward if inverse else gdn_forward
    return (lambda x, b, g: proj(fn(x, b, g))), (x, beta, gamma), None


def _wnlam_params(rng, c, cb):
    return [rng.normal(scale=0.5, size=s) for s in [(cb, c, 1, 1)] * 3 + [(c, cb, 1, 1)]]


def _case_wnlam(rng):
    c, cb, w = 6, 3, 4
    x = rng.normal(size=(1, c, 8, 8))
    proj = _projector(rng, x.shape)
    return ((lambda x, t, p, g, z: proj(wnlam_forward(x, WnlamParams(t, p, g, z), w))),
            (x, *_wnlam_params(rng, c, cb)), 24)


def _wcbam_params(rng, c, r=2, k=7):
    cr = c // r
    return [rng.normal(scale=0.5, size=(cr, c)), rng.normal(scale=0.1, size=cr),
            rng.normal(scale=0.5, size=(c, cr)), rng.normal(scale=0.1, size=c),
            rng.normal(scale=0.2, size=(1, 2, k, k)), rng.normal(scale=0.1, size=1)]


def _case_wcbam(rng):
    c, w = 6, 4
    x = rng.normal(size=(1, c, 8, 8))
    proj = _projector(rng, x.shape)
    return ((lambda x, *p: proj(wcbam_forward(x, WcbamParams(*p, w)))),
            (x, *_wcbam_params(rng, c)), 24)


def _desk_model(rng) -> CodecModel:
    return CodecModel.initialize(ArchConfig(), seed=int(rng.integers(2 ** 31)))


def _case_residual_attention(rng):
    model = _desk_model(rng)
    c = model.arch.n_channels
    x = rng.normal(size=(1, c, 8, 8))
    proj = _projector(rng, x.shape)
    names = ["g_a.attn0.trunk.rb0.conv0.weight", "g_a.attn0.mask.nl.theta",
             "g_a.attn0.mask.cbam.fc1.weight", "g_a.attn0.mask.out.weight"]
    return ((lambda x, *_: proj(residual_attention_block(x, model, "g_a.attn0"))),
            (x, *(model[n] for n in names)), 12)


def _case_discriminator(rng):
    model = _desk_model(rng)
    x = rng.uniform(size=(1, 1, 64, 64))
    y = rng.normal(scale=2.0, size=(1, model.arch.latent_channels, 4, 4))
    names = ["disc.proj.weight", "disc.conv0.weight", "disc.conv3.weight", "disc.conv3.bias"]
    return ((lambda x, y, *_: E.log(discriminator_forward(x, y, model)).mean()),
            (x, y, *(model[n] for n in names)), 12)


def _case_rate(rng):
    shape = (2, 3, 4, 4)
    y = rng.normal(scale=3.0, size=shape)
    noise = E.Tensor(rng.uniform(-0.5, 0.5, size=shape))
    mu = rng.normal(size=shape)
    sigma = rng.uniform(0.3, 3.0, size=shape)
    return (lambda y, mu, s: rate_bits(gaussian_likelihood(y + noise, mu, s))), (y, mu, sigma), None


def _case_composite(rng):
    model = _desk_model(rng)
    x = rng.uniform(size=(1, 1, 64, 64))
    seed = int(rng.integers(2 ** 31))
    weights = LossWeights(1.0, 1.0, 0.1)
    lam = 0.0125

    def f(*_):
        res = forward(model, x, np.random.default_rng(seed))
        d_out = discriminator_forward(res.x_hat, res.y_q, model)
        dist, _parts = distortion_loss(x, res.x_hat, d_out, weights)
        return rd_objective(res.bpp, dist, lam)

    names = ["g_a.conv0.weight", "g_a.gdn0.gamma", "g_s.tconv3.weight", "h_a.conv1.weight",
             "slice1.conv2.weight", "z_prior.scale"]
    return f, tuple(model[n] for n in names), 6


GRADIENT_CASES: dict[str, Callable] = {
    "gdn": _case_gdn,
    "igdn": lambda rng: _case_gdn(rng, inverse=True),
    "wnlam": _case_wnlam,
    "wcbam": _case_wcbam,
    "residual_attention": _case_residual_attention,
    "discriminator": _case_discriminator,
    "likelihood_rate": _case_rate,
    "rd_composite": _case_composite,
}


def gradient_error(name: str, seed: int) -> float:
    f, points, max_coords = GRADIENT_CASES[name](np.random.default_rng(seed))
    with np.errstate(all="ignore"):
        return E.grad_check(f, *points, h=GRAD_STEP, max_coords=max_coords, seed=seed)


# ---------------------------------------------------------------------------
# attention oracles

def wnlam_bruteforce(x: np.ndarray, theta, phi, g, z, w: int) -> np.ndarray:
    """Direct per-window, per-position evaluation of the non-local block."""
    n, c, h, wd = x.shape
    out = np.empty_like(x)
    th, ph, gg, zz = (a.reshape(a.shape[0], a.shape[1]) for a in (theta, phi, g, z))
    for b in range(n):
        for wy in range(0, h, w):
            for wx in range(0, wd, w):
                pos = [(i, j) for i in range(wy, wy + w) for j in range(wx, wx + w)]
                feats = [x[b, :, i, j] for i, j in pos]
                for (i, j), xi in zip(pos, feats):
                    scores = np.array([(th @ xi) @ (ph @ xj) for xj in feats])
                    a = np.exp(scores - scores.max())
                    a /= a.sum()
                    y = sum(ak * (gg @ xj) for ak, xj in zip(a, feats))
                    out[b, :, i, j] = zz @ y + xi
    return out


def wcbam_direct(x: np.ndarray, fc1_w, fc1_b, fc2_w, fc2_b, sw, sb, w: int) -> np.ndarray:
    """Channel gate per window, then spatial gate over the whole map."""
    n, c, h, wd = x.shape

    def mlp(v):
        return fc2_w @ np.maximum(fc1_w @ v + fc1_b, 0.0) + fc2_b

    xc = np.empty_like(x)
    for b in range(n):
        for wy in range(0, h, w):
            for wx in range(0, wd, w):
                blk = x[b, :, wy:wy + w, wx:wx + w]
                gate = special.expit(mlp(blk.mean(axis=(1, 2))) + mlp(blk.max(axis=(1, 2))))
                xc[b, :, wy:wy + w, wx:wx + w] = blk * gate[:, None, None]
    out = np.empty_like(x)
    for b in range(n):
        maps = (xc[b].mean(axis=0), xc[b].max(axis=0))
        logits = sum(correlate2d(m, sw[0, i], mode="same") for i, m in enumerate(maps)) + sb[0]
        out[b] = xc[b] * special.expit(logits)[None]
    return out


def _check_wnlam(seed: int, count: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        c, cb, w = 6, 3, 4
        x = rng.normal(size=(1, c, w, w))
        p = _wnlam_params(rng, c, cb)
        with E.no_grad():
            got = wnlam_forward(x, WnlamParams(*map(E.Tensor, p)), w).data
        worst = max(worst, float(np.abs(got - wnlam_bruteforce(x, *p, w)).max()))
    return worst


def _check_wcbam(seed: int, count: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        c, w = 6, 4
        x = rng.normal(size=(1, c, 8, 8))
        p = _wcbam_params(rng, c)
        with E.no_grad():
            got = wcbam_forward(x, WcbamParams(*map(E.Tensor, p), w)).data
        worst = max(worst, float(np.abs(got - wcbam_direct(x, *p, w)).max()))
    return worst


# ---------------------------------------------------------------------------
# coder round trips

def _check_rans(seed: int, n: int = 20000) -> int:
    rng = np.random.default_rng(seed)
    tables = gaussian_freqs(rng.normal(scale=20, size=64), rng.uniform(0.11, 30, size=64))
    index = rng.integers(0, 64, size=n)
    cum = np.cumsum(tables[index], axis=1)
    u = rng.integers(0, 1 << 16, size=n)
    symbols = (cum <= u[:, None]).sum(axis=1) - 128
    data = rans_encode_indexed(symbols, tables, index)
    decoded = rans_decode(data, tables[index])
    return int(np.count_nonzero(decoded != symbols))


def _check_codec(seed: int) -> float:
    model = CodecModel.initialize(ArchConfig(), seed=seed)
    img = synthetic_sun(seed, 64, 1)[0][:50, :61]
    blob = compress_image(model, img).to_bytes()
    out = decompress_image(model, blob)
    return float(np.abs(out - reconstruct_in_memory(model, img)).max())


# ---------------------------------------------------------------------------

def run_selftest(seed: int = 0, points: int = 2) -> list[CheckResult]:
    results = []

    def timed(name, fn, ok, fmt):
        t0 = time.perf_counter()
        try:
            value = fn()
            passed, detail = ok(value), fmt(value)
        except Exception as exc:  # a crash is a failed check, not a crashed selftest
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, passed, detail, time.perf_counter() - t0))

    for name in GRADIENT_CASES:
        timed(f"grad:{name}",
              lambda name=name: max(gradient_error(name, seed + k) for k in range(points)),
              lambda e: e < GRAD_TOL, lambda e: f"max rel err {e:.2e}")
    timed("oracle:wnlam", lambda: _check_wnlam(seed, 5), lambda e: e <= 1e-10, lambda e: f"max |diff| {e:.1e}")
    timed("oracle:wcbam", lambda: _check_wcbam(seed, 5), lambda e: e <= 1e-12, lambda e: f"max |diff| {e:.1e}")
    timed("rans:roundtrip", lambda: _check_rans(seed), lambda m: m == 0, lambda m: f"{m} mismatches")
    timed("codec:parity", lambda: _check_codec(seed), lambda e: e == 0.0, lambda e: f"max |diff| {e:.1e}")
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  {'time':>6}  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:5.1f}s  {r.detail}")
    return "\n".join(lines)
