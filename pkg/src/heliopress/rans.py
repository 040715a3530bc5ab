"""rANS entropy coder over the 256-symbol latent alphabet.

32-bit state, byte-wise renormalization, 16-bit probability precision.
Symbols are pushed in reverse so the decoder pops them in forward order.
The inner loops are compiled with numba.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from . import engine as E
from .entropy import ALPHABET, SYMBOL_MAX, SYMBOL_MIN, gaussian_likelihood

PRECISION = 16
TOTAL = 1 << PRECISION
N_SYMBOLS = SYMBOL_MAX - SYMBOL_MIN + 1
RANS_L = 1 << 23
STATE_BYTES = 4


class RansDecodeError(ValueError):
    """The byte stream is truncated or inconsistent with the CDFs."""


@dataclass(frozen=True, eq=False)
class CdfTable:
    freq: np.ndarray  # int64[256]

    def __post_init__(self):
        f = np.asarray(self.freq, dtype=np.int64)
        if f.shape != (N_SYMBOLS,) or f.min() < 0 or int(f.sum()) != TOTAL:
            raise ValueError("frequencies must be 256 non-negative ints summing to 2**16")
        object.__setattr__(self, "freq", f)

    @property
    def precision(self) -> int:
        return PRECISION

    @property
    def cum(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.freq)])

    def __eq__(self, other) -> bool:
        return isinstance(other, CdfTable) and np.array_equal(self.freq, other.freq)

    def __hash__(self) -> int:
        return hash(self.freq.tobytes())


def quantize_pmf(p: np.ndarray) -> np.ndarray:
    """Integer frequencies (rows sum to 2**16, every entry >= 1) from pmf rows.

    Largest-remainder rounding, ties to the lower symbol; then each empty bin
    is raised to 1, the total taken from the row's largest bin (first max).
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    raw = p / p.sum(axis=1, keepdims=True) * TOTAL
    f = np.floor(raw).astype(np.int64)
    rem = raw - f
    deficit = TOTAL - f.sum(axis=1)
    order = np.argsort(-rem, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(f.shape[0])[:, None]
    ranks[rows, order] = np.arange(f.shape[1])[None, :]
    f += (ranks < np.maximum(deficit, 0)[:, None]).astype(np.int64)
    over = np.minimum(deficit, 0)
    if over.any():
        f[np.arange(f.shape[0]), f.argmax(axis=1)] += over
    zeros = f == 0
    if zeros.any():
        f[zeros] = 1
        f[np.arange(f.shape[0]), f.argmax(axis=1)] -= zeros.sum(axis=1)
    return f


def gaussian_freqs(mu, sigma) -> np.ndarray:
    """Frequency rows [n, 256] for discretized Gaussians with the given params."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
    with E.no_grad():
        p = gaussian_likelihood(ALPHABET[None, :], mu, sigma).data
    return quantize_pmf(p)


def build_cdf(mu: float, sigma: float) -> CdfTable:
    return CdfTable(gaussian_freqs(mu, sigma)[0])


def _as_tables(cdfs) -> tuple[np.ndarray, np.ndarray]:
    """Normalize per-symbol CDFs to (freq table array, index array)."""
    if isinstance(cdfs, np.ndarray):
        tables = np.ascontiguousarray(cdfs, dtype=np.int64).reshape(-1, N_SYMBOLS)
    else:
        cdfs = list(cdfs)
        if not cdfs:
            return np.zeros((0, N_SYMBOLS), dtype=np.int64), np.zeros(0, dtype=np.int64)
        tables = np.stack([c.freq for c in cdfs]).astype(np.int64)
    return tables, np.arange(tables.shape[0], dtype=np.int64)


def _cum(tables: np.ndarray) -> np.ndarray:
    cum = np.zeros((tables.shape[0], N_SYMBOLS + 1), dtype=np.int64)
    np.cumsum(tables, axis=1, out=cum[:, 1:])
    return cum


@numba.njit(cache=True)
def _encode_kernel(symbols, freqs, cums, index):  # pragma: no cover - compiled
    n = symbols.shape[0]
    buf = np.empty(2 * n + 8, dtype=np.uint8)
    ptr = buf.shape[0]
    x = RANS_L
    for i in range(n - 1, -1, -1):
        t = index[i]
        s = symbols[i]
        freq = freqs[t, s]
        if freq <= 0:
            return buf[:0], i
        start = cums[t, s]
        x_max = ((RANS_L >> PRECISION) << 8) * freq
        while x >= x_max:
            ptr -= 1
            buf[ptr] = x & 0xFF
            x >>= 8
        x = ((x // freq) << PRECISION) + (x % freq) + start
    for _ in range(STATE_BYTES):
        ptr -= 1
        buf[ptr] = 0
    for b in range(STATE_BYTES):
        buf[ptr + b] = (x >> (8 * b)) & 0xFF
    return buf[ptr:].copy(), -1


@numba.njit(cache=True)
def _decode_kernel(data, pos, x, cums, index, out):  # pragma: no cover - compiled
    """Returns (pos, state, error_code); 0 = ok, 1 = truncated, 2 = bad state."""
    n = index.shape[0]
    mask = TOTAL - 1
    size = data.shape[0]
    for i in range(n):
        t = index[i]
        cf = x & mask
        lo = 0
        hi = N_SYMBOLS
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if cums[t, mid] <= cf:
                lo = mid
            else:
                hi = mid
        start = cums[t, lo]
        freq = cums[t, lo + 1] - start
        if freq <= 0:
            return pos, x, 2
        out[i] = lo
        x = freq * (x >> PRECISION) + cf - start
        while x < RANS_L:
            if pos >= size:
                return pos, x, 1
            x = (x << 8) | data[pos]
            pos += 1
    return pos, x, 0


def rans_encode_indexed(symbols, tables: np.ndarray, index: np.ndarray) -> bytes:
    """Encode ``symbols[i]`` with frequency row ``tables[index[i]]``."""
    sym = np.asarray(symbols, dtype=np.int64).reshape(-1)
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if sym.shape != index.shape:
        raise E.ContractError(f"{sym.size} symbols but {index.size} CDFs")
    if sym.size and (sym.min() < SYMBOL_MIN or sym.max() > SYMBOL_MAX):
        raise E.ContractError("symbol outside [-128, 127]")
    tables = np.ascontiguousarray(tables, dtype=np.int64)
    out, failed = _encode_kernel(sym - SYMBOL_MIN, tables, _cum(tables), index)
    if failed >= 0:
        raise E.ContractError(f"symbol {int(sym[failed])} at position {failed} has zero frequency")
    return out.tobytes()


def rans_encode(symbols, cdfs: Sequence[CdfTable] | np.ndarray) -> bytes:
    """Encode one symbol per CDF (``cdfs`` may be a [n, 256] frequency array)."""
    tables, index = _as_tables(cdfs)
    return rans_encode_indexed(symbols, tables, index)


class RansDecoder:
    """Pull-style decoder so callers can switch CDFs between batches of symbols."""

    def __init__(self, data: bytes):
        self.data = np.frombuffer(bytes(data), dtype=np.uint8)
        if self.data.size < STATE_BYTES:
            raise RansDecodeError("stream shorter than the rANS state")
        self.state = int.from_bytes(bytes(self.data[:STATE_BYTES]), "little")
        if not RANS_L <= self.state < (RANS_L << 8):
            raise RansDecodeError("initial state out of range")
        self.pos = STATE_BYTES

    def decode_indexed(self, tables: np.ndarray, index: np.ndarray) -> np.ndarray:
        tables = np.ascontiguousarray(tables, dtype=np.int64)
        index = np.asarray(index, dtype=np.int64).reshape(-1)
        out = np.empty(index.size, dtype=np.int64)
        self.pos, self.state, err = _decode_kernel(self.data, self.pos, self.state, _cum(tables), index, out)
        if err == 1:
            raise RansDecodeError("stream truncated")
        if err:
            raise RansDecodeError("stream inconsistent with CDFs")
        return out + SYMBOL_MIN

    def decode(self, cdfs: Sequence[CdfTable] | np.ndarray) -> np.ndarray:
        tables, index = _as_tables(cdfs)
        return self.decode_indexed(tables, index)

    def finish(self) -> None:
        """Verify the stream ended exactly where the encoder started."""
        if self.state != RANS_L or self.pos != self.data.size:
            raise RansDecodeError("stream did not terminate cleanly (corrupt or wrong CDFs)")


def rans_decode(data: bytes, cdfs: Sequence[CdfTable] | np.ndarray, count: int | None = None) -> np.ndarray:
    tables, index = _as_tables(cdfs)
    if count is not None and count != index.size:
        raise E.ContractError(f"count {count} does not match {index.size} CDFs")
    dec = RansDecoder(data)
    out = dec.decode_indexed(tables, index)
    dec.finish()
    return out


def ideal_bits(symbols, freqs: np.ndarray) -> float:
    """Sum of -log2(freq/2**16) for the coded symbols."""
    sym = np.asarray(symbols, dtype=np.int64).reshape(-1) - SYMBOL_MIN
    f = np.asarray(freqs).reshape(-1, N_SYMBOLS)[np.arange(sym.size), sym]
    return float(-np.log2(f / TOTAL).sum())
