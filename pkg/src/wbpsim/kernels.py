"""Functional signal-processing kernels for the baseband link chain.

Every kernel is a pure function over numpy arrays: bits are int8 vectors of
{0, 1}, soft values are float64 log-likelihood ratios (positive means bit 0
is more likely), and samples are complex128. The simulator uses these as
task bodies; the tests use them as ground truth, so they must stay bit-exact
and deterministic (randomness only enters through an explicit generator).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

# Offset applied to both shift-register streams before the first output bit.
GOLD_SEQUENCE_OFFSET = 1600

# Prior magnitude used to pin frozen positions during decoding. Large enough
# to dominate any channel LLR, small enough to stay well inside float64.
FROZEN_LLR = 1e9

# Below this magnitude a pilot or channel coefficient is treated as zero.
DEGENERATE_EPS = 1e-12

MAX_USERS_PER_SLOT = 20


class DegeneratePilotError(ValueError):
    """Raised when a transmitted pilot is too close to zero to divide by."""


# ---------------------------------------------------------------------------
# array coercion helpers


def as_bits(bits) -> np.ndarray:
    out = np.asarray(bits, dtype=np.int8)
    if out.size and (out.min() < 0 or out.max() > 1):
        raise ValueError("bit vector entries must be 0 or 1")
    return out


def as_complex(x) -> np.ndarray:
    return np.asarray(x, dtype=np.complex128)


def as_llr(llr) -> np.ndarray:
    return np.asarray(llr, dtype=np.float64)


def _require_pow2(n: int, what: str) -> int:
    if n < 2 or n & (n - 1):
        raise ValueError(f"{what} must be a power of two >= 2, got {n}")
    return int(math.log2(n))


# ---------------------------------------------------------------------------
# FFT


def _bit_reverse_indices(n_bits: int) -> np.ndarray:
    idx = np.arange(1 << n_bits)
    rev = np.zeros_like(idx)
    work = idx.copy()
    for _ in range(n_bits):
        rev = (rev << 1) | (work & 1)
        work >>= 1
    return rev


def fft(x, inverse: bool = False) -> np.ndarray:
    """Radix-2 decimation-in-time transform along the last axis.

    Forward: X[k] = sum_n x[n] exp(-2i pi k n / N). The inverse additionally
    scales by 1/N so that fft(fft(x), inverse=True) == x.
    """
    x = as_complex(x)
    n = x.shape[-1]
    n_bits = _require_pow2(n, "transform length")
    y = x[..., _bit_reverse_indices(n_bits)]
    sign = 1.0 if inverse else -1.0
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / m)
        y = y.reshape(x.shape[:-1] + (n // m, m))
        even = y[..., :half]
        odd = y[..., half:] * tw
        y = np.concatenate([even + odd, even - odd], axis=-1)
        y = y.reshape(x.shape)
        m *= 2
    if inverse:
        y = y / n
    return y


# ---------------------------------------------------------------------------
# polar code


def bhattacharyya_frozen_mask(n: int, k: int, design_snr_db: float = 0.0) -> np.ndarray:
    """Frozen mask (1 = frozen) for a length-2^n code with k info bits.

    Channel reliabilities follow the classic parameter recursion seeded with
    z = exp(-10^(snr/10)); index order matches the natural (non-bit-reversed)
    encoder below. Ties freeze the lower index first.
    """
    size = 1 << n
    if not 0 <= k <= size:
        raise ValueError(f"need 0 <= K <= {size}, got {k}")
    z = np.array([math.exp(-(10.0 ** (design_snr_db / 10.0)))])
    for _ in range(n):
        nxt = np.empty(2 * z.size)
        nxt[0::2] = 2.0 * z - z * z
        nxt[1::2] = z * z
        z = nxt
    order = sorted(range(size), key=lambda i: (-z[i], i))
    mask = np.zeros(size, dtype=np.int8)
    mask[order[: size - k]] = 1
    return mask


@dataclass(frozen=True)
class PolarCode:
    """Block code of length N = 2^n with K unfrozen input positions."""

    n: int
    K: int
    frozen_mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.frozen_mask.shape != (self.N,):
            raise ValueError("frozen mask length must equal N")
        if int(self.frozen_mask.sum()) != self.N - self.K:
            raise ValueError("frozen mask popcount must equal N - K")

    @property
    def N(self) -> int:
        return 1 << self.n

    @property
    def info_positions(self) -> np.ndarray:
        return np.flatnonzero(self.frozen_mask == 0)

    @classmethod
    def design(cls, N: int, K: int, design_snr_db: float = 0.0) -> "PolarCode":
        n = _require_pow2(N, "block length")
        return cls(n=n, K=K, frozen_mask=bhattacharyya_frozen_mask(n, K, design_snr_db))

    @classmethod
    def from_frozen_set(cls, N: int, frozen: set[int]) -> "PolarCode":
        n = _require_pow2(N, "block length")
        mask = np.zeros(N, dtype=np.int8)
        mask[sorted(frozen)] = 1
        return cls(n=n, K=N - len(frozen), frozen_mask=mask)


def polar_encode(info, code: PolarCode) -> np.ndarray:
    """Encode info bits: u places them at unfrozen positions, x = u F^(x)n.

    Natural (non-bit-reversed) output order. Accepts a batch as rows.
    """
    info = as_bits(info)
    if info.shape[-1] != code.K:
        raise ValueError(f"expected {code.K} info bits, got {info.shape[-1]}")
    u = np.zeros(info.shape[:-1] + (code.N,), dtype=np.int8)
    u[..., code.info_positions] = info
    x = u
    step = 1
    while step < code.N:
        x = x.reshape(info.shape[:-1] + (code.N // (2 * step), 2, step))
        x[..., 0, :] ^= x[..., 1, :]
        x = x.reshape(info.shape[:-1] + (code.N,))
        step *= 2
    return x


def _minsum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sign(a) * np.sign(b) * np.minimum(np.abs(a), np.abs(b))


def _butterfly(arr: np.ndarray, step: int) -> np.ndarray:
    """View of (batch, N) grouped as (batch, blocks, {lo, hi}, step)."""
    batch, size = arr.shape
    return arr.reshape(batch, size // (2 * step), 2, step)


def bp_decode_soft(llr: np.ndarray, code: PolarCode, max_iters: int = 30,
                   early_exit: bool = False) -> np.ndarray:
    """Min-sum belief propagation over the encoder factor graph.

    ``llr`` has shape (batch, N); returns post-decoding LLRs of the input
    (u-domain) positions with the same shape. Messages flow left (toward u)
    and right (toward the channel) through the n butterfly stages; frozen
    positions carry a +FROZEN_LLR prior. With ``early_exit`` the iteration
    stops once every row's hard decisions re-encode to the channel-side hard
    decisions; otherwise exactly ``max_iters`` iterations run.
    """
    llr = np.atleast_2d(as_llr(llr))
    batch, size = llr.shape
    if size != code.N:
        raise ValueError(f"expected {code.N} channel LLRs, got {size}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    stages = code.n

    left = np.zeros((stages + 1, batch, size))
    right = np.zeros((stages + 1, batch, size))
    left[stages] = llr
    right[0][:, code.frozen_mask == 1] = FROZEN_LLR

    for _ in range(max_iters):
        for s in range(stages):
            r_in = _butterfly(right[s], 1 << s)
            l_in = _butterfly(left[s + 1], 1 << s)
            r_out = _butterfly(right[s + 1], 1 << s)
            a, b = r_in[:, :, 0], r_in[:, :, 1]
            l_lo, l_hi = l_in[:, :, 0], l_in[:, :, 1]
            r_out[:, :, 0] = _minsum(a, l_hi + b)
            r_out[:, :, 1] = _minsum(a, l_lo) + b
        for s in range(stages - 1, -1, -1):
            r_in = _butterfly(right[s], 1 << s)
            l_in = _butterfly(left[s + 1], 1 << s)
            l_out = _butterfly(left[s], 1 << s)
            a, b = r_in[:, :, 0], r_in[:, :, 1]
            l_lo, l_hi = l_in[:, :, 0], l_in[:, :, 1]
            l_out[:, :, 0] = _minsum(l_lo, l_hi + b)
            l_out[:, :, 1] = _minsum(a, l_lo) + l_hi
        if early_exit:
            u_hat = (left[0] + right[0] < 0).astype(np.int8)
            x_hat = (left[stages] + right[stages] < 0).astype(np.int8)
            enc = u_hat.copy()
            step = 1
            while step < size:
                enc = enc.reshape(batch, size // (2 * step), 2, step)
                enc[:, :, 0, :] ^= enc[:, :, 1, :]
                enc = enc.reshape(batch, size)
                step *= 2
            if np.array_equal(enc, x_hat):
                break
    return left[0] + right[0]


def bp_decode(llr, code: PolarCode, max_iters: int = 30,
              early_exit: bool = False) -> np.ndarray:
    """Decode one LLR vector back to the K info bits (ascending position)."""
    llr = as_llr(llr)
    if llr.ndim != 1:
        raise ValueError("bp_decode takes a single LLR vector; see bp_decode_many")
    soft = bp_decode_soft(llr[None, :], code, max_iters, early_exit)
    return (soft[0, code.info_positions] < 0).astype(np.int8)


def bp_decode_many(llrs: np.ndarray, code: PolarCode, max_iters: int = 30,
                   chunk: int = 256) -> np.ndarray:
    """Batched hard-decision decode; rows of ``llrs`` are independent frames.

    Rows are processed in chunks to keep the message arrays cache-resident.
    """
    llrs = np.atleast_2d(as_llr(llrs))
    out = np.empty((llrs.shape[0], code.K), dtype=np.int8)
    for start in range(0, llrs.shape[0], chunk):
        soft = bp_decode_soft(llrs[start:start + chunk], code, max_iters)
        out[start:start + chunk] = (soft[:, code.info_positions] < 0)
    return out


# ---------------------------------------------------------------------------
# rate matching


def rate_match_rv0(coded, E: int) -> np.ndarray:
    """Cyclic offset-0 bit selection: out[i] = coded[i mod N] for i < E."""
    coded = as_bits(coded)
    if coded.size < 1:
        raise ValueError("coded block must be non-empty")
    if E < 1:
        raise ValueError("target length must be >= 1")
    return coded[np.arange(E) % coded.size]


def rate_recover_rv0(llr, N: int) -> np.ndarray:
    """Adjoint of rate_match_rv0: sum repeats, zero never-sent positions."""
    llr = as_llr(llr)
    if N < 1:
        raise ValueError("coded length must be >= 1")
    out = np.zeros(N)
    np.add.at(out, np.arange(llr.size) % N, llr)
    return out


# ---------------------------------------------------------------------------
# scrambling


@functools.lru_cache(maxsize=512)
def _gold_bytes(c_init: int, length: int) -> bytes:
    total = GOLD_SEQUENCE_OFFSET + length
    x1 = np.zeros(total + 31, dtype=np.int8)
    x2 = np.zeros(total + 31, dtype=np.int8)
    x1[0] = 1
    for i in range(31):
        x2[i] = (c_init >> i) & 1
    for i in range(total):
        x1[i + 31] = x1[i + 3] ^ x1[i]
        x2[i + 31] = x2[i + 3] ^ x2[i + 2] ^ x2[i + 1] ^ x2[i]
    seq = x1[GOLD_SEQUENCE_OFFSET:total] ^ x2[GOLD_SEQUENCE_OFFSET:total]
    return seq.tobytes()


def gold_sequence(c_init: int, length: int) -> np.ndarray:
    """Length-31 Gold sequence: x1^31+x^3+1 (fixed init x1(0)=1) xor
    x2^31+x^3+x^2+x+1 (init from c_init), both discarded for the first
    GOLD_SEQUENCE_OFFSET outputs."""
    if not 0 <= c_init < 2**31:
        raise ValueError("c_init must fit in 31 bits")
    if length < 0:
        raise ValueError("length must be >= 0")
    return np.frombuffer(_gold_bytes(int(c_init), int(length)), dtype=np.int8).copy()


def scramble(bits, c_init: int) -> np.ndarray:
    bits = as_bits(bits)
    return bits ^ gold_sequence(c_init, bits.size)


def descramble_llr(llr, c_init: int) -> np.ndarray:
    """Soft-domain inverse of scramble: flip LLR sign where the mask bit is 1."""
    llr = as_llr(llr)
    signs = 1.0 - 2.0 * gold_sequence(c_init, llr.size)
    return llr * signs


# ---------------------------------------------------------------------------
# modulation


def qpsk_mod(bits) -> np.ndarray:
    """Gray-mapped QPSK: pair (b0, b1) -> ((1-2 b0) + j (1-2 b1)) / sqrt(2)."""
    bits = as_bits(bits)
    if bits.size % 2:
        raise ValueError("QPSK needs an even number of bits")
    i = 1.0 - 2.0 * bits[0::2]
    q = 1.0 - 2.0 * bits[1::2]
    return (i + 1j * q) / math.sqrt(2.0)


def qpsk_soft_demod(y, noise_var: float) -> np.ndarray:
    """Per-bit LLRs for QPSK under complex AWGN of variance ``noise_var``."""
    if noise_var <= 0:
        raise ValueError("noise variance must be positive")
    y = as_complex(y)
    scale = 2.0 * math.sqrt(2.0) / noise_var
    out = np.empty(2 * y.size)
    out[0::2] = scale * y.real
    out[1::2] = scale * y.imag
    return out


# ---------------------------------------------------------------------------
# OFDM


@dataclass(frozen=True)
class OfdmConfig:
    n_subcarriers: int = 128
    cp_len: int = 32

    def __post_init__(self):
        _require_pow2(self.n_subcarriers, "subcarrier count")
        if not 0 <= self.cp_len < self.n_subcarriers:
            raise ValueError("cyclic prefix must satisfy 0 <= cp < N")

    @property
    def symbol_len(self) -> int:
        return self.n_subcarriers + self.cp_len


def ofdm_modulate(freq, cfg: OfdmConfig) -> np.ndarray:
    """Inverse transform plus cyclic prefix (last cp_len samples prepended)."""
    freq = as_complex(freq)
    if freq.size != cfg.n_subcarriers:
        raise ValueError(f"expected {cfg.n_subcarriers} subcarriers, got {freq.size}")
    time = fft(freq, inverse=True)
    return np.concatenate([time[cfg.n_subcarriers - cfg.cp_len:], time])


def ofdm_demodulate(time, cfg: OfdmConfig) -> np.ndarray:
    """Strip the cyclic prefix and transform back to subcarriers."""
    time = as_complex(time)
    if time.size != cfg.symbol_len:
        raise ValueError(f"expected {cfg.symbol_len} samples, got {time.size}")
    return fft(time[cfg.cp_len:])


# ---------------------------------------------------------------------------
# channel estimation / equalization / channel


def ls_estimate(rx_pilots, tx_pilots) -> np.ndarray:
    """Least-squares channel estimate H[k] = rx[k] / tx[k]."""
    rx = as_complex(rx_pilots)
    tx = as_complex(tx_pilots)
    if rx.shape != tx.shape:
        raise ValueError("pilot vectors must have equal length")
    if np.any(np.abs(tx) <= DEGENERATE_EPS):
        raise DegeneratePilotError("transmitted pilot magnitude below threshold")
    return rx / tx


def zf_equalize(y, H) -> tuple[np.ndarray, int]:
    """Zero-forcing x_hat = y / H; near-zero taps are zeroed, not fatal.

    Returns (equalized, degenerate_subcarrier_count).
    """
    y = as_complex(y)
    H = as_complex(H)
    if y.shape != H.shape:
        raise ValueError("signal and channel vectors must have equal length")
    bad = np.abs(H) < DEGENERATE_EPS
    out = np.zeros_like(y)
    good = ~bad
    out[good] = y[good] / H[good]
    return out, int(bad.sum())


def awgn_channel(x, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise at the given SNR.

    ``snr_db=inf`` (or None) passes the signal through untouched. Noise power
    is mean |x|^2 / 10^(snr/10), split evenly between I and Q.
    """
    x = as_complex(x)
    if snr_db is None or math.isinf(snr_db):
        return x.copy()
    power = float(np.mean(np.abs(x) ** 2)) if x.size else 0.0
    var = power / (10.0 ** (snr_db / 10.0))
    if var == 0.0:
        return x.copy()
    sigma = math.sqrt(var / 2.0)
    noise = rng.normal(0.0, sigma, x.size) + 1j * rng.normal(0.0, sigma, x.size)
    return x + noise.reshape(x.shape)


def blind_detect(slot_truth: int) -> int:
    """Detection is modeled as oracle-correct; the value drives DAG pruning."""
    if not 0 <= slot_truth <= MAX_USERS_PER_SLOT:
        raise ValueError(f"user count must be in 0..{MAX_USERS_PER_SLOT}")
    return int(slot_truth)


# ---------------------------------------------------------------------------
# golden-file hook


def hex_dump(arr) -> str:
    """Hex-encode an array (with dtype/shape header) for golden-file tests."""
    arr = np.ascontiguousarray(arr)
    shape = "x".join(str(d) for d in arr.shape)
    return f"{arr.dtype.str}:{shape}:{arr.tobytes().hex()}"


def hex_load(text: str) -> np.ndarray:
    dtype, shape, payload = text.split(":")
    dims = tuple(int(d) for d in shape.split("x") if d)
    return np.frombuffer(bytes.fromhex(payload), dtype=np.dtype(dtype)).reshape(dims)
