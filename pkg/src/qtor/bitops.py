"""Bit-string utilities.

Bit strings are numpy uint8 arrays holding 0/1 values. Conversions to
bytes use big-endian bit order (numpy packbits default).
"""

from __future__ import annotations

import numpy as np
from scipy.signal import fftconvolve

BitArray = np.ndarray

# Above this many multiply-adds, exact integer convolution is slower than
# FFT; fftconvolve stays exact here because all sums are small integers.
_FFT_THRESHOLD = 1 << 22


def as_bits(values) -> BitArray:
    bits = np.asarray(values, dtype=np.uint8)
    if bits.ndim != 1:
        raise ValueError("bit string must be one-dimensional")
    if bits.size and bits.max() > 1:
        raise ValueError("bit string may only contain 0 and 1")
    return bits


def random_bits(rng: np.random.Generator, n: int) -> BitArray:
    return rng.integers(0, 2, size=n, dtype=np.uint8)


def bits_to_bytes(bits: BitArray) -> bytes:
    if bits.size % 8:
        raise ValueError("bit length must be a multiple of 8 to pack")
    return np.packbits(bits).tobytes()


def bytes_to_bits(data: bytes) -> BitArray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def bits_to_hex(bits: BitArray) -> str:
    return bits_to_bytes(bits).hex()


def xor_bytes(a: bytes, b: bytes) -> bytes:
    if len(a) != len(b):
        raise ValueError("xor operands must have equal length")
    return (
        np.bitwise_xor(np.frombuffer(a, dtype=np.uint8), np.frombuffer(b, dtype=np.uint8))
        .tobytes()
    )


def toeplitz_hash(seed_bits: BitArray, input_bits: BitArray, out_len: int) -> BitArray:
    """Multiply a binary Toeplitz matrix by a bit vector, mod 2.

    The matrix T has shape (out_len, n) and is defined by its diagonal
    seed: T[i, j] = seed[n - 1 + i - j], which needs n + out_len - 1 seed
    bits. The product reduces to one convolution: row i of T.x equals
    coefficient n - 1 + i of seed * input.
    """
    n = int(input_bits.size)
    if n == 0:
        raise ValueError("cannot hash an empty bit string")
    if out_len < 1:
        raise ValueError("output length must be positive")
    if seed_bits.size != n + out_len - 1:
        raise ValueError("seed must have n + out_len - 1 bits")
    if n * out_len > _FFT_THRESHOLD:
        conv = fftconvolve(seed_bits.astype(np.float64), input_bits.astype(np.float64))
        rows = np.rint(conv[n - 1 : n - 1 + out_len]).astype(np.int64)
    else:
        # Row i of T.x is seed[i : i + n] . reversed(x): a sliding dot product.
        rows = np.correlate(
            seed_bits.astype(np.int64), input_bits[::-1].astype(np.int64), mode="valid"
        )
    return (rows & 1).astype(np.uint8)
