"""Unbiased b-bit stochastic quantization of gradient vectors.

A vector is sent as its L2 norm (32-bit float), one sign bit per coordinate
and a (b-1)-bit level in [0, s] with s = 2^(b-1) - 1. Coordinate i is
rounded to one of the two grid points bracketing s * |v_i| / ||v||, up with
probability equal to the fractional part, so E[dequantize(quantize(v))] = v.
"""
from dataclasses import dataclass

import numpy as np

NORM_BITS = 32
FLOAT_BITS = 32


@dataclass(frozen=True)
class QuantizedVec:
    norm: float
    signs: np.ndarray
    levels: np.ndarray
    bits: int

    @property
    def num_levels(self):
        return 2 ** (self.bits - 1) - 1

    def __len__(self):
        return self.levels.shape[0]


def _check_bits(bits):
    if not 2 <= bits <= 16:
        raise ValueError(f"bit budget must be in [2, 16], got {bits}")


def quantize(v, bits, rng, norm=None):
    """Stochastically quantize ``v`` to ``bits`` bits per coordinate.

    ``norm`` overrides the scaling norm (it must bound every |v_i|); it is
    stored as a 32-bit float. A zero vector consumes no randomness.
    """
    _check_bits(bits)
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize a non-finite vector")
    s = 2 ** (bits - 1) - 1
    if norm is None:
        norm = float(np.linalg.norm(v))
    # round up so |v_i| / norm never exceeds 1 after the float32 cast
    norm32 = np.float32(norm)
    if float(norm32) < norm:
        norm32 = np.nextafter(norm32, np.float32(np.inf))
    norm = float(norm32)
    p = v.shape[0]
    if norm == 0.0:
        return QuantizedVec(0.0, np.zeros(p, dtype=bool), np.zeros(p, dtype=np.uint16), bits)
    scaled = np.minimum(np.abs(v) / norm * s, s)
    # absorb round-off so points already on the grid stay there
    nearest = np.rint(scaled)
    on_grid = np.abs(scaled - nearest) <= 1e-9 * s
    scaled = np.where(on_grid, nearest, scaled)
    lower = np.floor(scaled)
    up = rng.random(p) < (scaled - lower)
    levels = (lower + up).astype(np.uint16)
    return QuantizedVec(norm, v < 0, levels, bits)


def dequantize(q):
    s = q.num_levels
    signs = np.where(q.signs, -1.0, 1.0)
    return q.norm * signs * (q.levels.astype(np.float64) / s)


def encoded_bits(q):
    """Fixed-width message size: 32-bit norm plus b bits per coordinate."""
    return NORM_BITS + len(q) * q.bits


def quantized_message_bits(p, bits):
    return NORM_BITS + p * bits


def dense_message_bits(p):
    """An unquantized vector costs 32 bits per coordinate."""
    return FLOAT_BITS * p


def variance_bound(p, bits):
    """min(p / s^2, sqrt(p) / s): bound on E||Q(v) - v||^2 / ||v||^2."""
    s = 2 ** (bits - 1) - 1
    return min(p / s**2, np.sqrt(p) / s)
