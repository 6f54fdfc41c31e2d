"""Exact (error-free) accumulation of float vectors.

The server keeps its running gradient aggregate as a floating-point
expansion per coordinate, so adding innovations and subtracting stale
gradients never loses bits. Reading the aggregate returns the correctly
rounded value of the exact sum, which makes the innovation-maintained
aggregate bit-identical to a direct sum of the latest per-worker gradients.
"""
import math

import numpy as np


def two_sum(a, b):
    """Return ``(s, e)`` with ``s = fl(a + b)`` and ``a + b = s + e`` exactly."""
    s = a + b
    bb = s - a
    e = (a - (s - bb)) + (b - bb)
    return s, e


def correctly_rounded_sum(rows):
    """Correctly rounded coordinate-wise sum of a stack of vectors."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        return rows.copy()
    if rows.shape[0] == 0:
        return np.zeros(rows.shape[1])
    if rows.shape[0] == 1:
        return rows[0].copy()
    return np.array([math.fsum(col) for col in rows.T])


class ExactSum:
    """Running exact sum of p-dimensional float vectors.

    Components are stored smallest-magnitude first (Shewchuk's
    grow-expansion), zeros squeezed out after every addition.
    """

    def __init__(self, dim):
        self.dim = int(dim)
        self._parts = np.zeros((0, self.dim))

    @property
    def num_components(self):
        return self._parts.shape[0]

    def add(self, x):
        q = np.array(x, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"expected shape ({self.dim},), got {q.shape}")
        parts = self._parts
        out = np.empty((parts.shape[0] + 1, self.dim))
        for i in range(parts.shape[0]):
            q, out[i] = two_sum(q, parts[i])
        out[-1] = q
        self._parts = _squeeze_zeros(out)

    def subtract(self, x):
        self.add(-np.asarray(x, dtype=np.float64))

    def value(self):
        return correctly_rounded_sum(self._parts)

    def copy(self):
        other = ExactSum(self.dim)
        other._parts = self._parts.copy()
        return other


def _squeeze_zeros(parts):
    nonzero = parts != 0.0
    keep = int(nonzero.sum(axis=0).max(initial=0))
    if keep == parts.shape[0]:
        return parts
    order = np.argsort(~nonzero, axis=0, kind="stable")
    return np.take_along_axis(parts, order, axis=0)[:keep]
