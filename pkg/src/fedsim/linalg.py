"""Flat float64 vector arithmetic shared by every part of the simulator.

Model parameters and every quantity derived from them share one
representation: a 1-D ``numpy.ndarray`` of dtype float64. The helpers here
validate shapes and keep summation order fixed so that repeated runs are
bitwise reproducible.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

ParamVector = np.ndarray


class DimensionError(ValueError):
    """Raised when two vectors that must line up do not."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in simulator state.

    ``where`` names the round or local step that produced it.
    """

    def __init__(self, message: str, where: str | None = None, round: int | None = None):
        super().__init__(message if where is None else f"{message} ({where})")
        self.where = where
        self.round = round


def vector(values) -> ParamVector:
    """Copy ``values`` into a fresh, read-only float64 vector."""
    out = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("vector has non-finite entries")
    out.setflags(write=False)
    return out


def zeros(dim: int) -> ParamVector:
    out = np.zeros(dim, dtype=np.float64)
    out.setflags(write=False)
    return out


def _check_pair(x: ParamVector, y: ParamVector) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``a * x + y``."""
    _check_pair(x, y)
    if not np.isfinite(a):
        raise NonFiniteError("axpy scale is not finite")
    return a * x + y


def mean_of(vs: Sequence[ParamVector], weights: Sequence[float] | None = None) -> ParamVector:
    """Componentwise mean, accumulated strictly in input order.

    With ``weights`` the result is the weighted mean ``sum(w_k v_k) / sum(w_k)``.
    """
    if len(vs) == 0:
        raise ValueError("mean_of needs at least one vector")
    first = vs[0]
    for v in vs[1:]:
        _check_pair(first, v)
    if weights is None:
        acc = np.array(first, dtype=np.float64, copy=True)
        for v in vs[1:]:
            acc += v
        return acc / len(vs)
    if len(weights) != len(vs):
        raise DimensionError("one weight per vector is required")
    total = float(sum(weights))
    if total <= 0:
        raise ValueError("weights must sum to a positive value")
    acc = weights[0] * np.asarray(first, dtype=np.float64)
    for w, v in zip(weights[1:], vs[1:]):
        acc += w * v
    return acc / total


def norm2(x: ParamVector) -> float:
    """Euclidean norm."""
    return float(np.sqrt(np.dot(x, x)))


def dot(x: ParamVector, y: ParamVector) -> float:
    _check_pair(x, y)
    return float(np.dot(x, y))


def cos_angle(x: ParamVector, y: ParamVector) -> float:
    """Cosine of the angle between two non-zero vectors, clamped to [-1, 1]."""
    _check_pair(x, y)
    nx, ny = norm2(x), norm2(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cos_angle is undefined for a zero vector")
    return float(min(1.0, max(-1.0, np.dot(x, y) / (nx * ny))))


def all_finite(*vs: ParamVector) -> bool:
    return all(bool(np.all(np.isfinite(v))) for v in vs)
