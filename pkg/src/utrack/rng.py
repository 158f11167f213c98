"""Counter-based random streams.

Every draw is a pure function of ``(key, counter, purpose, element index)``,
so an environment produces the same numbers whether it is stepped alone, in a
batch of 1024, or inside any shard of a worker pool.  Mixing is the
splitmix64 finalizer; the per-element loops are compiled with numba.
"""
from __future__ import annotations

import math

import numba
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0


@numba.njit(cache=True, inline="always")
def _mix1(x):
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


@numba.vectorize(["uint64(uint64)"], cache=True)
def mix(x):
    """splitmix64 finalizer (elementwise, wrapping)."""
    return _mix1(x)


@numba.vectorize(["uint64(uint64, uint64)"], cache=True)
def _fold(h, w):
    return _mix1(h ^ _mix1(w + _GOLDEN))


def derive(key, *words):
    """Fold integer words into a key: ``derive(master, i)`` gives stream ``i``."""
    h = np.asarray(key, dtype=np.uint64)
    for w in words:
        h = _fold(h, np.asarray(w).astype(np.uint64))
    return h


def seed_key(seed: int) -> np.uint64:
    """Turn a user seed (any int) into a 64-bit stream key."""
    return np.uint64(mix(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)))


@numba.njit(cache=True, inline="always")
def _unit(b, j):
    h = _mix1(b + np.uint64(j + 1) * _GOLDEN)
    return (np.float64(h >> np.uint64(11)) + 0.5) * _INV53


@numba.njit(cache=True, nogil=True)
def _uniform_rows(base, n):
    out = np.empty((base.shape[0], n))
    for i in range(base.shape[0]):
        b = base[i]
        for j in range(n):
            out[i, j] = _unit(b, j)
    return out


# Acklam's rational approximation to the normal quantile (rel. error < 1.2e-9)
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


@numba.njit(cache=True, inline="always")
def _ndtri(p):
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


@numba.njit(cache=True, nogil=True)
def _normal_rows(base, n):
    out = np.empty((base.shape[0], n))
    for i in range(base.shape[0]):
        b = base[i]
        for j in range(n):
            out[i, j] = _ndtri(_unit(b, j))
    return out


def stream_base(keys, counter, purpose: int):
    """Per-row 64-bit bases for compiled kernels that draw inline."""
    return np.ascontiguousarray(derive(np.asarray(keys, dtype=np.uint64), counter, purpose)).reshape(-1)


def _prep(keys, counter, purpose, shape):
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if shape != () else ()
    n = int(np.prod(shape)) if shape else 1
    base = derive(np.asarray(keys, dtype=np.uint64), counter, purpose)
    return np.ascontiguousarray(base).reshape(-1), base.shape, shape, n


def uniform(keys, counter, purpose: int, shape=()):
    """Uniform draws in (0, 1) with shape ``broadcast(keys, counter).shape + shape``.

    ``shape`` is the per-key block, enumerated in C order.
    """
    flat, lead, shape, n = _prep(keys, counter, purpose, shape)
    return _uniform_rows(flat, n).reshape(lead + shape)


def normal(keys, counter, purpose: int, shape=()):
    """Standard normals by inverse CDF of ``uniform``; same shape rules as ``uniform``."""
    flat, lead, shape, n = _prep(keys, counter, purpose, shape)
    return _normal_rows(flat, n).reshape(lead + shape)
