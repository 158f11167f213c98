"""Range-only target tracking in the horizontal plane.

Two estimators: a particle filter with a constant-velocity motion model for
moving targets, and linearised least-squares trilateration for static ones.

The particle arrays are stored field-by-field (``x``, ``y``, ``vx``, ``vy``,
``w``) with the particle index last, so any number of leading batch
dimensions (envs, agents, targets) can be processed in a single pass and every
reduction runs along the contiguous last axis.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import math

import numba
import numpy as np

from . import rng

DEFAULT_N_PARTICLES = 1024
DEFAULT_PROCESS_NOISE_POS = 1.0
DEFAULT_PROCESS_NOISE_VEL = 0.1
LOG_UNDERFLOW = -708.0  # exp() of anything below this is 0 or subnormal in float64

_P_INIT_R, _P_INIT_A, _P_INIT_S, _P_INIT_H, _P_PRED, _P_RESAMPLE = 1, 2, 3, 4, 5, 6


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RangeMeasurement:
    origin_xy: tuple
    range_2d: float
    noise_std: float
    step_index: int = 0

    def __post_init__(self):
        if self.range_2d < 0:
            raise ValueError("range_2d must be >= 0")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be > 0")


@dataclass(frozen=True)
class ParticleSet:
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    w: np.ndarray
    max_speed: float
    key: np.uint64
    counter: int = 0
    age: int = 0
    degenerate: bool = False

    @property
    def n_particles(self) -> int:
        return self.w.shape[-1]

    @property
    def positions(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=-1)

    @property
    def velocities(self) -> np.ndarray:
        return np.stack([self.vx, self.vy], axis=-1)


@dataclass(frozen=True)
class TrackEstimate:
    position_xy: np.ndarray
    spread: float
    age: int


def slant_to_horizontal(range_3d, depth_diff):
    """Project slant range to the horizontal plane.

    Returns ``(range_2d, clamped)``; ``clamped`` is true where the depth
    difference exceeded the slant range and the result was pinned to 0.
    """
    r = np.asarray(range_3d, dtype=np.float64)
    d = np.asarray(depth_diff, dtype=np.float64)
    sq = r * r - d * d
    clamped = sq < 0
    h = np.sqrt(np.maximum(sq, 0.0))
    if h.ndim == 0:
        return float(h), bool(clamped)
    return h, clamped


# ---- batched kernels ----------------------------------------------------

def disc_particles(cx, cy, radius, max_speed, u_r, u_a, u_s, u_h):
    """Uniform positions in a disc and uniform velocities in the speed disc."""
    rad = radius * np.sqrt(u_r)
    ang = 2.0 * np.pi * u_a
    spd = max_speed * np.sqrt(u_s)
    hd = 2.0 * np.pi * u_h
    return (cx + rad * np.cos(ang), cy + rad * np.sin(ang), spd * np.cos(hd), spd * np.sin(hd))


def ring_particles(ox, oy, range_2d, range_std, max_speed, z_r, u_a, u_s, u_h):
    """Positions on the measured range circle with Gaussian radial spread."""
    rad = np.abs(range_2d + range_std * z_r)
    ang = 2.0 * np.pi * u_a
    spd = max_speed * np.sqrt(u_s)
    hd = 2.0 * np.pi * u_h
    return (ox + rad * np.cos(ang), oy + rad * np.sin(ang), spd * np.cos(hd), spd * np.sin(hd))


def predict_arrays(x, y, vx, vy, dt, noise, noise_pos, noise_vel, max_speed, jump=None, jump_prob=0.0):
    """Constant-velocity propagation; ``noise`` has shape ``x.shape + (4,)``
    of standard normals (position x/y, velocity x/y).  With ``jump_prob`` > 0,
    ``jump`` holds ``x.shape + (2,)`` uniforms: a particle whose first uniform
    falls below ``jump_prob`` turns to a new uniform heading, keeping its speed
    (targets change direction abruptly)."""
    nx = x + vx * dt + noise_pos * noise[..., 0]
    ny = y + vy * dt + noise_pos * noise[..., 1]
    nvx = vx + noise_vel * noise[..., 2]
    nvy = vy + noise_vel * noise[..., 3]
    spd = np.sqrt(nvx * nvx + nvy * nvy)
    scale = np.where(spd > max_speed, max_speed / np.maximum(spd, 1e-300), 1.0)
    nvx, nvy = nvx * scale, nvy * scale
    if jump_prob > 0:
        turn = jump[..., 0] < jump_prob
        s = np.sqrt(nvx * nvx + nvy * nvy)
        a = 2.0 * np.pi * jump[..., 1]
        nvx = np.where(turn, s * np.cos(a), nvx)
        nvy = np.where(turn, s * np.sin(a), nvy)
    return nx, ny, nvx, nvy


@numba.njit(cache=True, nogil=True)
def _predict_rows(x, y, vx, vy, base, dt, noise_pos, noise_vel, max_speed, jump_prob):
    M = x.shape[1]
    for i in range(x.shape[0]):
        b = base[i]
        for m in range(x.shape[1]):
            j = 4 * m
            nx = x[i, m] + vx[i, m] * dt + noise_pos * rng._ndtri(rng._unit(b, j))
            ny = y[i, m] + vy[i, m] * dt + noise_pos * rng._ndtri(rng._unit(b, j + 1))
            nvx = vx[i, m] + noise_vel * rng._ndtri(rng._unit(b, j + 2))
            nvy = vy[i, m] + noise_vel * rng._ndtri(rng._unit(b, j + 3))
            spd = math.sqrt(nvx * nvx + nvy * nvy)
            if spd > max_speed:
                scale = max_speed / max(spd, 1e-300)
                nvx *= scale
                nvy *= scale
            if jump_prob > 0 and rng._unit(b, 4 * M + 2 * m) < jump_prob:
                s = math.sqrt(nvx * nvx + nvy * nvy)
                a = 2.0 * math.pi * rng._unit(b, 4 * M + 2 * m + 1)
                nvx = s * math.cos(a)
                nvy = s * math.sin(a)
            x[i, m] = nx
            y[i, m] = ny
            vx[i, m] = nvx
            vy[i, m] = nvy


def predict_inplace(x, y, vx, vy, keys, counter, purpose, dt, noise_pos, noise_vel, max_speed, jump_prob=0.0):
    """Fused ``predict_arrays`` with noise drawn inline from the counter stream.

    Arrays are ``(R, ...)`` C-contiguous with one key per leading row.  With
    ``M = prod(x.shape[1:])``, stream entries ``[0, 4M)`` are the normals
    (``rng.normal(keys, counter, purpose, x.shape[1:] + (4,))``) and
    ``[4M, 6M)`` the turn uniforms, laid out as ``x.shape[1:] + (2,)``.
    """
    base = rng.stream_base(keys, counter, purpose)
    R = x.shape[0]
    _predict_rows(x.reshape(R, -1), y.reshape(R, -1), vx.reshape(R, -1), vy.reshape(R, -1), base,
                  float(dt), float(noise_pos), float(noise_vel), float(max_speed), float(jump_prob))


def range_loglik(x, y, ox, oy, r, sigma):
    """Gaussian log-likelihood of a range reading for every particle."""
    dx = x - ox
    dy = y - oy
    resid = (np.sqrt(dx * dx + dy * dy) - r) / sigma
    return -0.5 * resid * resid - np.log(sigma * np.sqrt(2.0 * np.pi))


def reweight(w, loglik):
    """Multiply weights by ``exp(loglik)`` and renormalise along the last axis.

    Returns ``(w_new, degenerate)``; where every particle's likelihood
    underflows the row resets to uniform and ``degenerate`` is set.
    """
    with np.errstate(divide="ignore"):
        lw = np.log(w) + loglik
    peak = np.max(lw, axis=-1, keepdims=True)
    degenerate = peak[..., 0] < LOG_UNDERFLOW
    safe_peak = np.where(np.isfinite(peak), peak, 0.0)
    nw = np.exp(lw - safe_peak)
    total = np.sum(nw, axis=-1, keepdims=True)
    n = w.shape[-1]
    bad = degenerate[..., None] | ~(total > 0)
    nw = np.where(bad, 1.0 / n, nw / np.where(total > 0, total, 1.0))
    return nw, degenerate | ~(total[..., 0] > 0)


def effective_sample_size(w):
    return 1.0 / np.sum(w * w, axis=-1)


def systematic_indices(w, u):
    """Systematic resampling indices along the last axis.

    ``u`` (one uniform per row) offsets the comb ``(u + i) / n``; particle
    ``j`` receives ``ceil(c_j n - u) - ceil(c_{j-1} n - u)`` copies where ``c``
    is the cumulative weight.  Counts are computed row-wise so the result does
    not depend on how many rows are batched together.
    """
    n = w.shape[-1]
    c = np.cumsum(w, axis=-1)
    upto = np.clip(np.ceil(c * n - u[..., None]), 0, n).astype(np.int64)
    upto[..., -1] = n
    counts = np.diff(upto, axis=-1, prepend=0)
    flat = np.repeat(np.arange(w.size, dtype=np.int64), counts.ravel())
    return (flat.reshape(w.shape) - (np.arange(w.size // n, dtype=np.int64) * n).reshape(w.shape[:-1] + (1,)))


def estimate_arrays(x, y, w):
    """Weighted mean position and weighted RMS spread along the last axis."""
    mx = np.sum(w * x, axis=-1)
    my = np.sum(w * y, axis=-1)
    dx = x - mx[..., None]
    dy = y - my[..., None]
    spread = np.sqrt(np.sum(w * (dx * dx + dy * dy), axis=-1))
    return mx, my, spread


# ---- single-set API -------------------------------------------------------

def pf_init(center_xy, radius: float, n_particles: int, max_speed: float, seed: int = 0) -> ParticleSet:
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be > 0")
    key = rng.seed_key(seed)
    draws = [rng.uniform(key, 0, p, n_particles) for p in (_P_INIT_R, _P_INIT_A, _P_INIT_S, _P_INIT_H)]
    x, y, vx, vy = disc_particles(float(center_xy[0]), float(center_xy[1]), radius, max_speed, *draws)
    w = np.full(n_particles, 1.0 / n_particles)
    return ParticleSet(x, y, vx, vy, w, float(max_speed), key, counter=1)


def pf_init_ring(meas: RangeMeasurement, n_particles: int, max_speed: float, seed: int = 0) -> ParticleSet:
    """Seed particles on the first range circle (bearing unknown)."""
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    key = rng.seed_key(seed)
    z = rng.normal(key, 0, _P_INIT_R, n_particles)
    draws = [rng.uniform(key, 0, p, n_particles) for p in (_P_INIT_A, _P_INIT_S, _P_INIT_H)]
    x, y, vx, vy = ring_particles(float(meas.origin_xy[0]), float(meas.origin_xy[1]), meas.range_2d,
                                  meas.noise_std, max_speed, z, *draws)
    w = np.full(n_particles, 1.0 / n_particles)
    return ParticleSet(x, y, vx, vy, w, float(max_speed), key, counter=1)


def pf_predict(ps: ParticleSet, dt: float, process_noise_pos: float = DEFAULT_PROCESS_NOISE_POS,
               process_noise_vel: float = DEFAULT_PROCESS_NOISE_VEL, jump_prob: float = 0.0) -> ParticleSet:
    if dt <= 0:
        raise ValueError("dt must be > 0")
    x, y, vx, vy = (np.array(a, dtype=np.float64, order="C")[None] for a in (ps.x, ps.y, ps.vx, ps.vy))
    predict_inplace(x, y, vx, vy, np.array([ps.key]), ps.counter, _P_PRED, dt, process_noise_pos,
                    process_noise_vel, ps.max_speed, jump_prob)
    x, y, vx, vy = x[0], y[0], vx[0], vy[0]
    return replace(ps, x=x, y=y, vx=vx, vy=vy, counter=ps.counter + 1, age=ps.age + 1)


def pf_update(ps: ParticleSet, meas: Sequence[RangeMeasurement]) -> ParticleSet:
    if not meas:
        raise ValueError("pf_update needs at least one measurement")
    ll = np.zeros_like(ps.w)
    for m in meas:
        ll = ll + range_loglik(ps.x, ps.y, m.origin_xy[0], m.origin_xy[1], m.range_2d, m.noise_std)
    w, degenerate = reweight(ps.w, ll)
    return replace(ps, w=w, age=0, degenerate=bool(degenerate))


def pf_resample(ps: ParticleSet, force: bool = False) -> ParticleSet:
    """Systematic resampling, applied only when ESS < n/2 unless ``force``."""
    n = ps.n_particles
    if not force and effective_sample_size(ps.w) >= n / 2:
        return ps
    u = rng.uniform(ps.key, ps.counter, _P_RESAMPLE)
    idx = systematic_indices(ps.w, np.asarray(u))
    return replace(ps, x=ps.x[idx], y=ps.y[idx], vx=ps.vx[idx], vy=ps.vy[idx],
                   w=np.full(n, 1.0 / n), counter=ps.counter + 1)


def pf_estimate(ps: ParticleSet) -> TrackEstimate:
    mx, my, spread = estimate_arrays(ps.x, ps.y, ps.w)
    return TrackEstimate(np.array([float(mx), float(my)]), float(spread), ps.age)


def ls_trilaterate(meas: Sequence[RangeMeasurement], return_residual: bool = False):
    """Linearised least-squares position fix from >= 3 non-collinear ranges.

    Subtracting the first circle equation from the others gives
    ``2 (o_i - o_0) . p = |o_i|^2 - |o_0|^2 - r_i^2 + r_0^2``.
    """
    if len(meas) < 3:
        raise RankDeficiencyError(f"need >= 3 measurements, got {len(meas)}")
    o = np.array([m.origin_xy[:2] for m in meas], dtype=np.float64)
    r = np.array([m.range_2d for m in meas], dtype=np.float64)
    A = 2.0 * (o[1:] - o[0])
    b = np.sum(o[1:] ** 2, axis=1) - np.sum(o[0] ** 2) - r[1:] ** 2 + r[0] ** 2
    scale = max(1.0, float(np.max(np.abs(A))))
    s = np.linalg.svd(A / scale, compute_uv=False)
    if len(s) < 2 or s[-1] < 1e-9 * s[0]:
        raise RankDeficiencyError("measurement origins are collinear")
    p, *_ = np.linalg.lstsq(A, b, rcond=None)
    if return_residual:
        return p, float(np.linalg.norm(np.linalg.norm(o - p, axis=1) - r))
    return p
