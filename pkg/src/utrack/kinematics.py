"""Simplified vehicle motion: constant speed, rudder-driven heading changes.

Positions advance by ``v * dt`` along the heading obtained after applying the
step's heading delta.  The heading delta comes from a per-(speed, dt) linear
model of the rudder angle, fitted by least squares on calibration data.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np

MAX_RUDDER = 0.24
# turn curvature per radian of rudder, rad per metre travelled
ORACLE_TURN_GAIN = 1.0 / 9.0
DEFAULT_NOISE_STD = 0.02
DEFAULT_SPEED = 1.0
DEFAULT_DT = 30.0


class ConfigurationError(KeyError):
    """A heading-model bucket was requested that was never calibrated."""


class FitError(ValueError):
    pass


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return w if w.ndim else float(w)


def _bucket_key(speed: float, dt: float) -> Tuple[float, float]:
    return (round(float(speed), 6), round(float(dt), 6))


@dataclass(frozen=True)
class VehicleState:
    position: Tuple[float, float, float]
    heading: float
    speed: float
    rudder_index: int = 2

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be >= 0")
        if not 0 <= self.rudder_index <= 4:
            raise ValueError(f"rudder_index {self.rudder_index} outside 0..4")
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))
        object.__setattr__(self, "position", tuple(float(p) for p in self.position))


@dataclass
class HeadingDeltaModel:
    """Ensemble of linear rudder-to-heading-delta maps, one per (speed, dt)."""

    buckets: Dict[Tuple[float, float], Tuple[float, float]] = field(default_factory=dict)
    noise_std: float = DEFAULT_NOISE_STD

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        self.buckets = {_bucket_key(*k): (float(a), float(b)) for k, (a, b) in self.buckets.items()}

    def coefficients(self, speed: float, dt: float) -> Tuple[float, float]:
        try:
            return self.buckets[_bucket_key(speed, dt)]
        except KeyError:
            raise ConfigurationError(
                f"no heading-delta bucket for speed={speed} m/s, dt={dt} s; "
                f"calibrated buckets: {sorted(self.buckets)}"
            ) from None

    def to_dict(self) -> dict:
        return {
            "noise_std": self.noise_std,
            "buckets": [
                {"speed": v, "dt": dt, "a": a, "b": b}
                for (v, dt), (a, b) in sorted(self.buckets.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeadingDeltaModel":
        extra = set(d) - {"noise_std", "buckets"}
        if extra:
            raise ValueError(f"unknown heading_model keys: {sorted(extra)}")
        buckets = {(b["speed"], b["dt"]): (b["a"], b["b"]) for b in d.get("buckets", [])}
        return cls(buckets=buckets, noise_std=float(d.get("noise_std", DEFAULT_NOISE_STD)))


@dataclass
class CalibrationDataset:
    gamma: np.ndarray
    speed: np.ndarray
    dt: np.ndarray
    dpsi: np.ndarray

    def __post_init__(self):
        self.gamma, self.speed, self.dt, self.dpsi = (
            np.asarray(x, dtype=np.float64).ravel() for x in (self.gamma, self.speed, self.dt, self.dpsi)
        )
        n = {len(self.gamma), len(self.speed), len(self.dt), len(self.dpsi)}
        if len(n) != 1:
            raise ValueError("calibration columns differ in length")

    def __len__(self):
        return len(self.gamma)

    def groups(self) -> Dict[Tuple[float, float], np.ndarray]:
        keys = [_bucket_key(v, t) for v, t in zip(self.speed, self.dt)]
        out: Dict[Tuple[float, float], List[int]] = {}
        for i, k in enumerate(keys):
            out.setdefault(k, []).append(i)
        return {k: np.asarray(v) for k, v in out.items()}


def heading_delta(model: HeadingDeltaModel, rudder_angle, speed: float, dt: float):
    """Noise-free heading change ``a * rudder + b`` for the (speed, dt) bucket."""
    a, b = model.coefficients(speed, dt)
    return a * np.asarray(rudder_angle, dtype=np.float64) + b


def advance(x, y, heading, speed, dpsi, dt):
    """Vectorised kinematic step; returns (x, y, heading) after the move.

    The new heading is applied before moving, so the step displacement always
    has magnitude ``speed * dt``.
    """
    psi = wrap_angle(heading + dpsi)
    step = speed * dt
    return x + step * np.cos(psi), y + step * np.sin(psi), psi


def step_vehicle(state: VehicleState, model: HeadingDeltaModel, rudder_angle: float,
                 dt: float, noise: float = 0.0) -> VehicleState:
    dpsi = heading_delta(model, rudder_angle, state.speed, dt) + noise
    x, y, psi = advance(np.float64(state.position[0]), np.float64(state.position[1]),
                        np.float64(state.heading), state.speed, dpsi, dt)
    return replace(state, position=(float(x), float(y), state.position[2]), heading=float(psi))


def reference_turn_oracle(rudder_angle, speed, dt):
    """Idealised constant-curvature turn: ``dpsi = k * rudder * speed * dt``.

    ``k = ORACLE_TURN_GAIN`` (1/9 rad per rad of rudder per metre), i.e. a
    full 0.24 rad rudder at 1 m/s over 30 s turns 0.8 rad.  Only used to
    synthesise calibration data when no simulator trajectories are available.
    """
    g = np.asarray(rudder_angle, dtype=np.float64)
    if np.any(np.abs(g) > MAX_RUDDER + 1e-12):
        raise ValueError(f"rudder angle outside [-{MAX_RUDDER}, {MAX_RUDDER}]")
    out = ORACLE_TURN_GAIN * g * np.asarray(speed, dtype=np.float64) * np.asarray(dt, dtype=np.float64)
    return out if out.ndim else float(out)


def synthesize_calibration(speeds: Iterable[float], dts: Iterable[float], rows_per_bucket: int = 200,
                           noise_std: float = 0.005, seed: int = 0) -> CalibrationDataset:
    rng = np.random.default_rng(seed)
    cols = {"gamma": [], "speed": [], "dt": [], "dpsi": []}
    for v in speeds:
        for dt in dts:
            g = rng.uniform(-MAX_RUDDER, MAX_RUDDER, rows_per_bucket)
            cols["gamma"].append(g)
            cols["speed"].append(np.full(rows_per_bucket, float(v)))
            cols["dt"].append(np.full(rows_per_bucket, float(dt)))
            cols["dpsi"].append(reference_turn_oracle(g, v, dt) + rng.normal(0.0, noise_std, rows_per_bucket))
    return CalibrationDataset(**{k: np.concatenate(v) for k, v in cols.items()})


def fit_heading_model(data: CalibrationDataset, noise_std: float = DEFAULT_NOISE_STD):
    """Ordinary least squares per (speed, dt) bucket.

    Returns ``(model, mae, r2)`` where ``mae`` maps bucket -> mean absolute
    residual on the fitting data and ``r2`` is the coefficient of
    determination over all rows.
    """
    buckets, mae = {}, {}
    resid = np.empty(len(data))
    for key, idx in data.groups().items():
        g, y = data.gamma[idx], data.dpsi[idx]
        if len(np.unique(g)) < 2:
            raise FitError(f"bucket speed={key[0]}, dt={key[1]} needs >= 2 distinct rudder values")
        A = np.column_stack([g, np.ones_like(g)])
        (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
        buckets[key] = (float(a), float(b))
        resid[idx] = y - (a * g + b)
        mae[key] = float(np.mean(np.abs(resid[idx])))
    ss_tot = float(np.sum((data.dpsi - data.dpsi.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return HeadingDeltaModel(buckets=buckets, noise_std=noise_std), mae, r2


def read_calibration_csv(path) -> CalibrationDataset:
    path = Path(path)
    cols = {"gamma": [], "speed": [], "dt": [], "dpsi": []}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != list(cols):
            raise ValueError(f"{path}: expected header gamma,speed,dt,dpsi, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                for k in cols:
                    cols[k].append(float(row[k]))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return CalibrationDataset(**cols)


def write_calibration_csv(data: CalibrationDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "speed", "dt", "dpsi"])
        for row in zip(data.gamma, data.speed, data.dt, data.dpsi):
            w.writerow([repr(float(v)) for v in row])


DEFAULT_SPEEDS = (0.5, 1.0, 1.5, 2.0)
DEFAULT_DTS = (10.0, 30.0, 60.0)


def default_heading_model(noise_std: float = DEFAULT_NOISE_STD) -> HeadingDeltaModel:
    """Model fitted on oracle data with 0.005 rad observation noise (seed 0)."""
    data = synthesize_calibration(DEFAULT_SPEEDS, DEFAULT_DTS, rows_per_bucket=200, noise_std=0.005, seed=0)
    model, _, _ = fit_heading_model(data, noise_std=noise_std)
    return model
