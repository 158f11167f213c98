"""The underwater tracking Dec-POMDP.

Agents (surface vehicles at constant speed) steer with a 5-position rudder,
listen for noisy ranges to submerged targets, keep one particle filter per
target, and gossip positions and raw ranges over a lossy acoustic link.

State is held structure-of-arrays with a leading environment axis, so the
same kernel steps one environment or a whole batch.  A lone environment is
simply a batch of size one.

Step phases, in order: targets move, agents move, ranges are measured,
particle filters predict and absorb their own ranges, agents exchange
messages and fuse received ranges, then observations, global state and the
shared reward are built.
"""
from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import rng
from . import tracking as trk
from .kinematics import MAX_RUDDER, HeadingDeltaModel, advance, default_heading_model, wrap_angle

N_ACTIONS = 5
N_FEATURES = 13
# token columns
F_DX, F_DY, F_DZ, F_SIN, F_COS, F_SPEED, F_SELF, F_AGENT, F_TARGET, F_VALID, F_AGE, F_SPREAD, F_RUDDER = range(13)

_P_TGT_TURN, _P_TGT_NOISE, _P_AGT_NOISE = 10, 11, 12
_P_MEAS_DROP, _P_MEAS_NOISE, _P_COMM = 13, 14, 15
_P_PF_PRED, _P_PF_RING_R, _P_PF_RING_U, _P_PF_RESAMPLE = 16, 17, 18, 19
_P_SPAWN = 100

NEVER = 2 ** 62


class ContractViolation(ValueError):
    pass


class SpawnError(RuntimeError):
    pass


@dataclass
class EnvConfig:
    n_agents: int = 1
    n_targets: int = 1
    horizon: int = 128
    dt: float = 30.0
    agent_speed: float = 1.0
    # a float, or [lo, hi] to draw each target's fraction uniformly per episode
    target_speed_frac: Union[float, Tuple[float, float]] = 0.3
    target_turn_interval: float = 20.0
    detection_range: float = 450.0
    comm_range: float = 1500.0
    comm_drop_prob: float = 0.1
    range_noise_std: float = 3.0
    eps_min: float = 10.0
    eps_max: float = 50.0
    d_min: float = 50.0
    d_safe: float = 10.0
    reward_mode: str = "tracking"
    spawn_min_sep: float = 50.0
    spawn_max_sep: float = 200.0
    perturbation_std: float = 0.0
    target_depth: Tuple[float, float] = (10.0, 60.0)
    lost_after: int = 20
    n_particles: int = trk.DEFAULT_N_PARTICLES
    process_noise_pos: float = trk.DEFAULT_PROCESS_NOISE_POS
    process_noise_vel: float = trk.DEFAULT_PROCESS_NOISE_VEL
    pf_speed_margin: float = 1.2
    # per-step probability that a particle turns to a new heading; None uses
    # 1 / target_turn_interval, the targets' own rate of direction changes
    pf_turn_prob: Optional[float] = None
    pos_scale: float = 100.0
    speed_scale: float = 1.0
    age_scale: float = 10.0
    spread_scale: float = 100.0
    heading_model: HeadingDeltaModel = field(default_factory=default_heading_model)

    def __post_init__(self):
        if isinstance(self.heading_model, dict):
            self.heading_model = HeadingDeltaModel.from_dict(self.heading_model)
        if isinstance(self.target_speed_frac, (list, tuple)):
            lo, hi = (float(v) for v in self.target_speed_frac)
            self.target_speed_frac = (lo, hi)
        self.target_depth = tuple(float(v) for v in self.target_depth)
        self.validate()

    def validate(self):
        problems = []
        if self.n_agents < 1:
            problems.append("n_agents must be >= 1")
        if self.n_targets < 1:
            problems.append("n_targets must be >= 1")
        if self.horizon < 1:
            problems.append("horizon must be >= 1")
        if not self.eps_min < self.eps_max:
            problems.append("eps_min must be < eps_max")
        if not self.spawn_min_sep < self.spawn_max_sep:
            problems.append("spawn_min_sep must be < spawn_max_sep")
        if not 0.0 <= self.comm_drop_prob <= 1.0:
            problems.append("comm_drop_prob must lie in [0, 1]")
        if self.range_noise_std <= 0:
            problems.append("range_noise_std must be > 0")
        if self.reward_mode not in ("tracking", "follow"):
            problems.append("reward_mode must be 'tracking' or 'follow'")
        if self.n_particles < 1:
            problems.append("n_particles must be >= 1")
        if self.pf_turn_prob is not None and not 0.0 <= self.pf_turn_prob <= 1.0:
            problems.append("pf_turn_prob must lie in [0, 1]")
        if problems:
            raise ValueError("invalid EnvConfig: " + "; ".join(problems))
        self.heading_model.coefficients(self.agent_speed, self.dt)

    @property
    def n_entities(self) -> int:
        return self.n_agents + self.n_targets

    @property
    def speed_frac_range(self) -> Tuple[float, float]:
        f = self.target_speed_frac
        return f if isinstance(f, tuple) else (float(f), float(f))

    @property
    def turn_prob(self) -> float:
        if self.pf_turn_prob is not None:
            return float(self.pf_turn_prob)
        return 0.0 if math.isinf(self.target_turn_interval) else 1.0 / max(self.target_turn_interval, 1.0)

    @property
    def max_turn(self) -> float:
        """Largest heading change an agent can make in one step, rad."""
        a, b = self.heading_model.coefficients(self.agent_speed, self.dt)
        return abs(a) * MAX_RUDDER + abs(b)

    def replace(self, **kw) -> "EnvConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["heading_model"] = self.heading_model.to_dict()
        d["target_depth"] = list(self.target_depth)
        if isinstance(self.target_speed_frac, tuple):
            d["target_speed_frac"] = list(self.target_speed_frac)
        if math.isinf(self.target_turn_interval):
            d["target_turn_interval"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown env config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("target_turn_interval") in ("inf", "Infinity"):
            d["target_turn_interval"] = math.inf
        return cls(**d)


def _array_fields(cls):
    return [f.name for f in dataclasses.fields(cls)]


@dataclass
class WorldState:
    """Batched world state; every array's leading axis is the environment.

    Agent arrays are ``(E, A)``, target arrays ``(E, T)``, knowledge arrays
    ``(E, A, A)`` indexed ``[receiver, sender]``, filter arrays
    ``(E, A, T, P)`` indexed ``[owner agent, target, particle]``.
    """

    seed: np.ndarray
    episode: np.ndarray
    step: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    az: np.ndarray
    ah: np.ndarray
    aspd: np.ndarray
    arud: np.ndarray
    tx: np.ndarray
    ty: np.ndarray
    tz: np.ndarray
    th: np.ndarray
    tspd: np.ndarray
    tcmd: np.ndarray
    tcount: np.ndarray
    kb_x: np.ndarray
    kb_y: np.ndarray
    kb_z: np.ndarray
    kb_h: np.ndarray
    kb_age: np.ndarray
    kb_valid: np.ndarray
    pf_x: np.ndarray
    pf_y: np.ndarray
    pf_vx: np.ndarray
    pf_vy: np.ndarray
    pf_w: np.ndarray
    pf_on: np.ndarray
    trk_age: np.ndarray
    est_x: np.ndarray
    est_y: np.ndarray
    est_vx: np.ndarray
    est_vy: np.ndarray
    est_spread: np.ndarray
    miss: np.ndarray

    @property
    def n_envs(self) -> int:
        return self.seed.shape[0]

    @property
    def n_agents(self) -> int:
        return self.ax.shape[1]

    @property
    def n_targets(self) -> int:
        return self.tx.shape[1]

    @property
    def key(self) -> np.ndarray:
        return rng.derive(self.seed, self.episode)

    def copy(self) -> "WorldState":
        return WorldState(**{n: getattr(self, n).copy() for n in _array_fields(WorldState)})

    def select(self, idx) -> "WorldState":
        return WorldState(**{n: getattr(self, n)[idx].copy() for n in _array_fields(WorldState)})

    def assign(self, idx, other: "WorldState") -> None:
        for n in _array_fields(WorldState):
            getattr(self, n)[idx] = getattr(other, n)

    @staticmethod
    def concat(parts: Sequence["WorldState"]) -> "WorldState":
        return WorldState(**{n: np.concatenate([getattr(p, n) for p in parts]) for n in _array_fields(WorldState)})

    def equals(self, other: "WorldState") -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in _array_fields(WorldState))

    def agent_positions(self) -> np.ndarray:
        return np.stack([self.ax, self.ay, self.az], axis=-1)


@dataclass
class StepOutput:
    obs: np.ndarray            # (E, A, n, z)
    global_state: np.ndarray   # (E, n, z)
    reward: np.ndarray         # (E,)
    done: np.ndarray           # (E,)
    action_mask: np.ndarray    # (E, A, 5) legal actions for the next step
    info: Dict[str, np.ndarray]


# ---- small pure pieces ----------------------------------------------------

def rudder_angle(index):
    i = np.asarray(index)
    if np.any((i < 0) | (i > 4)):
        raise ContractViolation(f"rudder index {index} outside 0..4")
    out = -MAX_RUDDER + i * (2 * MAX_RUDDER / 4)
    return out if np.ndim(out) else float(out)


def valid_actions(rudder_index):
    """Legal next rudder positions: the current one and its two neighbours."""
    i = np.asarray(rudder_index)
    if np.any((i < 0) | (i > 4)):
        raise ContractViolation(f"rudder index {rudder_index} outside 0..4")
    return np.abs(np.arange(N_ACTIONS) - i[..., None]) <= 1


def tracking_reward(errors, cfg: EnvConfig):
    """Mean over targets of the exponential-decay tracking reward."""
    e = np.asarray(errors, dtype=np.float64)
    t = (e - cfg.eps_min) / (cfg.eps_max - cfg.eps_min)
    inside = (t >= 0) & (t < 1)
    ts = np.where(inside, t, 0.0)
    r = np.where(e < cfg.eps_min, 1.0, np.where(inside, np.exp(-2.0 * ts / (1.0 - ts)), 0.0))
    out = r.mean(axis=-1)
    return out if np.ndim(out) else float(out)


def follow_reward(min_dists, cfg: EnvConfig):
    d = np.asarray(min_dists, dtype=np.float64)
    out = (d <= cfg.d_min).astype(np.float64).mean(axis=-1)
    return out if np.ndim(out) else float(out)


def crash_check(agent_positions, d_safe: float):
    """True where any two agents are closer than ``d_safe`` (3D, strict)."""
    p = np.asarray(agent_positions, dtype=np.float64)
    n = p.shape[-2]
    if n < 2:
        out = np.zeros(p.shape[:-2], dtype=bool)
        return out if out.ndim else False
    diff = p[..., :, None, :] - p[..., None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    iu = np.triu_indices(n, 1)
    out = np.any(d[..., iu[0], iu[1]] < d_safe, axis=-1)
    return out if out.ndim else bool(out)


def geometric_countdown(u, mean_interval: float):
    """Steps to wait before the next direction change (interval minus one)."""
    u = np.asarray(u, dtype=np.float64)
    if math.isinf(mean_interval):
        return np.full(u.shape, NEVER, dtype=np.int64)
    p = 1.0 / max(float(mean_interval), 1.0)
    if p >= 1.0:
        return np.zeros(u.shape, dtype=np.int64)
    g = np.ceil(np.log(u) / math.log1p(-p))
    return np.maximum(g, 1).astype(np.int64) - 1


def target_policy(heading, cmd, countdown, cfg: EnvConfig, u_heading, u_count):
    """Erratic target steering.

    When the countdown is 0 a new absolute heading is drawn uniformly and a
    new geometric countdown is started; otherwise the countdown ticks down.
    The returned heading change steers toward the command, bounded by the
    agents' maximum turn per step.
    """
    heading = np.asarray(heading, dtype=np.float64)
    fire = np.asarray(countdown) == 0
    new_cmd = np.where(fire, wrap_angle(np.pi - 2.0 * np.pi * np.asarray(u_heading)), cmd)
    new_count = np.where(fire, geometric_countdown(u_count, cfg.target_turn_interval), np.asarray(countdown) - 1)
    err = wrap_angle(new_cmd - heading)
    lim = cfg.max_turn
    dpsi = np.clip(err, -lim, lim)
    return dpsi, new_cmd, new_count


def _rotate_into(dx, dy, heading):
    c, s = np.cos(heading), np.sin(heading)
    return c * dx + s * dy, -s * dx + c * dy


# ---- spawn ------------------------------------------------------------------

_SPAWN_CANDIDATES = 1000


def _spawn_arrays(cfg: EnvConfig, seeds: np.ndarray, episodes: np.ndarray) -> WorldState:
    E = len(seeds)
    A, T, P = cfg.n_agents, cfg.n_targets, cfg.n_particles
    N = A + T
    key = rng.derive(seeds, episodes)
    px = np.zeros((E, N))
    py = np.zeros((E, N))
    ok = np.ones(E, dtype=bool)
    for k in range(1, N):
        u = rng.uniform(key, 0, _P_SPAWN + k, (2, _SPAWN_CANDIDATES))
        rad = cfg.spawn_max_sep * np.sqrt(u[:, 0])
        ang = 2.0 * np.pi * u[:, 1]
        cx = px[:, :1] + rad * np.cos(ang)
        cy = py[:, :1] + rad * np.sin(ang)
        dx = cx[:, :, None] - px[:, None, :k]
        dy = cy[:, :, None] - py[:, None, :k]
        d = np.sqrt(dx * dx + dy * dy)
        good = np.all((d >= cfg.spawn_min_sep) & (d <= cfg.spawn_max_sep), axis=-1)
        found = good.any(axis=1)
        first = np.argmax(good, axis=1)
        ok &= found
        px[:, k] = cx[np.arange(E), first]
        py[:, k] = cy[np.arange(E), first]
    if not ok.all():
        bad = np.flatnonzero(~ok)
        raise SpawnError(
            f"no feasible placement after {_SPAWN_CANDIDATES} attempts for envs {bad.tolist()} "
            f"(n_agents={A}, n_targets={T}, sep=[{cfg.spawn_min_sep}, {cfg.spawn_max_sep}])"
        )
    u = rng.uniform(key, 0, _P_SPAWN, (4, N))
    heading = wrap_angle(np.pi - 2.0 * np.pi * u[:, 0])
    lo, hi = cfg.target_depth
    tz = lo + (hi - lo) * u[:, 1, A:]
    flo, fhi = cfg.speed_frac_range
    tspd = cfg.agent_speed * (flo + (fhi - flo) * u[:, 2, A:])
    tcount = geometric_countdown(u[:, 3, A:], cfg.target_turn_interval)

    zeros_a = np.zeros((E, A))
    zeros_aa = np.zeros((E, A, A))
    zeros_at = np.zeros((E, A, T))
    zeros_p = np.zeros((E, A, T, P))
    return WorldState(
        seed=np.asarray(seeds, dtype=np.uint64).copy(),
        episode=np.asarray(episodes, dtype=np.int64).copy(),
        step=np.zeros(E, dtype=np.int64),
        ax=px[:, :A].copy(), ay=py[:, :A].copy(), az=zeros_a.copy(), ah=heading[:, :A].copy(),
        aspd=np.full((E, A), float(cfg.agent_speed)), arud=np.full((E, A), 2, dtype=np.int64),
        tx=px[:, A:].copy(), ty=py[:, A:].copy(), tz=tz, th=heading[:, A:].copy(), tspd=tspd,
        tcmd=heading[:, A:].copy(), tcount=tcount,
        kb_x=zeros_aa.copy(), kb_y=zeros_aa.copy(), kb_z=zeros_aa.copy(), kb_h=zeros_aa.copy(),
        kb_age=np.zeros((E, A, A), dtype=np.int64), kb_valid=np.zeros((E, A, A), dtype=bool),
        pf_x=zeros_p.copy(), pf_y=zeros_p.copy(), pf_vx=zeros_p.copy(), pf_vy=zeros_p.copy(),
        pf_w=np.full((E, A, T, P), 1.0 / P), pf_on=np.zeros((E, A, T), dtype=bool),
        trk_age=np.zeros((E, A, T), dtype=np.int64),
        est_x=np.repeat(px[:, :A, None], T, axis=2), est_y=np.repeat(py[:, :A, None], T, axis=2),
        est_vx=zeros_at.copy(), est_vy=zeros_at.copy(), est_spread=zeros_at.copy(),
        miss=np.zeros((E, T), dtype=np.int64),
    )


def spawn(cfg: EnvConfig, seed: int, episode: int = 0) -> WorldState:
    """Fresh episode for one environment (a batch of size one)."""
    return _spawn_arrays(cfg, np.array([rng.seed_key(seed)], dtype=np.uint64), np.array([episode]))


def spawn_from_keys(cfg: EnvConfig, seed_keys: np.ndarray, episodes: np.ndarray) -> WorldState:
    return _spawn_arrays(cfg, np.asarray(seed_keys, dtype=np.uint64), np.asarray(episodes, dtype=np.int64))


# ---- step phases --------------------------------------------------------------

class _Span:
    __slots__ = ("timer", "name", "t0")

    def __init__(self, timer, name):
        self.timer, self.name = timer, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        tot = self.timer.totals
        tot[self.name] = tot.get(self.name, 0.0) + time.perf_counter() - self.t0
        return False


class PhaseTimer:
    """Accumulates wall time per phase name."""

    def __init__(self):
        self.totals: Dict[str, float] = {}

    def __call__(self, name: str) -> _Span:
        return _Span(self, name)


class _Null:
    def __enter__(self):
        pass

    def __exit__(self, *exc):
        return False


_NULL = _Null()


def _no_timer(name):
    return _NULL


def _phase_targets(ws: WorldState, cfg: EnvConfig, key, ctr):
    T = ws.n_targets
    u = rng.uniform(key, ctr, _P_TGT_TURN, (2, T))
    dpsi, ws.tcmd, ws.tcount = target_policy(ws.th, ws.tcmd, ws.tcount, cfg, u[:, 0], u[:, 1])
    noise_std = cfg.heading_model.noise_std
    if noise_std > 0:
        dpsi = dpsi + noise_std * rng.normal(key, ctr, _P_TGT_NOISE, T)
    ws.tx, ws.ty, ws.th = advance(ws.tx, ws.ty, ws.th, ws.tspd, dpsi, cfg.dt)


def _phase_agents(ws: WorldState, cfg: EnvConfig, actions, key, ctr):
    a, b = cfg.heading_model.coefficients(cfg.agent_speed, cfg.dt)
    ws.arud = actions.astype(np.int64)
    dpsi = a * rudder_angle(ws.arud) + b
    std = math.sqrt(cfg.heading_model.noise_std ** 2 + cfg.perturbation_std ** 2)
    if std > 0:
        dpsi = dpsi + std * rng.normal(key, ctr, _P_AGT_NOISE, ws.n_agents)
    ws.ax, ws.ay, ws.ah = advance(ws.ax, ws.ay, ws.ah, ws.aspd, dpsi, cfg.dt)


def measure_ranges(ws: WorldState, cfg: EnvConfig, key, ctr):
    """Own range readings, shape (E, A, T): (present, horizontal range, true 3D distance)."""
    A, T = ws.n_agents, ws.n_targets
    dx = ws.tx[:, None, :] - ws.ax[:, :, None]
    dy = ws.ty[:, None, :] - ws.ay[:, :, None]
    dz = ws.tz[:, None, :] - ws.az[:, :, None]
    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
    drop = rng.uniform(key, ctr, _P_MEAS_DROP, (A, T))
    present = (dist <= cfg.detection_range) & (drop >= cfg.comm_drop_prob)
    noisy = np.maximum(dist + cfg.range_noise_std * rng.normal(key, ctr, _P_MEAS_NOISE, (A, T)), 0.0)
    r2d, _ = trk.slant_to_horizontal(noisy, dz)
    return present, r2d, dist


def _ring_init(ws: WorldState, cfg: EnvConfig, sel, ox, oy, rng_, key, ctr, salt: int):
    """Re-seed the selected (E, A, T) filters on their measured range circle."""
    e, a, t = np.nonzero(sel)
    if len(e) == 0:
        return
    P = cfg.n_particles
    keys = rng.derive(key[e], a, t, salt)
    c = np.broadcast_to(ctr, key.shape)[e]
    z = rng.normal(keys, c, _P_PF_RING_R, P)
    u = rng.uniform(keys, c, _P_PF_RING_U, (3, P))
    vmax = cfg.pf_speed_margin * cfg.agent_speed * cfg.speed_frac_range[1]
    x, y, vx, vy = trk.ring_particles(ox[sel][:, None], oy[sel][:, None], rng_[sel][:, None],
                                      cfg.range_noise_std, vmax, z, u[:, 0], u[:, 1], u[:, 2])
    ws.pf_x[e, a, t] = x
    ws.pf_y[e, a, t] = y
    ws.pf_vx[e, a, t] = vx
    ws.pf_vy[e, a, t] = vy
    ws.pf_w[e, a, t] = 1.0 / P
    ws.pf_on[e, a, t] = True


def _phase_pf_own(ws: WorldState, cfg: EnvConfig, present, r2d, key, ctr):
    A, T, P = ws.n_agents, ws.n_targets, cfg.n_particles
    vmax = cfg.pf_speed_margin * cfg.agent_speed * cfg.speed_frac_range[1]
    trk.predict_inplace(ws.pf_x, ws.pf_y, ws.pf_vx, ws.pf_vy, key, ctr, _P_PF_PRED, cfg.dt,
                        cfg.process_noise_pos, cfg.process_noise_vel, vmax, cfg.turn_prob)
    ox = np.broadcast_to(ws.ax[:, :, None], present.shape)
    oy = np.broadcast_to(ws.ay[:, :, None], present.shape)
    upd = present & ws.pf_on
    if upd.any():
        ll = trk.range_loglik(ws.pf_x, ws.pf_y, ox[..., None], oy[..., None], r2d[..., None], cfg.range_noise_std)
        w, degen = trk.reweight(ws.pf_w, ll)
        ws.pf_w = np.where(upd[..., None], w, ws.pf_w)
        _ring_init(ws, cfg, upd & degen, ox, oy, r2d, key, ctr, salt=1)
    _ring_init(ws, cfg, present & ~ws.pf_on, ox, oy, r2d, key, ctr, salt=0)
    return present.copy()


def exchange_comms(ws: WorldState, cfg: EnvConfig, present, r2d, key, ctr):
    """Broadcast phase.

    Every ordered (receiver, sender) pair within ``comm_range`` succeeds with
    probability ``1 - comm_drop_prob``.  Success refreshes the receiver's
    record of the sender and fuses the sender's fresh ranges into the
    receiver's filters.  Returns the (E, A, T) mask of filters that received
    at least one range this phase.
    """
    E, A, T = ws.n_envs, ws.n_agents, ws.n_targets
    got = np.zeros((E, A, T), dtype=bool)
    if A < 2:
        ws.kb_age += 1
        return got
    dx = ws.ax[:, :, None] - ws.ax[:, None, :]
    dy = ws.ay[:, :, None] - ws.ay[:, None, :]
    dz = ws.az[:, :, None] - ws.az[:, None, :]
    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
    u = rng.uniform(key, ctr, _P_COMM, (A, A))
    recv = (dist <= cfg.comm_range) & (u >= cfg.comm_drop_prob) & ~np.eye(A, dtype=bool)

    ws.kb_x = np.where(recv, ws.ax[:, None, :], ws.kb_x)
    ws.kb_y = np.where(recv, ws.ay[:, None, :], ws.kb_y)
    ws.kb_z = np.where(recv, ws.az[:, None, :], ws.kb_z)
    ws.kb_h = np.where(recv, ws.ah[:, None, :], ws.kb_h)
    ws.kb_age = np.where(recv, 0, ws.kb_age + 1)
    ws.kb_valid = ws.kb_valid | recv

    # incoming[e, r, s, t]: receiver r hears sender s's range to target t
    incoming = recv[:, :, :, None] & present[:, None, :, :]
    has_any = incoming.any(axis=2)
    if not has_any.any():
        return got
    # filters still uninitialised start from the first received circle
    first = np.argmax(incoming, axis=2)
    fresh = has_any & ~ws.pf_on
    e_i, r_i, t_i = np.indices((E, A, T))
    ox0 = ws.ax[e_i, first]
    oy0 = ws.ay[e_i, first]
    rr0 = r2d[e_i, first, t_i]
    _ring_init(ws, cfg, fresh, ox0, oy0, rr0, key, ctr, salt=2)
    skip = np.zeros_like(incoming)
    skip[e_i, r_i, first, t_i] = fresh

    ll = np.zeros_like(ws.pf_w)
    used = np.zeros((E, A, T), dtype=bool)
    for s in range(A):
        m = incoming[:, :, s, :] & ~skip[:, :, s, :]
        if not m.any():
            continue
        ls = trk.range_loglik(ws.pf_x, ws.pf_y, ws.ax[:, s, None, None, None], ws.ay[:, s, None, None, None],
                              r2d[:, s, None, :, None], cfg.range_noise_std)
        ll = ll + np.where(m[..., None], ls, 0.0)
        used |= m
    if used.any():
        w, degen = trk.reweight(ws.pf_w, ll)
        ws.pf_w = np.where(used[..., None], w, ws.pf_w)
        _ring_init(ws, cfg, used & degen, ox0, oy0, rr0, key, ctr, salt=3)
    return has_any


def _phase_resample(ws: WorldState, cfg: EnvConfig, key, ctr):
    P = cfg.n_particles
    u_all = rng.uniform(key, ctr, _P_PF_RESAMPLE, (ws.n_agents, ws.n_targets))
    need = ws.pf_on & (trk.effective_sample_size(ws.pf_w) < P / 2)
    if not need.any():
        return
    idx = trk.systematic_indices(ws.pf_w[need], u_all[need])
    for name in ("pf_x", "pf_y", "pf_vx", "pf_vy"):
        arr = getattr(ws, name)
        arr[need] = np.take_along_axis(arr[need], idx, axis=-1)
    ws.pf_w[need] = 1.0 / P


def _phase_estimates(ws: WorldState, updated):
    mx, my, spread = trk.estimate_arrays(ws.pf_x, ws.pf_y, ws.pf_w)
    mvx = np.sum(ws.pf_w * ws.pf_vx, axis=-1)
    mvy = np.sum(ws.pf_w * ws.pf_vy, axis=-1)
    on = ws.pf_on
    ws.est_x = np.where(on, mx, ws.ax[:, :, None])
    ws.est_y = np.where(on, my, ws.ay[:, :, None])
    ws.est_vx = np.where(on, mvx, 0.0)
    ws.est_vy = np.where(on, mvy, 0.0)
    ws.est_spread = np.where(on, spread, 0.0)
    ws.trk_age = np.where(updated, 0, ws.trk_age + 1)


def tracking_errors(ws: WorldState):
    """Per-target error of the best agent's estimate, (E, T), and per-agent errors (E, A, T)."""
    ex = ws.est_x - ws.tx[:, None, :]
    ey = ws.est_y - ws.ty[:, None, :]
    per_agent = np.sqrt(ex * ex + ey * ey)
    return per_agent.min(axis=1), per_agent


def min_agent_target_dist(ws: WorldState):
    dx = ws.ax[:, :, None] - ws.tx[:, None, :]
    dy = ws.ay[:, :, None] - ws.ty[:, None, :]
    return np.sqrt(dx * dx + dy * dy).min(axis=1)


def lost_target_check(ws: WorldState, cfg: EnvConfig):
    """Targets nobody has ranged for ``lost_after`` consecutive steps."""
    return ws.miss >= cfg.lost_after


# ---- observations ----------------------------------------------------------------

def build_observations(ws: WorldState, cfg: EnvConfig) -> np.ndarray:
    """Entity tokens for every agent, (E, A, A+T, z).

    Positions are relative to the observing agent and rotated into its body
    frame (x forward, y to port); other entities' headings are relative to
    the observer's.  Other agents come from the knowledge base, targets from
    the observer's own filters.
    """
    E, A, T = ws.n_envs, ws.n_agents, ws.n_targets
    out = np.zeros((E, A, A + T, N_FEATURES))
    h_self = ws.ah[:, :, None]

    # other agents as last heard of
    dx, dy = _rotate_into(ws.kb_x - ws.ax[:, :, None], ws.kb_y - ws.ay[:, :, None], h_self)
    valid = ws.kb_valid
    rel_h = ws.kb_h - h_self
    ag = out[:, :, :A, :]
    ag[..., F_DX] = np.where(valid, dx / cfg.pos_scale, 0.0)
    ag[..., F_DY] = np.where(valid, dy / cfg.pos_scale, 0.0)
    ag[..., F_DZ] = np.where(valid, (ws.kb_z - ws.az[:, :, None]) / cfg.pos_scale, 0.0)
    ag[..., F_SIN] = np.where(valid, np.sin(rel_h), 0.0)
    ag[..., F_COS] = np.where(valid, np.cos(rel_h), 0.0)
    ag[..., F_SPEED] = np.where(valid, cfg.agent_speed / cfg.speed_scale, 0.0)
    ag[..., F_AGENT] = 1.0
    ag[..., F_VALID] = valid
    ag[..., F_AGE] = ws.kb_age / cfg.age_scale

    # self rows overwrite the diagonal
    ar = np.arange(A)
    selfrow = np.zeros((E, A, N_FEATURES))
    selfrow[..., F_SIN] = np.sin(ws.ah)
    selfrow[..., F_COS] = np.cos(ws.ah)
    selfrow[..., F_SPEED] = ws.aspd / cfg.speed_scale
    selfrow[..., F_SELF] = 1.0
    selfrow[..., F_VALID] = 1.0
    selfrow[..., F_RUDDER] = rudder_angle(ws.arud) / MAX_RUDDER
    out[:, ar, ar, :] = selfrow

    # targets from own filters
    dx, dy = _rotate_into(ws.est_x - ws.ax[:, :, None], ws.est_y - ws.ay[:, :, None], h_self)
    on = ws.pf_on
    vh = np.arctan2(ws.est_vy, ws.est_vx) - h_self
    spd = np.sqrt(ws.est_vx ** 2 + ws.est_vy ** 2)
    tg = out[:, :, A:, :]
    tg[..., F_DX] = dx / cfg.pos_scale
    tg[..., F_DY] = dy / cfg.pos_scale
    tg[..., F_DZ] = (ws.tz[:, None, :] - ws.az[:, :, None]) / cfg.pos_scale
    tg[..., F_SIN] = np.where(on, np.sin(vh), 0.0)
    tg[..., F_COS] = np.where(on, np.cos(vh), 0.0)
    tg[..., F_SPEED] = spd / cfg.speed_scale
    tg[..., F_TARGET] = 1.0
    tg[..., F_VALID] = on
    tg[..., F_AGE] = ws.trk_age / cfg.age_scale
    tg[..., F_SPREAD] = ws.est_spread / cfg.spread_scale
    return out


def build_observation(agent_id: int, ws: WorldState, cfg: EnvConfig) -> np.ndarray:
    """Token matrix for one agent of a single-environment state."""
    return build_observations(ws, cfg)[0, agent_id]


def build_global_state(ws: WorldState, cfg: EnvConfig, track_err=None) -> np.ndarray:
    """True state tokens (E, A+T, z) in a frame centred on the entities' centroid."""
    E, A, T = ws.n_envs, ws.n_agents, ws.n_targets
    if track_err is None:
        track_err, _ = tracking_errors(ws)
    x = np.concatenate([ws.ax, ws.tx], axis=1)
    y = np.concatenate([ws.ay, ws.ty], axis=1)
    z = np.concatenate([ws.az, ws.tz], axis=1)
    h = np.concatenate([ws.ah, ws.th], axis=1)
    v = np.concatenate([ws.aspd, ws.tspd], axis=1)
    cx = x.mean(axis=1, keepdims=True)
    cy = y.mean(axis=1, keepdims=True)
    out = np.zeros((E, A + T, N_FEATURES))
    out[..., F_DX] = (x - cx) / cfg.pos_scale
    out[..., F_DY] = (y - cy) / cfg.pos_scale
    out[..., F_DZ] = z / cfg.pos_scale
    out[..., F_SIN] = np.sin(h)
    out[..., F_COS] = np.cos(h)
    out[..., F_SPEED] = v / cfg.speed_scale
    out[:, :A, F_AGENT] = 1.0
    out[:, A:, F_TARGET] = 1.0
    out[..., F_VALID] = 1.0
    out[:, A:, F_AGE] = ws.trk_age.min(axis=1) / cfg.age_scale
    out[:, A:, F_SPREAD] = track_err / cfg.spread_scale
    out[:, :A, F_RUDDER] = rudder_angle(ws.arud) / MAX_RUDDER
    return out


# ---- the step ---------------------------------------------------------------------

def check_actions(ws: WorldState, actions, env_offset: int = 0) -> np.ndarray:
    actions = np.asarray(actions)
    if actions.shape != (ws.n_envs, ws.n_agents):
        raise ContractViolation(f"actions shape {actions.shape} != {(ws.n_envs, ws.n_agents)}")
    bad = (actions < 0) | (actions > 4) | (np.abs(actions - ws.arud) > 1)
    if bad.any():
        e, a = np.argwhere(bad)[0]
        raise ContractViolation(
            f"env {int(e) + env_offset}, agent {int(a)}: action {int(actions[e, a])} illegal "
            f"with rudder at {int(ws.arud[e, a])}")
    return actions.astype(np.int64)


def advance_world(ws: WorldState, actions, cfg: EnvConfig, timer=None, env_offset: int = 0) -> StepOutput:
    """Step every environment of ``ws`` in place and return the batched output."""
    ph = timer or _no_timer
    with ph("validate"):
        actions = check_actions(ws, actions, env_offset)
        key = ws.key
        ctr = ws.step + 1
    with ph("targets"):
        _phase_targets(ws, cfg, key, ctr)
    with ph("agents"):
        _phase_agents(ws, cfg, actions, key, ctr)
    with ph("measure"):
        present, r2d, _ = measure_ranges(ws, cfg, key, ctr)
        ws.miss = np.where(present.any(axis=1), 0, ws.miss + 1)
    with ph("filter"):
        own = _phase_pf_own(ws, cfg, present, r2d, key, ctr)
    with ph("comms"):
        received = exchange_comms(ws, cfg, present, r2d, key, ctr)
    with ph("filter"):
        _phase_resample(ws, cfg, key, ctr)
        _phase_estimates(ws, own | received)
    with ph("observe"):
        ws.step = ws.step + 1
        err, _ = tracking_errors(ws)
        mind = min_agent_target_dist(ws)
        crash = crash_check(ws.agent_positions(), cfg.d_safe)
        if cfg.reward_mode == "tracking":
            reward = tracking_reward(err, cfg)
        else:
            reward = follow_reward(mind, cfg)
        reward = np.where(crash, -1.0, reward)
        obs = build_observations(ws, cfg)
        gstate = build_global_state(ws, cfg, err)
        done = ws.step >= cfg.horizon
        info = {
            "track_err": err,
            "min_dist": mind,
            "collision": crash,
            "lost": lost_target_check(ws, cfg),
            "detected": present.any(axis=1),
            "est_x": ws.est_x.copy(),
            "est_y": ws.est_y.copy(),
        }
        return StepOutput(obs, gstate, reward, done, valid_actions(ws.arud), info)


def step(state: WorldState, actions, cfg: EnvConfig):
    """Functional step: returns ``(new_state, output)`` leaving ``state`` untouched."""
    ws = state.copy()
    out = advance_world(ws, np.asarray(actions).reshape(ws.n_envs, ws.n_agents), cfg)
    return ws, out


def initial_output(ws: WorldState, cfg: EnvConfig) -> StepOutput:
    """Observation bundle for a freshly spawned state (reward 0, no info history)."""
    err, _ = tracking_errors(ws)
    E, T = ws.n_envs, ws.n_targets
    return StepOutput(
        build_observations(ws, cfg), build_global_state(ws, cfg, err), np.zeros(E), np.zeros(E, dtype=bool),
        valid_actions(ws.arud),
        {"track_err": err, "min_dist": min_agent_target_dist(ws), "collision": np.zeros(E, dtype=bool),
         "lost": np.zeros((E, T), dtype=bool), "detected": np.zeros((E, T), dtype=bool),
         "est_x": ws.est_x.copy(), "est_y": ws.est_y.copy()},
    )


class UTrackingEnv:
    """Gym-style single environment: ``reset()`` then ``step(actions)``."""

    def __init__(self, cfg: Optional[EnvConfig] = None, seed: int = 0):
        self.cfg = cfg or EnvConfig()
        self.seed = seed
        self.episode = -1
        self.state: Optional[WorldState] = None

    def reset(self) -> StepOutput:
        self.episode += 1
        self.state = spawn(self.cfg, self.seed, self.episode)
        return _unbatch(initial_output(self.state, self.cfg))

    def step(self, actions) -> StepOutput:
        if self.state is None:
            raise RuntimeError("call reset() first")
        out = advance_world(self.state, np.asarray(actions).reshape(1, -1), self.cfg)
        return _unbatch(out)

    def action_mask(self) -> np.ndarray:
        return valid_actions(self.state.arud[0])


def _unbatch(out: StepOutput) -> StepOutput:
    return StepOutput(out.obs[0], out.global_state[0], float(out.reward[0]), bool(out.done[0]),
                      out.action_mask[0], {k: v[0] for k, v in out.info.items()})


# ---- trajectory export -----------------------------------------------------------------

TRAJ_COLUMNS = ["step", "entity_id", "kind", "x", "y", "z", "heading", "est_x", "est_y",
                "track_err", "reward", "collision"]


class TrajectoryRecorder:
    """Collects per-step rows for one environment of a batch."""

    def __init__(self, env_index: int = 0):
        self.env_index = env_index
        self.rows = []

    def record(self, ws: WorldState, out: Optional[StepOutput] = None):
        e = self.env_index
        s = int(ws.step[e])
        A, T = ws.n_agents, ws.n_targets
        reward = float(out.reward[e]) if out is not None else 0.0
        coll = int(bool(out.info["collision"][e])) if out is not None else 0
        _, per_agent = tracking_errors(ws.select(slice(e, e + 1)))
        for a in range(A):
            self.rows.append([s, a, "agent", ws.ax[e, a], ws.ay[e, a], ws.az[e, a], ws.ah[e, a],
                              "", "", "", reward, coll])
        for t in range(T):
            best = int(np.argmin(per_agent[0, :, t]))
            self.rows.append([s, A + t, "target", ws.tx[e, t], ws.ty[e, t], ws.tz[e, t], ws.th[e, t],
                              ws.est_x[e, best, t], ws.est_y[e, best, t], per_agent[0, best, t], reward, coll])

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJ_COLUMNS)
            for row in self.rows:
                w.writerow([f"{v:.6f}" if isinstance(v, (float, np.floating)) else v for v in row])
