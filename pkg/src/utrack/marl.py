"""Multi-agent PPO with a shared recurrent actor and a centralized critic.

Rollouts are collected from a ``VecEnv``; every agent's tokens go through the
same actor parameters, the critic scores the true global state once per env
step, and the shared team reward gives one advantage per env step that is
applied to every agent's policy term.  Minibatches are whole environment
sequences so the actor is trained with backpropagation through the full
rollout segment, restarting from the learned initial hidden token at episode
boundaries.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import nets, rng
from .env import N_FEATURES, EnvConfig, WorldState, _array_fields, initial_output
from .vecenv import BatchState, VecEnv

log = logging.getLogger(__name__)

_P_ACTION = 200
_P_SHUFFLE = 201


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    epochs: int = 4
    minibatches: int = 4
    rollout_len: int = 128
    n_envs: int = 64
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    total_timesteps: int = 2_000_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    seed: int = 0
    n_workers: int = 1
    checkpoint_every: int = 10
    eval_every: int = 0
    eval_episodes: int = 20

    def __post_init__(self):
        self.validate()

    def validate(self):
        problems = []
        if not 0.0 <= self.gamma < 1.0:
            problems.append("gamma must lie in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            problems.append("lam must lie in [0, 1]")
        if self.clip <= 0:
            problems.append("clip must be > 0")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if self.epochs < 1 or self.minibatches < 1:
            problems.append("epochs and minibatches must be >= 1")
        if self.rollout_len < 1 or self.n_envs < 1:
            problems.append("rollout_len and n_envs must be >= 1")
        if self.minibatches > self.n_envs:
            problems.append("minibatches must not exceed n_envs (minibatches are whole env sequences)")
        if self.max_grad_norm <= 0:
            problems.append("max_grad_norm must be > 0")
        if self.d_model % self.n_heads:
            problems.append("d_model must be divisible by n_heads")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    @property
    def steps_per_update(self) -> int:
        return self.rollout_len * self.n_envs

    @property
    def n_updates(self) -> int:
        return max(1, -(-self.total_timesteps // self.steps_per_update))

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RolloutBatch:
    """Time-major rollout segment.  Agent-level arrays are (T, E, A, ...)."""

    obs: np.ndarray          # (T, E, A, n, z) float32
    masks: np.ndarray        # (T, E, A, 5) bool
    actions: np.ndarray      # (T, E, A) int64
    logp: np.ndarray         # (T, E, A) behaviour log-probs
    gstate: np.ndarray       # (T, E, n, z) float32
    values: np.ndarray       # (T, E)
    rewards: np.ndarray      # (T, E)
    dones: np.ndarray        # (T, E) bool
    h_init: np.ndarray       # (E, A, d) hidden entering step 0
    fresh0: np.ndarray       # (E,) bool: step 0 starts an episode (hidden = learned h0)
    bootstrap: np.ndarray    # (E,) value after the last step
    stats: Dict[str, float] = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_envs(self) -> int:
        return self.rewards.shape[1]

    def select_envs(self, idx) -> "RolloutBatch":
        return RolloutBatch(self.obs[:, idx], self.masks[:, idx], self.actions[:, idx], self.logp[:, idx],
                            self.gstate[:, idx], self.values[:, idx], self.rewards[:, idx], self.dones[:, idx],
                            self.h_init[idx], self.fresh0[idx], self.bootstrap[idx])


# ---- advantages --------------------------------------------------------------------

def compute_gae(rewards, values, dones, bootstrap, gamma: float, lam: float):
    """GAE(lambda) over a time-major segment; returns ``(advantages, returns)``.

    ``delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t`` and
    ``A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}``; ``V_T`` is the
    bootstrap value.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    nd = 1.0 - np.asarray(dones, dtype=np.float64)
    if not (r.shape == v.shape == nd.shape):
        raise ValueError(f"shape mismatch: rewards {r.shape}, values {v.shape}, dones {nd.shape}")
    nxt = np.asarray(bootstrap, dtype=np.float64)
    adv = np.zeros_like(r)
    last = np.zeros_like(nxt)
    for t in range(r.shape[0] - 1, -1, -1):
        delta = r[t] + gamma * nxt * nd[t] - v[t]
        last = delta + gamma * lam * nd[t] * last
        adv[t] = last
        nxt = v[t]
    return adv, adv + v


# ---- optimiser ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: nets.TransformerParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: nets.TransformerParams, grads: Dict[str, np.ndarray], st: AdamState, cfg: TrainConfig):
    """In-place Adam update with bias correction:
    ``p -= lr * m_hat / (sqrt(v_hat) + eps)``, ``m_hat = m / (1 - b1^t)``,
    ``v_hat = v / (1 - b2^t)``."""
    st.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** st.t
    c2 = 1.0 - b2 ** st.t
    for k, p in params.tensors.items():
        g = grads[k]
        m = st.m[k]
        v = st.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if cfg.lr == 0:
            continue
        p -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_grads(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    n = global_norm(grads)
    if n > max_norm:
        s = max_norm / (n + 1e-12)
        for g in grads.values():
            g *= g.dtype.type(s)
    return n


# ---- actor over a sequence --------------------------------------------------------------

def _flat_agents(x):
    return x.reshape((x.shape[0] * x.shape[1],) + x.shape[2:])


def initial_hidden(actor: nets.TransformerParams, n_envs: int, n_agents: int) -> np.ndarray:
    return np.broadcast_to(actor["h0"], (n_envs, n_agents, actor.d)).copy()


def actor_sequence(actor: nets.TransformerParams, mb: RolloutBatch, keep_cache: bool = True):
    """Replay the actor over a minibatch segment.  Returns per-step
    ``(dists, caches)`` where every step's batch is the flattened (E*A)."""
    T, E, A = mb.actions.shape
    h = np.where(mb.fresh0[:, None, None], actor["h0"], mb.h_init).astype(actor.dtype)
    h = _flat_agents(h)
    reset = np.repeat(mb.dones, A, axis=1)  # (T, E*A)
    dists, caches = [], []
    for t in range(T):
        dist, hn, cache = nets.actor_forward(actor, _flat_agents(mb.obs[t]), h, _flat_agents(mb.masks[t]))
        dists.append(dist)
        caches.append(cache if keep_cache else None)
        h = np.where(reset[t][:, None], actor["h0"], hn)
    return dists, caches


def _dlogp_dlogits(dist: nets.ActionDist, actions):
    p = dist.probs
    oh = np.zeros_like(p)
    np.put_along_axis(oh, actions[:, None], 1.0, axis=-1)
    return oh - p


def _dentropy_dlogits(dist: nets.ActionDist):
    p = dist.probs
    lp = np.where(dist.mask, dist.log_probs, 0.0)
    H = -(p * lp).sum(axis=-1, keepdims=True)
    return -p * (lp + H)


# ---- loss --------------------------------------------------------------------------------

def ppo_loss_and_grads(actor: nets.TransformerParams, critic: nets.TransformerParams, mb: RolloutBatch,
                       adv: np.ndarray, ret: np.ndarray, cfg: TrainConfig, with_grads: bool = True):
    """Clipped-surrogate loss on one minibatch of whole env sequences.

    ``adv``/``ret`` are (T, E) for the minibatch; advantages are normalised
    here (mean 0, std 1 over the minibatch).  Returns
    ``(loss, stats, actor_grads, critic_grads)``.
    """
    T, E, A = mb.actions.shape
    a_norm = (adv - adv.mean()) / (adv.std() + 1e-8)
    adv_ag = np.repeat(a_norm[:, :, None], A, axis=2).reshape(T, E * A)
    dists, caches = actor_sequence(actor, mb, keep_cache=with_grads)
    acts = mb.actions.reshape(T, E * A)
    old = mb.logp.reshape(T, E * A)
    N = T * E * A
    lo, hi = 1.0 - cfg.clip, 1.0 + cfg.clip

    logp = np.stack([d.log_prob(acts[t]) for t, d in enumerate(dists)]).astype(np.float64)
    ent = np.stack([d.entropy() for d in dists]).astype(np.float64)
    ratio = np.exp(logp - old)
    surr1 = ratio * adv_ag
    surr2 = np.clip(ratio, lo, hi) * adv_ag
    actor_term = -np.mean(np.minimum(surr1, surr2))
    entropy = float(ent.mean())

    v, vcache = nets.critic_forward(critic, mb.gstate.reshape((T * E,) + mb.gstate.shape[2:]))
    v = v.astype(np.float64)
    verr = v - ret.reshape(-1)
    value_term = cfg.vf_coef * float(np.mean(verr * verr))
    loss = float(actor_term + value_term - cfg.ent_coef * entropy)
    stats = {
        "loss": loss,
        "policy_loss": float(actor_term),
        "value_loss": float(np.mean(verr * verr)),
        "entropy": entropy,
        "approx_kl": float(np.mean((ratio - 1.0) - (logp - old))),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
    }
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite PPO loss: policy {actor_term}, value {value_term}, entropy {entropy}, "
            f"max |logp - old| {np.nanmax(np.abs(logp - old))}")
    if not with_grads:
        return loss, stats, None, None

    # d(actor_term)/d(logp): the min picks the unclipped branch unless the ratio
    # sits outside the trust region on the side the advantage pushes toward
    clipped = ((adv_ag > 0) & (ratio > hi)) | ((adv_ag < 0) & (ratio < lo))
    dlogp = np.where(clipped, 0.0, -adv_ag * ratio / N)
    dent = -cfg.ent_coef / N
    ga = actor.zeros_like()
    reset = np.repeat(mb.dones, A, axis=1)
    dh_next = np.zeros((E * A, actor.d), dtype=actor.dtype)
    for t in range(T - 1, -1, -1):
        d = dists[t]
        dl = dlogp[t][:, None] * _dlogp_dlogits(d, acts[t]) + dent * _dentropy_dlogits(d)
        r = reset[t][:, None]
        ga["h0"] += np.where(r, dh_next, 0).sum(axis=0)
        dh_next = nets.actor_backward(actor, caches[t], dl, np.where(r, 0, dh_next), ga)
    fresh = np.repeat(mb.fresh0, A)
    ga["h0"] += dh_next[fresh].sum(axis=0)

    gc = critic.zeros_like()
    nets.critic_backward(critic, vcache, 2.0 * cfg.vf_coef * verr / verr.size, gc)
    return loss, stats, ga, gc


def ppo_loss(actor, critic, mb: RolloutBatch, adv, ret, cfg: TrainConfig):
    """Scalar loss and diagnostics (clip fraction, approximate KL, entropy)."""
    loss, stats, _, _ = ppo_loss_and_grads(actor, critic, mb, adv, ret, cfg, with_grads=False)
    return loss, stats


@dataclass
class Learner:
    actor: nets.TransformerParams
    critic: nets.TransformerParams
    opt_actor: AdamState
    opt_critic: AdamState

    @classmethod
    def fresh(cls, actor, critic) -> "Learner":
        return cls(actor, critic, AdamState.zeros(actor), AdamState.zeros(critic))


def update(learner: Learner, batch: RolloutBatch, cfg: TrainConfig, update_index: int = 0) -> Dict[str, float]:
    """``epochs`` passes of ``minibatches`` whole-env-sequence minibatches.

    The actor and the critic each have their own Adam state and their own
    gradient-norm clip.  Steps with non-finite gradients are skipped and
    counted.
    """
    adv, ret = compute_gae(batch.rewards, batch.values, batch.dones, batch.bootstrap, cfg.gamma, cfg.lam)
    E = batch.n_envs
    key = rng.derive(rng.seed_key(cfg.seed), _P_SHUFFLE)
    acc: Dict[str, List[float]] = {}
    skipped = 0
    for epoch in range(cfg.epochs):
        u = rng.uniform(key, update_index * cfg.epochs + epoch, _P_SHUFFLE, (E,))
        perm = np.argsort(u, kind="stable")
        for idx in np.array_split(perm, cfg.minibatches):
            idx = np.sort(idx)
            mb = batch.select_envs(idx)
            try:
                _, stats, ga, gc = ppo_loss_and_grads(learner.actor, learner.critic, mb, adv[:, idx], ret[:, idx],
                                                      cfg)
            except FloatingPointError as exc:
                log.warning("skipping minibatch: %s", exc)
                skipped += 1
                continue
            stats["grad_norm_actor"] = clip_grads(ga, cfg.max_grad_norm)
            stats["grad_norm_critic"] = clip_grads(gc, cfg.max_grad_norm)
            if not (np.isfinite(stats["grad_norm_actor"]) and np.isfinite(stats["grad_norm_critic"])):
                log.warning("skipping step with non-finite gradients (epoch %d)", epoch)
                skipped += 1
                continue
            adam_step(learner.actor, ga, learner.opt_actor, cfg)
            adam_step(learner.critic, gc, learner.opt_critic, cfg)
            for k, v in stats.items():
                acc.setdefault(k, []).append(v)
    out = {k: float(np.mean(v)) for k, v in acc.items()}
    out["skipped_steps"] = skipped
    return out


# ---- rollouts ----------------------------------------------------------------------------

@dataclass
class RolloutState:
    """Everything carried between rollouts besides the parameters."""

    venv: VecEnv
    hidden: np.ndarray          # (E, A, d)
    ep_return: np.ndarray       # (E,)
    counter: int = 0            # rollout steps taken so far (keys action sampling)


def _action_key(seed: int):
    return rng.derive(rng.seed_key(seed), _P_ACTION)


def sample_actions(dist: nets.ActionDist, key, counter: int, shape) -> np.ndarray:
    u = rng.uniform(key, counter, _P_ACTION, (int(np.prod(shape)),))
    return dist.sample(u).reshape(shape)


def collect_rollout(rs: RolloutState, actor: nets.TransformerParams, critic: nets.TransformerParams, T: int,
                    seed: int) -> RolloutBatch:
    """Step every environment ``T`` times with actions sampled from the actor.

    Hidden states are reset to the learned initial token after a done.
    """
    venv = rs.venv
    E, A = venv.n_envs, venv.cfg.n_agents
    last = venv.state.last
    n = last.obs.shape[2]
    dt = actor.dtype
    obs = np.zeros((T, E, A, n, N_FEATURES), dtype=dt)
    masks = np.zeros((T, E, A, 5), dtype=bool)
    actions = np.zeros((T, E, A), dtype=np.int64)
    logp = np.zeros((T, E, A))
    gstate = np.zeros((T, E, n, N_FEATURES), dtype=dt)
    values = np.zeros((T, E))
    rewards = np.zeros((T, E))
    dones = np.zeros((T, E), dtype=bool)
    h_init = rs.hidden.copy()
    fresh0 = venv.world.step == 0
    key = _action_key(seed)
    ep_returns, err_sum, err_n, collisions, lost = [], 0.0, 0, 0, 0
    mind_sum = 0.0
    for t in range(T):
        obs[t] = last.obs
        masks[t] = last.action_mask
        gstate[t] = last.global_state
        h = np.where(venv.world.step[:, None, None] == 0, actor["h0"], rs.hidden)
        dist, hn, _ = nets.actor_forward(actor, _flat_agents(obs[t]), _flat_agents(h), _flat_agents(masks[t]))
        a = sample_actions(dist, key, rs.counter, (E, A))
        logp[t] = dist.log_prob(a.reshape(-1)).reshape(E, A)
        values[t] = nets.critic_forward(critic, gstate[t])[0]
        actions[t] = a
        out = venv.step(a)
        rs.counter += 1
        rewards[t] = out.reward
        dones[t] = out.done
        rs.ep_return += out.reward
        rs.hidden = np.where(out.done[:, None, None], actor["h0"], hn.reshape(E, A, -1))
        err_sum += float(out.info["track_err"].sum())
        err_n += out.info["track_err"].size
        mind_sum += float(out.info["min_dist"].mean())
        collisions += int(out.info["collision"].sum())
        lost += int(out.info["lost"].any(axis=1).sum())
        for e in np.flatnonzero(out.done):
            ep_returns.append(float(rs.ep_return[e]))
            rs.ep_return[e] = 0.0
        last = out
    bootstrap = nets.critic_forward(critic, last.global_state.astype(dt))[0].astype(np.float64)
    stats = {
        "mean_return": float(np.mean(ep_returns)) if ep_returns else None,
        "episodes": len(ep_returns),
        "mean_reward": float(rewards.mean()),
        "mean_track_err": err_sum / max(err_n, 1),
        "mean_min_dist": mind_sum / T,
        "collision_steps": collisions,
        "lost_steps": lost,
    }
    return RolloutBatch(obs, masks, actions, logp, gstate, values, rewards, dones, h_init, fresh0, bootstrap, stats)


# ---- evaluation ----------------------------------------------------------------------------

EVAL_KEYS = ("distance_mean", "distance_std", "track_err_mean", "track_err_std", "collision_pct", "loss_pct")


def evaluate_policy(actor: nets.TransformerParams, env_cfg: EnvConfig, n_episodes: int, seed: int = 12345,
                    greedy: bool = True, recorder: Optional[Callable] = None) -> Dict[str, float]:
    """Run ``n_episodes`` full episodes with the actor and report summary
    metrics (see ``episode_metrics``).  Greedy means argmax actions."""
    E, A = n_episodes, env_cfg.n_agents
    state = {"h": initial_hidden(actor, max(E, 1), A)}
    key = _action_key(seed)

    def policy(out, world, t):
        dist, hn, _ = nets.actor_forward(actor, _flat_agents(out.obs), _flat_agents(state["h"]),
                                         _flat_agents(out.action_mask))
        a = dist.mode() if greedy else sample_actions(dist, key, t, (E * A,))
        state["h"] = hn.reshape(E, A, -1)
        return a.reshape(E, A)

    return episode_metrics(policy, env_cfg, n_episodes, seed, recorder)


def episode_metrics(policy: Callable, env_cfg: EnvConfig, n_episodes: int, seed: int = 12345,
                    recorder: Optional[Callable] = None) -> Dict[str, float]:
    """Run one batch of ``n_episodes`` episodes under ``policy(out, world, t)``.

    Distance (closest agent to each target) and tracking error are averaged
    over steps, targets and episodes; the std is across per-episode means (0
    for one episode).  Collision and loss are the percentages of episodes with
    at least one crash / one lost target.  ``recorder(world, out)`` is called
    at the start and after every step if given.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    E = n_episodes
    dist_ep = np.zeros(E)
    err_ep = np.zeros(E)
    crashed = np.zeros(E, dtype=bool)
    lost = np.zeros(E, dtype=bool)
    with VecEnv(env_cfg, E, seed=seed, auto_reset=False) as venv:
        last = venv.state.last
        if recorder is not None:
            recorder(venv.world, None)
        for t in range(env_cfg.horizon):
            last = venv.step(policy(last, venv.world, t))
            dist_ep += last.info["min_dist"].mean(axis=1)
            err_ep += last.info["track_err"].mean(axis=1)
            crashed |= last.info["collision"]
            lost |= last.info["lost"].any(axis=1)
            if recorder is not None:
                recorder(venv.world, last)
    dist_ep /= env_cfg.horizon
    err_ep /= env_cfg.horizon
    return {
        "distance_mean": float(dist_ep.mean()),
        "distance_std": float(dist_ep.std()),
        "track_err_mean": float(err_ep.mean()),
        "track_err_std": float(err_ep.std()),
        "collision_pct": 100.0 * float(crashed.mean()),
        "loss_pct": 100.0 * float(lost.mean()),
    }


# ---- checkpoints with optimiser + environment state ---------------------------------------------

def _opt_tensors(prefix: str, st: AdamState) -> Dict[str, np.ndarray]:
    out = {f"{prefix}.m/{k}": v for k, v in st.m.items()}
    out.update({f"{prefix}.v/{k}": v for k, v in st.v.items()})
    return out


def _opt_from(prefix: str, tensors: Dict[str, np.ndarray], t: int) -> AdamState:
    m = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith(prefix + ".m/")}
    v = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith(prefix + ".v/")}
    return AdamState(m, v, t)


def save_learner(path, learner: Learner, meta: dict) -> Path:
    extra = _opt_tensors("opt_actor", learner.opt_actor)
    extra.update(_opt_tensors("opt_critic", learner.opt_critic))
    meta = dict(meta, adam_t_actor=learner.opt_actor.t, adam_t_critic=learner.opt_critic.t)
    return nets.save_checkpoint(path, {"actor": learner.actor, "critic": learner.critic}, extra, meta)


def load_learner(path, expect: Optional[dict] = None) -> Tuple[Learner, dict]:
    loaded, extra, manifest = nets.load_checkpoint(path, expect)
    if "actor" not in loaded or "critic" not in loaded:
        raise nets.CheckpointError(f"checkpoint {path} lacks actor/critic parameters")
    meta = manifest["meta"]
    learner = Learner(loaded["actor"], loaded["critic"],
                      _opt_from("opt_actor", extra, int(meta.get("adam_t_actor", 0))),
                      _opt_from("opt_critic", extra, int(meta.get("adam_t_critic", 0))))
    if not learner.opt_actor.m:
        learner.opt_actor = AdamState.zeros(learner.actor)
    if not learner.opt_critic.m:
        learner.opt_critic = AdamState.zeros(learner.critic)
    return learner, manifest


def save_rollout_state(path, rs: RolloutState) -> Path:
    path = Path(path).with_suffix(".state.npz")
    arrays = {f"world/{n}": getattr(rs.venv.world, n) for n in _array_fields(WorldState)}
    arrays.update(hidden=rs.hidden, ep_return=rs.ep_return, counter=np.array(rs.counter))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_rollout_state(path, env_cfg: EnvConfig, n_workers: int = 1) -> RolloutState:
    path = Path(path).with_suffix(".state.npz")
    with np.load(path) as z:
        world = WorldState(**{n: z[f"world/{n}"] for n in _array_fields(WorldState)})
        hidden, ep_return, counter = z["hidden"], z["ep_return"], int(z["counter"])
    venv = VecEnv(env_cfg, 1, seed=0, n_workers=n_workers)
    venv.state = BatchState(world, initial_output(world, env_cfg))
    return RolloutState(venv, hidden, ep_return, counter)


# ---- the loop ----------------------------------------------------------------------------------

@dataclass
class TrainResult:
    learner: Learner
    metrics: List[dict]
    checkpoint: Optional[Path]


def init_learner(cfg: TrainConfig, seed: Optional[int] = None, z: int = N_FEATURES) -> Learner:
    s = cfg.seed if seed is None else seed
    actor = nets.init_params(z, cfg.d_model, cfg.n_heads, cfg.n_blocks, seed=[s, 1], kind="actor")
    critic = nets.init_params(z, cfg.d_model, cfg.n_heads, cfg.n_blocks, seed=[s, 2], kind="critic")
    return Learner.fresh(actor, critic)


def train(env_cfg: EnvConfig, cfg: TrainConfig, learner: Optional[Learner] = None, out_dir=None,
          resume=None, tag: Optional[str] = None, on_update: Optional[Callable[[dict], None]] = None
          ) -> TrainResult:
    """Alternate rollouts and updates until ``total_timesteps`` env steps.

    With ``out_dir`` the loop appends one JSON line per update to
    ``metrics.jsonl``, writes ``checkpoints/latest`` every
    ``checkpoint_every`` updates (parameters, optimiser and environment
    state, so a run resumes bit-exactly) and ``checkpoints/final`` at the
    end.  On an exception an ``abort`` checkpoint is written first.
    ``resume`` names a checkpoint written by this function.
    """
    out = Path(out_dir) if out_dir is not None else None
    start = 0
    if resume is not None:
        learner, manifest = load_learner(resume)
        rs = load_rollout_state(resume, env_cfg, cfg.n_workers)
        start = int(manifest["meta"]["updates"])
    else:
        learner = learner or init_learner(cfg)
        venv = VecEnv(env_cfg, cfg.n_envs, seed=cfg.seed, n_workers=cfg.n_workers)
        rs = RolloutState(venv, initial_hidden(learner.actor, cfg.n_envs, env_cfg.n_agents), np.zeros(cfg.n_envs))
    if rs.venv.n_envs != cfg.n_envs:
        raise ValueError(f"resume state has {rs.venv.n_envs} envs, config asks for {cfg.n_envs}")
    metrics: List[dict] = []
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        mpath = out / "metrics.jsonl"
        if resume is None:
            mpath.write_text("")

    def meta(k):
        return {"updates": k, "timesteps": k * cfg.steps_per_update, "tag": tag,
                "train": cfg.to_dict(), "env": env_cfg.to_dict()}

    def checkpoint(name, k):
        p = save_learner(out / "checkpoints" / name, learner, meta(k))
        save_rollout_state(p, rs)
        return p

    k = start
    ckpt = None
    try:
        for k in range(start + 1, cfg.n_updates + 1):
            t0 = time.perf_counter()
            batch = collect_rollout(rs, learner.actor, learner.critic, cfg.rollout_len, cfg.seed)
            t1 = time.perf_counter()
            st = update(learner, batch, cfg, update_index=k)
            t2 = time.perf_counter()
            row = {"update": k, "timesteps": k * cfg.steps_per_update}
            if tag is not None:
                row["stage"] = tag
            row.update(batch.stats)
            row.update(st)
            row["sps"] = cfg.steps_per_update / max(t1 - t0, 1e-9)
            row["update_s"] = t2 - t1
            if cfg.eval_every and k % cfg.eval_every == 0:
                ev = evaluate_policy(learner.actor, env_cfg, cfg.eval_episodes, seed=cfg.seed + 7919)
                row.update({"eval_" + kk: vv for kk, vv in ev.items()})
            metrics.append(row)
            if out is not None:
                with open(mpath, "a") as fh:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
                if cfg.checkpoint_every and k % cfg.checkpoint_every == 0:
                    checkpoint("latest", k)
            if on_update is not None:
                on_update(row)
            log.info("update %d/%d return %s err %.1f", k, cfg.n_updates, row["mean_return"],
                     row["mean_track_err"])
        if out is not None:
            ckpt = checkpoint("final", k)
    except BaseException:
        if out is not None:
            checkpoint("abort", k - 1 if k > start else start)
        raise
    finally:
        rs.venv.close()
    return TrainResult(learner, metrics, ckpt)


def checkpoint_hash(path) -> str:
    """Content hash of a checkpoint's tensor blob."""
    return json.loads(Path(path).with_suffix(".json").read_text())["sha256"]
