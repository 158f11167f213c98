"""Shared oracles for the test suite."""
import numpy as np

from utrack import env, nets, vecenv


def gae_bruteforce(rewards, values, dones, bootstrap, gamma, lam):
    """Double loop over the definition: A_t = sum_l (gamma*lam)^l delta_{t+l},
    truncated at the first episode end."""
    T = len(rewards)
    v_next = np.append(values[1:], bootstrap)
    delta = [rewards[t] + gamma * v_next[t] * (1.0 - dones[t]) - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        acc, w = 0.0, 1.0
        for k in range(t, T):
            acc += w * delta[k]
            if dones[k]:
                break
            w *= gamma * lam
        adv[t] = acc
    return adv, adv + np.asarray(values)


def _rel_err(a, n, floor=1e-6):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def fd_check(params, loss_fn, analytic, eps=1e-4):
    """Worst elementwise relative error between ``analytic`` gradients and
    central differences of ``loss_fn(params)`` over every parameter entry."""
    worst = 0.0
    for name, arr in params.tensors.items():
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = loss_fn(params)
            flat[i] = old - eps
            lm = loss_fn(params)
            flat[i] = old
            num.reshape(-1)[i] = (lp - lm) / (2 * eps)
        worst = max(worst, float(_rel_err(analytic[name], num).max()))
    return worst


def actor_fd_problem(seed=0, n=4, B=3):
    """A d=8, h=2, 1-block actor in float64 plus a scalar loss over log-probs,
    entropy and the new hidden token."""
    gen = np.random.default_rng(seed)
    p = nets.init_params(13, 8, 2, 1, seed=seed, kind="actor", dtype=np.float64)
    p.tensors["head.W"] *= 50  # lift the near-uniform init so logit gradients are not tiny
    tokens = gen.normal(size=(B, n, 13))
    hidden = gen.normal(size=(B, 8))
    mask = np.ones((B, 5), dtype=bool)
    mask[0, :2] = False
    mask[1, 4] = False
    c_lp = np.where(mask, gen.normal(size=(B, 5)), 0.0)
    c_h = gen.normal(size=(B, 8))

    def loss(params, hidden=hidden):
        dist, zh, _ = nets.actor_forward(params, tokens, hidden, mask)
        lp = np.where(mask, dist.log_probs, 0.0)
        return float(np.sum(c_lp * lp) + np.sum(c_h * zh) + 0.3 * dist.entropy().sum())

    def grads(params):
        dist, _, cache = nets.actor_forward(params, tokens, hidden, mask)
        pr = dist.probs
        lp = np.where(mask, dist.log_probs, 0.0)
        dl = c_lp - pr * c_lp.sum(axis=-1, keepdims=True)
        ent = dist.entropy()[:, None]
        dl = dl + 0.3 * np.where(mask, -pr * (lp + ent), 0.0)
        return nets.backward(params, cache, {"dlogits": dl, "dhidden": c_h})

    return p, loss, grads, hidden


def critic_fd_problem(seed=0, n=5, B=3):
    gen = np.random.default_rng(seed)
    p = nets.init_params(13, 8, 2, 1, seed=seed, kind="critic", dtype=np.float64)
    tokens = gen.normal(size=(B, n, 13))
    c = gen.normal(size=B)

    def loss(params):
        return float(np.sum(c * nets.critic_forward(params, tokens)[0]))

    def grads(params):
        _, cache = nets.critic_forward(params, tokens)
        return nets.backward(params, cache, {"dvalue": c})[0]

    return p, loss, grads


def sequential_reference(cfg, master, n_envs, n_steps, action_seed):
    """Each env stepped alone with explicit respawn on done."""
    gen = np.random.default_rng(action_seed)
    worlds = [env.spawn(cfg, vecenv.env_seed(master, i)) for i in range(n_envs)]
    masks = np.stack([env.valid_actions(w.arud[0]) for w in worlds])
    rewards = []
    for _ in range(n_steps):
        acts = vecenv.random_actions(masks, gen)
        row = []
        for i, w in enumerate(worlds):
            out = env.advance_world(w, acts[i:i + 1, None] if acts.ndim == 1 else acts[i:i + 1], cfg)
            row.append(out.reward[0])
            if out.done[0]:
                worlds[i] = env.spawn(cfg, vecenv.env_seed(master, i), int(w.episode[0]) + 1)
            masks[i] = env.valid_actions(worlds[i].arud[0])
        rewards.append(row)
    return worlds, np.array(rewards)
