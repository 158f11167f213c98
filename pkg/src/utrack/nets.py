"""Entity transformers for the actor and the critic, with analytic gradients.

Both networks embed each entity token, run pre-norm residual blocks
(LayerNorm -> multi-head self-attention -> residual, LayerNorm -> ReLU MLP ->
residual) and finish with a LayerNorm.  No positional encoding is used, so
outputs are equivariant to token order; the heads read order-free summaries:

* actor: a recurrent hidden token is appended to the entity tokens.  Its
  output embedding is both the next hidden state and the input to the policy
  logits.
* critic: the mean of all output embeddings feeds a scalar value head.

Every forward returns a cache; the matching ``*_backward`` accumulates
parameter gradients into a dict and returns the gradient of its recurrent
input where there is one.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

LN_EPS = 1e-5
N_ACTIONS = 5
POLICY_HEAD_SCALE = 0.01
CHECKPOINT_VERSION = 1


@dataclass
class TransformerParams:
    tensors: Dict[str, np.ndarray]
    z: int
    d: int
    heads: int
    blocks: int
    kind: str  # "actor" or "critic"

    @property
    def dtype(self):
        return self.tensors["embed.W"].dtype

    def copy(self) -> "TransformerParams":
        return TransformerParams({k: v.copy() for k, v in self.tensors.items()}, self.z, self.d, self.heads,
                                 self.blocks, self.kind)

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def astype(self, dtype) -> "TransformerParams":
        return TransformerParams({k: v.astype(dtype) for k, v in self.tensors.items()}, self.z, self.d,
                                 self.heads, self.blocks, self.kind)

    def dims(self) -> dict:
        return {"z": self.z, "d": self.d, "heads": self.heads, "blocks": self.blocks, "kind": self.kind}

    def __getitem__(self, k):
        return self.tensors[k]


def init_params(z: int, d: int = 64, h: int = 4, blocks: int = 2, seed: int = 0, kind: str = "actor",
                dtype=np.float32) -> TransformerParams:
    """Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero
    biases; LayerNorm gains 1 and biases 0.  The policy head is further scaled
    by 0.01 so the initial policy is close to uniform; the initial hidden
    token is standard normal."""
    if d % h != 0:
        raise ValueError(f"d={d} is not divisible by h={h}")
    if kind not in ("actor", "critic"):
        raise ValueError("kind must be 'actor' or 'critic'")
    gen = np.random.default_rng(seed)

    def lin(fan_in, fan_out, scale=1.0):
        lim = scale / np.sqrt(fan_in)
        return gen.uniform(-lim, lim, (fan_in, fan_out)), np.zeros(fan_out)

    t: Dict[str, np.ndarray] = {}
    t["embed.W"], t["embed.b"] = lin(z, d)
    for i in range(blocks):
        p = f"blocks.{i}."
        t[p + "ln1.g"], t[p + "ln1.b"] = np.ones(d), np.zeros(d)
        t[p + "qkv.W"], t[p + "qkv.b"] = lin(d, 3 * d)
        t[p + "out.W"], t[p + "out.b"] = lin(d, d)
        t[p + "ln2.g"], t[p + "ln2.b"] = np.ones(d), np.zeros(d)
        t[p + "ff1.W"], t[p + "ff1.b"] = lin(d, 4 * d)
        t[p + "ff2.W"], t[p + "ff2.b"] = lin(4 * d, d)
    t["lnf.g"], t["lnf.b"] = np.ones(d), np.zeros(d)
    if kind == "actor":
        t["head.W"], t["head.b"] = lin(d, N_ACTIONS, POLICY_HEAD_SCALE)
        t["h0"] = gen.standard_normal(d)
    else:
        t["head.W"], t["head.b"] = lin(d, 1)
    return TransformerParams({k: v.astype(dtype) for k, v in t.items()}, z, d, h, blocks, kind)


# ---- primitives -------------------------------------------------------------------

def _linear(x, W, b):
    # 2-D matmuls are markedly faster than stacked ones for these small shapes
    y = x.reshape(-1, x.shape[-1]) @ W
    y += b
    return y.reshape(x.shape[:-1] + (W.shape[1],))


def _linear_back(dy, x, W, grads, name):
    d2 = dy.reshape(-1, dy.shape[-1])
    grads[name + ".W"] += x.reshape(-1, x.shape[-1]).T @ d2
    grads[name + ".b"] += d2.sum(axis=0)
    return (d2 @ W.T).reshape(dy.shape[:-1] + (W.shape[0],))


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_back(dy, cache, g, grads, name):
    xhat, rstd = cache
    grads[name + ".g"] += (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    grads[name + ".b"] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxh = dy * g
    return rstd * (dxh - dxh.mean(axis=-1, keepdims=True) - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, h):
    B, m, d = x.shape
    return x.reshape(B, m, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, m, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, m, h * dh)


# ---- encoder -------------------------------------------------------------------------

def encode(params: TransformerParams, tokens, extra=None):
    """Run the shared trunk on ``tokens`` (B, n, z) with an optional extra
    (B, d) token appended last.  Returns ``(out (B, m, d), cache)``."""
    P = params.tensors
    dt = params.dtype
    x = np.asarray(tokens, dtype=dt)
    if x.ndim != 3 or x.shape[-1] != params.z:
        raise ValueError(f"tokens must be (B, n, {params.z}), got {x.shape}")
    e = _linear(x, P["embed.W"], P["embed.b"])
    H = e if extra is None else np.concatenate([e, np.asarray(extra, dtype=dt)[:, None, :]], axis=1)
    h = params.heads
    dh = params.d // h
    scale = dt.type(1.0 / np.sqrt(dh))
    cache = {"x": x, "extra": extra is not None, "blocks": []}
    for i in range(params.blocks):
        p = f"blocks.{i}."
        c = {}
        u, c["ln1"] = layer_norm(H, P[p + "ln1.g"], P[p + "ln1.b"])
        c["u"] = u
        qkv = _linear(u, P[p + "qkv.W"], P[p + "qkv.b"])
        q, k, v = (_split_heads(t, h) for t in np.split(qkv, 3, axis=-1))
        att = _softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        o = _merge_heads(att @ v)
        c.update(q=q, k=k, v=v, att=att, o=o)
        H = H + _linear(o, P[p + "out.W"], P[p + "out.b"])
        u2, c["ln2"] = layer_norm(H, P[p + "ln2.g"], P[p + "ln2.b"])
        f1 = _linear(u2, P[p + "ff1.W"], P[p + "ff1.b"])
        r = np.maximum(f1, 0)
        c.update(u2=u2, f1=f1, r=r)
        H = H + _linear(r, P[p + "ff2.W"], P[p + "ff2.b"])
        cache["blocks"].append(c)
    out, cache["lnf"] = layer_norm(H, P["lnf.g"], P["lnf.b"])
    return out, cache


def encode_backward(params: TransformerParams, dout, cache, grads):
    """Accumulate trunk gradients; returns the gradient of the extra token (or None)."""
    P = params.tensors
    h = params.heads
    dh = params.d // h
    scale = params.dtype.type(1.0 / np.sqrt(dh))
    dH = _layer_norm_back(dout, cache["lnf"], P["lnf.g"], grads, "lnf")
    for i in reversed(range(params.blocks)):
        p = f"blocks.{i}."
        c = cache["blocks"][i]
        dr = _linear_back(dH, c["r"], P[p + "ff2.W"], grads, p + "ff2")
        df1 = dr * (c["f1"] > 0)
        du2 = _linear_back(df1, c["u2"], P[p + "ff1.W"], grads, p + "ff1")
        dH = dH + _layer_norm_back(du2, c["ln2"], P[p + "ln2.g"], grads, p + "ln2")
        do = _linear_back(dH, c["o"], P[p + "out.W"], grads, p + "out")
        do = _split_heads(do, h)
        att, q, k, v = c["att"], c["q"], c["k"], c["v"]
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1)
        du = _linear_back(dqkv, c["u"], P[p + "qkv.W"], grads, p + "qkv")
        dH = dH + _layer_norm_back(du, c["ln1"], P[p + "ln1.g"], grads, p + "ln1")
    dextra = None
    if cache["extra"]:
        dextra = dH[:, -1, :]
        dH = dH[:, :-1, :]
    _linear_back(dH, cache["x"], P["embed.W"], grads, "embed")
    return dextra


# ---- heads ---------------------------------------------------------------------------------

@dataclass
class ActionDist:
    """Masked categorical over the 5 rudder actions."""

    logits: np.ndarray  # masked entries are -inf
    mask: np.ndarray

    @property
    def log_probs(self) -> np.ndarray:
        lg = self.logits
        m = np.max(lg, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore"):
            z = lg - m
        lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
        return np.where(self.mask, z - lse, -np.inf)

    @property
    def probs(self) -> np.ndarray:
        return np.where(self.mask, np.exp(np.where(self.mask, self.log_probs, 0.0)), 0.0)

    def log_prob(self, actions) -> np.ndarray:
        a = np.asarray(actions)
        return np.take_along_axis(self.log_probs, a[..., None], axis=-1)[..., 0]

    def entropy(self) -> np.ndarray:
        p = self.probs
        return -np.sum(np.where(self.mask, p * np.where(self.mask, self.log_probs, 0.0), 0.0), axis=-1)

    def sample(self, u) -> np.ndarray:
        """Inverse-CDF sampling from uniforms ``u`` shaped like the batch."""
        c = np.cumsum(self.probs.astype(np.float64), axis=-1)
        c[..., -1] = np.inf
        a = np.argmax(c > np.asarray(u)[..., None], axis=-1)
        return _first_legal(a, self.mask)

    def mode(self) -> np.ndarray:
        return np.argmax(np.where(self.mask, self.logits, -np.inf), axis=-1)


def _first_legal(a, mask):
    # guards against a zero-probability pick from rounding in the cumulative sum
    legal = np.take_along_axis(mask, a[..., None], axis=-1)[..., 0]
    if legal.all():
        return a
    fallback = np.argmax(mask, axis=-1)
    return np.where(legal, a, fallback)


def actor_forward(params: TransformerParams, tokens, hidden, action_mask):
    """Policy over the 5 actions for a batch of agents.

    ``tokens`` (B, n, z), ``hidden`` (B, d), ``action_mask`` (B, 5) bool.
    Returns ``(dist, new_hidden, cache)``.
    """
    mask = np.asarray(action_mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("every action mask needs at least one legal action")
    out, cache = encode(params, tokens, hidden)
    zh = out[:, -1, :]
    logits = _linear(zh, params["head.W"], params["head.b"])
    masked = np.where(mask, logits, -np.inf)
    cache.update(out_shape=out.shape, zh=zh, mask=mask)
    return ActionDist(masked, mask), zh, cache


def actor_backward(params: TransformerParams, cache, dlogits, dnew_hidden, grads):
    """``dlogits`` (B, 5) and ``dnew_hidden`` (B, d) (either may be None).

    Gradients of masked logits are dropped.  Returns the gradient of the
    input hidden state.
    """
    dt = params.dtype
    dz = np.zeros((cache["out_shape"][0], params.d), dtype=dt)
    if dlogits is not None:
        dl = np.where(cache["mask"], dlogits, 0).astype(dt)
        dz = dz + _linear_back(dl, cache["zh"], params["head.W"], grads, "head")
    if dnew_hidden is not None:
        dz = dz + dnew_hidden.astype(dt)
    dout = np.zeros(cache["out_shape"], dtype=dt)
    dout[:, -1, :] = dz
    return encode_backward(params, dout, cache, grads)


def critic_forward(params: TransformerParams, tokens):
    """Value for each token set: ``tokens`` (B, n, z) -> ``(values (B,), cache)``."""
    out, cache = encode(params, tokens)
    pooled = out.mean(axis=1)
    v = _linear(pooled, params["head.W"], params["head.b"])[:, 0]
    cache.update(out_shape=out.shape, pooled=pooled)
    return v, cache


def critic_backward(params: TransformerParams, cache, dvalue, grads):
    dt = params.dtype
    dv = np.asarray(dvalue, dtype=dt)[:, None]
    dpooled = _linear_back(dv, cache["pooled"], params["head.W"], grads, "head")
    n = cache["out_shape"][1]
    dout = np.broadcast_to((dpooled / dt.type(n))[:, None, :], cache["out_shape"]).copy()
    encode_backward(params, dout, cache, grads)


def backward(params: TransformerParams, cache, upstream: dict):
    """Dispatch on network kind.  ``upstream`` holds ``dlogits``/``dhidden``
    (actor) or ``dvalue`` (critic).  Returns ``(grads, dhidden_in)``."""
    grads = params.zeros_like()
    if params.kind == "actor":
        dh = actor_backward(params, cache, upstream.get("dlogits"), upstream.get("dhidden"), grads)
        return grads, dh
    critic_backward(params, cache, upstream["dvalue"], grads)
    return grads, None


# ---- checkpoints ----------------------------------------------------------------------------

def save_checkpoint(path, nets: Dict[str, TransformerParams], extra_tensors: Optional[Dict[str, np.ndarray]] = None,
                    meta: Optional[dict] = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f32 blob).

    Returns the manifest path.  ``nets`` maps a prefix ("actor", "critic") to
    parameters; ``extra_tensors`` (e.g. optimiser moments) are stored alongside.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    items = [(f"{pre}/{k}", v) for pre, p in nets.items() for k, v in p.tensors.items()]
    items += sorted((extra_tensors or {}).items())
    for name, arr in items:
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.nbytes
    blob = b"".join(chunks)
    bin_path = path.with_suffix(".bin")
    bin_path.write_bytes(blob)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "dtype": "float32-le",
        "blob": bin_path.name,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "nets": {pre: p.dims() for pre, p in nets.items()},
        "tensors": entries,
        "meta": meta or {},
    }
    man_path = path.with_suffix(".json")
    man_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return man_path


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, expect: Optional[Dict[str, dict]] = None):
    """Read a checkpoint; returns ``(nets, extra_tensors, manifest)``.

    ``expect`` maps net prefix -> dims dict to validate against.
    """
    man_path = Path(path).with_suffix(".json")
    try:
        manifest = json.loads(man_path.read_text())
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint manifest not found: {man_path}") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')} in {man_path}")
    blob = (man_path.parent / manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"checkpoint blob hash mismatch for {man_path}")
    tensors = {}
    for e in manifest["tensors"]:
        a = np.frombuffer(blob, dtype="<f4", count=e["count"], offset=e["offset"])
        tensors[e["name"]] = a.reshape(e["shape"]).astype(np.float32)
    nets = {}
    for pre, dims in manifest["nets"].items():
        if expect and pre in expect:
            want = expect[pre]
            bad = {k: (dims.get(k), v) for k, v in want.items() if dims.get(k) != v}
            if bad:
                raise CheckpointError(f"{pre} dims mismatch (checkpoint, expected): {bad}")
        t = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith(pre + "/")}
        nets[pre] = TransformerParams(t, dims["z"], dims["d"], dims["heads"], dims["blocks"], dims["kind"])
    extra = {k: v for k, v in tensors.items() if k.split("/", 1)[0] not in manifest["nets"]}
    return nets, extra, manifest
