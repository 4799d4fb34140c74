"""From-scratch decoder-only transformer in float64 numpy with exact backprop.

Pre-layer-norm blocks, learned positional embeddings, no biases on the
linear projections, no dropout. Everything runs in double precision so
gradient checks are decisive.

Batched calls use a two-segment layout: a prefix of token ids shared by
every sequence in the batch (computed once) and per-sequence suffixes that
attend over [prefix keys, own suffix keys]. With an empty prefix and batch
size one this reduces to the plain single-sequence forward. The layout is
exact — it changes floating-point summation order only — and exists because
corpus prompts share a long common instruction. Nothing is cached across
calls or optimizer steps.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 103
    max_seq_len: int = 512
    init_seed: int = 0

    def validate(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


def param_layout(config: ModelConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) pairs; the order fixes rng consumption at init."""
    d, f, v, s = config.d_model, config.d_ff, config.vocab_size, config.max_seq_len
    layout = [("wte", (v, d)), ("wpe", (s, d))]
    for i in range(config.n_layers):
        layout += [
            (f"l{i}.ln1_g", (d,)),
            (f"l{i}.ln1_b", (d,)),
            (f"l{i}.wq", (d, d)),
            (f"l{i}.wk", (d, d)),
            (f"l{i}.wv", (d, d)),
            (f"l{i}.wo", (d, d)),
            (f"l{i}.ln2_g", (d,)),
            (f"l{i}.ln2_b", (d,)),
            (f"l{i}.w1", (d, f)),
            (f"l{i}.w2", (f, d)),
        ]
    layout += [("lnf_g", (d,)), ("lnf_b", (d,)), ("wu", (d, v))]
    return layout


def init_params(config: ModelConfig) -> ModelParams:
    """Normal(0, 0.02) weights; residual output projections scaled down."""
    config.validate()
    rng = np.random.default_rng(config.init_seed)
    residual_scale = 1.0 / math.sqrt(2.0 * config.n_layers)
    tensors = {}
    for name, shape in param_layout(config):
        base = name.split(".")[-1]
        if base.startswith("ln"):
            tensors[name] = (
                np.ones(shape) if base.endswith("_g") else np.zeros(shape)
            )
            continue
        w = rng.normal(0.0, INIT_STD, size=shape)
        if base in ("wo", "w2"):
            w *= residual_scale
        tensors[name] = w
    return ModelParams(config=config, tensors=tensors)


def zero_grads(params: ModelParams) -> dict:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


# ---------------------------------------------------------------------------
# primitive ops with caches


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_backward(dy, cache, g):
    xhat, rstd = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _gelu(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(dy, x, t):
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _softmax(scores):
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(dprobs, probs):
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def _causal_bias(n):
    return np.triu(np.full((n, n), -np.inf), k=1)


def _split_heads(x, n_heads):
    *lead, length, d = x.shape
    x = x.reshape(*lead, length, n_heads, d // n_heads)
    return np.moveaxis(x, -2, -3)


def _merge_heads(x):
    x = np.moveaxis(x, -3, -2)
    *lead, length, h, dh = x.shape
    return np.ascontiguousarray(x).reshape(*lead, length, h * dh)


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardTrace:
    """Cached activations of one forward call, consumed by backward."""

    config: ModelConfig
    params: "ModelParams"
    prefix_ids: np.ndarray
    suffix_ids: np.ndarray
    layers: list = field(default_factory=list)
    lnf_cache: tuple = None
    hs_final: np.ndarray = None
    logits: np.ndarray = None


def _check_ids(config: ModelConfig, ids: np.ndarray, what: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"{what} contains ids outside the vocabulary")


def forward_batch(params: ModelParams, prefix_ids, suffix_ids):
    """Logits for a batch of sequences sharing a literal prefix.

    prefix_ids: (P,) ids common to every sequence (may be empty);
    suffix_ids: (B, Ls) per-sequence continuations, right-padded.
    Returns logits (B, Ls, vocab) for suffix positions only, plus the trace.
    """
    cfg = params.config
    t = params.tensors
    prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
    suffix_ids = np.asarray(suffix_ids, dtype=np.int64)
    if suffix_ids.ndim != 2 or suffix_ids.shape[1] < 1:
        raise ValueError("suffix_ids must be (batch, length>=1)")
    p_len = int(prefix_ids.shape[0])
    s_len = int(suffix_ids.shape[1])
    if p_len + s_len > cfg.max_seq_len:
        raise ValueError(
            f"sequence length {p_len + s_len} exceeds max_seq_len={cfg.max_seq_len}"
        )
    _check_ids(cfg, prefix_ids, "prefix")
    _check_ids(cfg, suffix_ids, "suffix")

    trace = ForwardTrace(
        config=cfg, params=params, prefix_ids=prefix_ids, suffix_ids=suffix_ids
    )
    scale = 1.0 / math.sqrt(cfg.d_head)
    hp = t["wte"][prefix_ids] + t["wpe"][:p_len] if p_len else None
    hs = t["wte"][suffix_ids] + t["wpe"][p_len : p_len + s_len]
    bias_s = _causal_bias(s_len)
    bias_p = _causal_bias(p_len) if p_len else None

    for i in range(cfg.n_layers):
        pre = f"l{i}."
        cache = {}
        # attention
        as_, cache["ln1_s"] = _layernorm(hs, t[pre + "ln1_g"], t[pre + "ln1_b"])
        qs = _split_heads(as_ @ t[pre + "wq"], cfg.n_heads) * scale
        ks = _split_heads(as_ @ t[pre + "wk"], cfg.n_heads)
        vs = _split_heads(as_ @ t[pre + "wv"], cfg.n_heads)
        if p_len:
            ap, cache["ln1_p"] = _layernorm(hp, t[pre + "ln1_g"], t[pre + "ln1_b"])
            qp = _split_heads(ap @ t[pre + "wq"], cfg.n_heads) * scale
            kp = _split_heads(ap @ t[pre + "wk"], cfg.n_heads)
            vp = _split_heads(ap @ t[pre + "wv"], cfg.n_heads)
            probs_p = _softmax(qp @ kp.swapaxes(-1, -2) + bias_p)
            op = _merge_heads(probs_p @ vp)
            attn_p = op @ t[pre + "wo"]
            scores = np.concatenate(
                [
                    qs @ kp.swapaxes(-1, -2),  # prefix keys: fully visible
                    qs @ ks.swapaxes(-1, -2) + bias_s,
                ],
                axis=-1,
            )
            probs = _softmax(scores)
            heads = probs[..., :p_len] @ vp + probs[..., p_len:] @ vs
            cache.update(ap=ap, qp=qp, kp=kp, vp=vp, probs_p=probs_p, op=op)
        else:
            probs = _softmax(qs @ ks.swapaxes(-1, -2) + bias_s)
            heads = probs @ vs
        os_ = _merge_heads(heads)
        attn_s = os_ @ t[pre + "wo"]
        cache.update(as_=as_, qs=qs, ks=ks, vs=vs, probs=probs, os_=os_)
        hs = hs + attn_s
        if p_len:
            hp = hp + attn_p
        # feed-forward
        us, cache["ln2_s"] = _layernorm(hs, t[pre + "ln2_g"], t[pre + "ln2_b"])
        zs = us @ t[pre + "w1"]
        gs, ts = _gelu(zs)
        hs = hs + gs @ t[pre + "w2"]
        cache.update(us=us, zs=zs, gs=gs, ts=ts)
        if p_len:
            up, cache["ln2_p"] = _layernorm(hp, t[pre + "ln2_g"], t[pre + "ln2_b"])
            zp = up @ t[pre + "w1"]
            gp, tp = _gelu(zp)
            hp = hp + gp @ t[pre + "w2"]
            cache.update(up=up, zp=zp, gp=gp, tp=tp)
        trace.layers.append(cache)

    fs, trace.lnf_cache = _layernorm(hs, t["lnf_g"], t["lnf_b"])
    trace.hs_final = fs
    logits = fs @ t["wu"]
    trace.logits = logits
    return logits, trace


def forward(params: ModelParams, ids):
    """Per-position logits for one sequence; position t sees ids[0..t] only."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] < 1:
        raise ValueError("ids must be a non-empty 1-d sequence")
    logits, trace = forward_batch(params, np.empty(0, dtype=np.int64), ids[None, :])
    return logits[0], trace


# ---------------------------------------------------------------------------
# backward


def _sum_outer(a, s):
    """(B,H,L,P) x (B,H,L,D) -> (H,P,D), summing over batch and suffix length."""
    _, h, _, p = a.shape
    d = s.shape[-1]
    at = np.ascontiguousarray(a.transpose(1, 3, 0, 2)).reshape(h, p, -1)
    st = np.ascontiguousarray(s.transpose(1, 0, 2, 3)).reshape(h, -1, d)
    return at @ st


def backward(trace: ForwardTrace, dlogits) -> dict:
    """Exact parameter gradients of the scalar loss behind dlogits."""
    cfg = trace.config
    t = trace.params.tensors
    p_len = int(trace.prefix_ids.shape[0])
    b, s_len = trace.suffix_ids.shape
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape == (s_len, cfg.vocab_size) and b == 1 and trace.logits.shape[0] == 1:
        dlogits = dlogits[None, :, :]
    if dlogits.shape != (b, s_len, cfg.vocab_size):
        raise ValueError(
            f"dlogits shape {dlogits.shape} does not match trace "
            f"({b}, {s_len}, {cfg.vocab_size})"
        )

    grads = {k: np.zeros_like(v) for k, v in t.items()}
    scale = 1.0 / math.sqrt(cfg.d_head)

    flat_fs = trace.hs_final.reshape(-1, cfg.d_model)
    grads["wu"] += flat_fs.T @ dlogits.reshape(-1, cfg.vocab_size)
    dfs = dlogits @ t["wu"].T
    dhs, dg, db = _layernorm_backward(dfs, trace.lnf_cache, t["lnf_g"])
    grads["lnf_g"] += dg
    grads["lnf_b"] += db
    dhp = np.zeros((p_len, cfg.d_model)) if p_len else None

    for i in reversed(range(cfg.n_layers)):
        pre = f"l{i}."
        c = trace.layers[i]
        # feed-forward backward (suffix, then prefix if present)
        dgs = dhs @ t[pre + "w2"].T
        grads[pre + "w2"] += c["gs"].reshape(-1, cfg.d_ff).T @ dhs.reshape(-1, cfg.d_model)
        dzs = _gelu_backward(dgs, c["zs"], c["ts"])
        grads[pre + "w1"] += c["us"].reshape(-1, cfg.d_model).T @ dzs.reshape(-1, cfg.d_ff)
        dus = dzs @ t[pre + "w1"].T
        dx, dg, db = _layernorm_backward(dus, c["ln2_s"], t[pre + "ln2_g"])
        grads[pre + "ln2_g"] += dg
        grads[pre + "ln2_b"] += db
        dhs = dhs + dx
        if p_len:
            dgp = dhp @ t[pre + "w2"].T
            grads[pre + "w2"] += c["gp"].T @ dhp
            dzp = _gelu_backward(dgp, c["zp"], c["tp"])
            grads[pre + "w1"] += c["up"].T @ dzp
            dup = dzp @ t[pre + "w1"].T
            dx, dg, db = _layernorm_backward(dup, c["ln2_p"], t[pre + "ln2_g"])
            grads[pre + "ln2_g"] += dg
            grads[pre + "ln2_b"] += db
            dhp = dhp + dx

        # attention backward
        dos = dhs @ t[pre + "wo"].T
        grads[pre + "wo"] += (
            c["os_"].reshape(-1, cfg.d_model).T @ dhs.reshape(-1, cfg.d_model)
        )
        dheads = _split_heads(dos, cfg.n_heads)
        probs = c["probs"]
        if p_len:
            dprobs_pk = dheads @ c["vp"].swapaxes(-1, -2)
            dvp = _sum_outer(probs[..., :p_len], dheads)
            dprobs_sk = dheads @ c["vs"].swapaxes(-1, -2)
            dvs = probs[..., p_len:].swapaxes(-1, -2) @ dheads
            dscores = _softmax_backward(
                np.concatenate([dprobs_pk, dprobs_sk], axis=-1), probs
            )
            ds_pk = dscores[..., :p_len]
            ds_sk = dscores[..., p_len:]
            dqs = ds_pk @ c["kp"] + ds_sk @ c["ks"]
            dks = ds_sk.swapaxes(-1, -2) @ c["qs"]
            dkp = _sum_outer(ds_pk, c["qs"])
            # prefix self-attention (single sequence)
            dop = dhp @ t[pre + "wo"].T
            grads[pre + "wo"] += c["op"].T @ dhp
            dheads_p = _split_heads(dop, cfg.n_heads)
            dprobs_p = dheads_p @ c["vp"].swapaxes(-1, -2)
            dvp += c["probs_p"].swapaxes(-1, -2) @ dheads_p
            dsp = _softmax_backward(dprobs_p, c["probs_p"])
            dqp = dsp @ c["kp"]
            dkp += dsp.swapaxes(-1, -2) @ c["qp"]
            dap = (
                _merge_heads(dqp * scale) @ t[pre + "wq"].T
                + _merge_heads(dkp) @ t[pre + "wk"].T
                + _merge_heads(dvp) @ t[pre + "wv"].T
            )
            ap_flat = c["ap"]
            grads[pre + "wq"] += ap_flat.T @ _merge_heads(dqp * scale)
            grads[pre + "wk"] += ap_flat.T @ _merge_heads(dkp)
            grads[pre + "wv"] += ap_flat.T @ _merge_heads(dvp)
            dx, dg, db = _layernorm_backward(dap, c["ln1_p"], t[pre + "ln1_g"])
            grads[pre + "ln1_g"] += dg
            grads[pre + "ln1_b"] += db
            dhp = dhp + dx
        else:
            dprobs_sk = dheads @ c["vs"].swapaxes(-1, -2)
            dvs = probs.swapaxes(-1, -2) @ dheads
            ds_sk = _softmax_backward(dprobs_sk, probs)
            dqs = ds_sk @ c["ks"]
            dks = ds_sk.swapaxes(-1, -2) @ c["qs"]

        dqs_m = _merge_heads(dqs * scale)
        dks_m = _merge_heads(dks)
        dvs_m = _merge_heads(dvs)
        das = dqs_m @ t[pre + "wq"].T + dks_m @ t[pre + "wk"].T + dvs_m @ t[pre + "wv"].T
        as_flat = c["as_"].reshape(-1, cfg.d_model)
        grads[pre + "wq"] += as_flat.T @ dqs_m.reshape(-1, cfg.d_model)
        grads[pre + "wk"] += as_flat.T @ dks_m.reshape(-1, cfg.d_model)
        grads[pre + "wv"] += as_flat.T @ dvs_m.reshape(-1, cfg.d_model)
        dx, dg, db = _layernorm_backward(das, c["ln1_s"], t[pre + "ln1_g"])
        grads[pre + "ln1_g"] += dg
        grads[pre + "ln1_b"] += db
        dhs = dhs + dx

    # embeddings
    np.add.at(grads["wte"], trace.suffix_ids.reshape(-1), dhs.reshape(-1, cfg.d_model))
    grads["wpe"][p_len : p_len + s_len] += dhs.sum(axis=0)
    if p_len:
        np.add.at(grads["wte"], trace.prefix_ids, dhp)
        grads["wpe"][:p_len] += dhp
    return grads


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Write config plus all tensors; round-trips bit-exactly."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": {
            "n_layers": params.config.n_layers,
            "d_model": params.config.d_model,
            "n_heads": params.config.n_heads,
            "d_ff": params.config.d_ff,
            "vocab_size": params.config.vocab_size,
            "max_seq_len": params.config.max_seq_len,
            "init_seed": params.config.init_seed,
        },
        "extra": extra or {},
    }
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **params.tensors)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise DataError(f"unsupported checkpoint version {meta.get('version')!r}")
            tensors = {k: data[k] for k in data.files if k != "__meta__"}
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    config = ModelConfig(**meta["config"])
    return ModelParams(config=config, tensors=tensors), meta["extra"]
