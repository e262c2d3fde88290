"""Mixture of Facial Experts: numeric reference forward/backward in float64.

Per injected block ``b``::

    p_a    = f_a @ P_a.W + P_a.b                      shared across blocks
    e_a    = p_a + gelu(p_a @ W1 + b1) @ W2 + b2      residual expert, a in {id, sem, det}
    e_c    = [e_id | e_sem | e_det]                   feature-axis concat
    w      = softmax(G(e_c))                          per token (or pooled)
    fused  = w_id e_id + w_sem e_sem + w_det e_det
    o      = attn(q, k_ctx, v_ctx) + attn(q, k_img, v_img)
             + attn(q, fused @ W_k, fused @ W_v)

with attn(q, k, v) = softmax(q k^T / sqrt(d_model)) v.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np
from scipy.special import erf

ATTRS = ("id", "sem", "det")


@dataclass(frozen=True)
class MofeConfig:
    d_model: int = 64
    n_tokens: int = 4
    d_id: int = 512
    d_sem: int = 768
    d_det: int = 768
    n_blocks: int = 30
    inject_every: int = 2
    gate_kind: str = "linear"        # "linear" | "mlp"
    gate_granularity: str = "token"  # "token" | "pooled"
    expert_hidden: Optional[int] = None  # defaults to 2 * d_model
    gate_hidden: Optional[int] = None    # mlp gate only; defaults to d_model
    seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "n_tokens", "d_id", "d_sem", "d_det", "n_blocks", "inject_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.gate_kind not in ("linear", "mlp"):
            raise ValueError(f"gate_kind must be 'linear' or 'mlp', got {self.gate_kind!r}")
        if self.gate_granularity not in ("token", "pooled"):
            raise ValueError(f"gate_granularity must be 'token' or 'pooled', got {self.gate_granularity!r}")

    @property
    def hidden(self) -> int:
        return self.expert_hidden or 2 * self.d_model

    @property
    def gate_width(self) -> int:
        return self.gate_hidden or self.d_model

    def in_dim(self, attr: str) -> int:
        return getattr(self, f"d_{attr}")

    def injected_blocks(self) -> list:
        return list(range(0, self.n_blocks, self.inject_every))


def param_shapes(cfg: MofeConfig) -> dict:
    """Ordered name -> shape for every trainable tensor."""
    d, h = cfg.d_model, cfg.hidden
    shapes = {}
    for a in ATTRS:
        shapes[f"P_{a}.W"] = (cfg.in_dim(a), d)
        shapes[f"P_{a}.b"] = (d,)
    for b in cfg.injected_blocks():
        for a in ATTRS:
            shapes[f"block{b}.E_{a}.W1"] = (d, h)
            shapes[f"block{b}.E_{a}.b1"] = (h,)
            shapes[f"block{b}.E_{a}.W2"] = (h, d)
            shapes[f"block{b}.E_{a}.b2"] = (d,)
        if cfg.gate_kind == "linear":
            shapes[f"block{b}.G.W"] = (3 * d, 3)
            shapes[f"block{b}.G.b"] = (3,)
        else:
            g = cfg.gate_width
            shapes[f"block{b}.G.W1"] = (3 * d, g)
            shapes[f"block{b}.G.b1"] = (g,)
            shapes[f"block{b}.G.W2"] = (g, 3)
            shapes[f"block{b}.G.b2"] = (3,)
        shapes[f"block{b}.W_k"] = (d, d)
        shapes[f"block{b}.W_v"] = (d, d)
    return shapes


def _fan_in(name: str, shapes: dict) -> int:
    # biases share the fan-in of their weight: "X.b1" -> "X.W1", "X.b" -> "X.W"
    prefix, _, leaf = name.rpartition(".")
    if leaf.startswith("b"):
        name = f"{prefix}.W{leaf[1:]}"
    return shapes[name][0]


@dataclass(eq=False)
class MofeParams:
    cfg: MofeConfig
    tensors: dict

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "MofeParams":
        return MofeParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})


def init_params(cfg: MofeConfig, seed: Optional[int] = None) -> MofeParams:
    """Uniform(+-1/sqrt(fan_in)) for weights and biases, drawn in name order."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    shapes = param_shapes(cfg)
    tensors = {}
    for name, shape in shapes.items():
        bound = 1.0 / math.sqrt(_fan_in(name, shapes))
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return MofeParams(cfg, tensors)


@dataclass(eq=False)
class ExpertBundle:
    f_id: np.ndarray
    f_sem: np.ndarray
    f_det: np.ndarray

    def __post_init__(self):
        for a in ATTRS:
            arr = np.asarray(getattr(self, f"f_{a}"), dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"f_{a} must be 2-D (tokens x width), got shape {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"f_{a} has non-finite values")
            setattr(self, f"f_{a}", arr)
        counts = {self.f_id.shape[0], self.f_sem.shape[0], self.f_det.shape[0]}
        if len(counts) != 1:
            raise ValueError(f"token counts differ across streams: {sorted(counts)}")

    def get(self, attr: str) -> np.ndarray:
        return getattr(self, f"f_{attr}")


@dataclass(eq=False)
class CrossAttnInputs:
    q: np.ndarray
    k_ctx: np.ndarray
    v_ctx: np.ndarray
    k_img: np.ndarray
    v_img: np.ndarray

    def __post_init__(self):
        for name in ("q", "k_ctx", "v_ctx", "k_img", "v_img"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))


@dataclass(eq=False)
class BlockActivations:
    e_id: np.ndarray
    e_sem: np.ndarray
    e_det: np.ndarray
    e_c: np.ndarray
    w: np.ndarray
    f_fused: np.ndarray
    o: np.ndarray
    cache: dict = field(default_factory=dict)


@dataclass(eq=False)
class MofeForward:
    bundle: ExpertBundle
    inputs: dict        # block -> CrossAttnInputs
    projected: dict     # attr -> p_a
    blocks: dict        # block -> BlockActivations


# --- primitives -----------------------------------------------------------

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def attention(q, k, v):
    """Single-head scaled dot-product attention; returns (output, probs)."""
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"{k.shape[0]} keys but {v.shape[0]} values")
    probs = softmax_rows(q @ k.T / math.sqrt(q.shape[1]))
    return probs @ v, probs


def attention_backward(q, k, v, probs, d_out):
    scale = 1.0 / math.sqrt(q.shape[1])
    dv = probs.T @ d_out
    ds = softmax_rows_backward(probs, d_out @ v.T) * scale
    return ds @ k, ds.T @ q, dv


# --- forward --------------------------------------------------------------

def _check_block(params: MofeParams, block: int) -> None:
    cfg = params.cfg
    if not 0 <= block < cfg.n_blocks or block % cfg.inject_every:
        raise ValueError(f"block {block} carries no facial stream "
                         f"(n_blocks={cfg.n_blocks}, inject_every={cfg.inject_every})")


def project(bundle: ExpertBundle, params: MofeParams) -> dict:
    out = {}
    for a in ATTRS:
        f = bundle.get(a)
        W = params[f"P_{a}.W"]
        if f.shape[1] != W.shape[0]:
            raise ValueError(f"f_{a} width {f.shape[1]} != projection input {W.shape[0]}")
        out[a] = f @ W + params[f"P_{a}.b"]
    return out


def _expert(p, params, block, attr, cache=None):
    pre = f"block{block}.E_{attr}"
    h = p @ params[f"{pre}.W1"] + params[f"{pre}.b1"]
    act = gelu(h)
    e = p + act @ params[f"{pre}.W2"] + params[f"{pre}.b2"]
    if cache is not None:
        cache[f"h_{attr}"] = h
        cache[f"a_{attr}"] = act
    return e


def expert_forward(bundle: ExpertBundle, params: MofeParams, block: int, projected=None):
    """(e_id, e_sem, e_det) for one injected block."""
    _check_block(params, block)
    projected = project(bundle, params) if projected is None else projected
    return tuple(_expert(projected[a], params, block, a) for a in ATTRS)


def gate_logits(e_c: np.ndarray, params: MofeParams, block: int, cache=None) -> np.ndarray:
    cfg = params.cfg
    x = e_c.mean(axis=0, keepdims=True) if cfg.gate_granularity == "pooled" else e_c
    pre = f"block{block}.G"
    if cfg.gate_kind == "linear":
        return x @ params[f"{pre}.W"] + params[f"{pre}.b"]
    z = x @ params[f"{pre}.W1"] + params[f"{pre}.b1"]
    a = gelu(z)
    if cache is not None:
        cache["gate_z"] = z
        cache["gate_a"] = a
    return a @ params[f"{pre}.W2"] + params[f"{pre}.b2"]


def gate_forward(e_c, params: MofeParams, block: int, cache=None) -> np.ndarray:
    """Per-token weights over the three experts (rows sum to 1)."""
    e_c = np.asarray(e_c, dtype=np.float64)
    if not np.isfinite(e_c).all():
        raise ValueError("gate input has non-finite values")
    _check_block(params, block)
    w = softmax_rows(gate_logits(e_c, params, block, cache))
    if w.shape[0] != e_c.shape[0]:
        w = np.broadcast_to(w, (e_c.shape[0], 3)).copy()
    return w


def fuse(w, e_id, e_sem, e_det) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (e_id.shape[0], 3) or not (e_id.shape == e_sem.shape == e_det.shape):
        raise ValueError(f"shape mismatch: w {w.shape}, experts {e_id.shape}, {e_sem.shape}, {e_det.shape}")
    return w[:, 0:1] * e_id + w[:, 1:2] * e_sem + w[:, 2:3] * e_det


def facial_cross_attention(q, streams: Mapping[str, tuple]):
    """Sum of independent attentions, one per (keys, values) stream.

    Returns (o, probs) with probs keyed like ``streams``.
    """
    q = np.asarray(q, dtype=np.float64)
    o = None
    probs = {}
    for name, (k, v) in streams.items():
        if np.shape(k)[1] != q.shape[1] or np.shape(v)[1] != q.shape[1]:
            raise ValueError(f"stream {name!r}: key/value width must equal d_model={q.shape[1]}")
        out, probs[name] = attention(q, k, v)
        o = out if o is None else o + out
    return o, probs


def _as_block_inputs(inputs, cfg: MofeConfig) -> dict:
    if isinstance(inputs, CrossAttnInputs):
        return {b: inputs for b in cfg.injected_blocks()}
    missing = set(cfg.injected_blocks()) - set(inputs)
    if missing:
        raise ValueError(f"no attention inputs for blocks {sorted(missing)}")
    return dict(inputs)


def block_forward(projected: dict, inputs: CrossAttnInputs, params: MofeParams, block: int) -> BlockActivations:
    _check_block(params, block)
    cache: dict = {}
    e = {a: _expert(projected[a], params, block, a, cache) for a in ATTRS}
    e_c = np.concatenate([e[a] for a in ATTRS], axis=1)
    w = gate_forward(e_c, params, block, cache)
    f_fused = fuse(w, e["id"], e["sem"], e["det"])
    k_f = f_fused @ params[f"block{block}.W_k"]
    v_f = f_fused @ params[f"block{block}.W_v"]
    o, probs = facial_cross_attention(inputs.q, {
        "ctx": (inputs.k_ctx, inputs.v_ctx),
        "img": (inputs.k_img, inputs.v_img),
        "fused": (k_f, v_f),
    })
    cache.update(k_fused=k_f, v_fused=v_f, probs=probs)
    return BlockActivations(e["id"], e["sem"], e["det"], e_c, w, f_fused, o, cache)


def mofe_forward(bundle: ExpertBundle, inputs: Union[CrossAttnInputs, Mapping[int, CrossAttnInputs]],
                 params: MofeParams) -> MofeForward:
    """Run every injected block; blocks off the injection stride get no entry."""
    cfg = params.cfg
    block_inputs = _as_block_inputs(inputs, cfg)
    projected = project(bundle, params)
    blocks = {b: block_forward(projected, block_inputs[b], params, b) for b in cfg.injected_blocks()}
    return MofeForward(bundle, block_inputs, projected, blocks)


# --- backward -------------------------------------------------------------

@dataclass(eq=False)
class MofeGrads:
    params: dict   # name -> gradient, same keys as MofeParams.tensors
    features: dict  # "f_id" | "f_sem" | "f_det" -> gradient
    attn: dict     # block -> {"q", "k_ctx", "v_ctx", "k_img", "v_img"} gradients


def mofe_backward(loss_grad: Mapping[int, np.ndarray], fwd: MofeForward, params: MofeParams) -> MofeGrads:
    """Reverse-mode gradients given dL/do for each injected block."""
    cfg = params.cfg
    if fwd is None or not fwd.blocks:
        raise ValueError("missing cached forward activations")
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    d_proj = {a: np.zeros_like(fwd.projected[a]) for a in ATTRS}
    attn_grads = {}
    d_model = cfg.d_model
    for b, act in fwd.blocks.items():
        if b not in loss_grad:
            raise ValueError(f"no upstream gradient for block {b}")
        d_o = np.asarray(loss_grad[b], dtype=np.float64)
        inp = fwd.inputs[b]
        c = act.cache
        probs = c["probs"]
        dq_c, dk_ctx, dv_ctx = attention_backward(inp.q, inp.k_ctx, inp.v_ctx, probs["ctx"], d_o)
        dq_i, dk_img, dv_img = attention_backward(inp.q, inp.k_img, inp.v_img, probs["img"], d_o)
        dq_f, dk_f, dv_f = attention_backward(inp.q, c["k_fused"], c["v_fused"], probs["fused"], d_o)
        attn_grads[b] = {"q": dq_c + dq_i + dq_f, "k_ctx": dk_ctx, "v_ctx": dv_ctx,
                         "k_img": dk_img, "v_img": dv_img}

        W_k, W_v = params[f"block{b}.W_k"], params[f"block{b}.W_v"]
        grads[f"block{b}.W_k"] += act.f_fused.T @ dk_f
        grads[f"block{b}.W_v"] += act.f_fused.T @ dv_f
        d_fused = dk_f @ W_k.T + dv_f @ W_v.T

        experts = (act.e_id, act.e_sem, act.e_det)
        d_e = [act.w[:, i:i + 1] * d_fused for i in range(3)]
        d_w = np.stack([(d_fused * experts[i]).sum(1) for i in range(3)], axis=1)

        if cfg.gate_granularity == "pooled":
            w_row = act.w[:1]
            d_logits = softmax_rows_backward(w_row, d_w.sum(0, keepdims=True))
            gate_in = act.e_c.mean(0, keepdims=True)
        else:
            d_logits = softmax_rows_backward(act.w, d_w)
            gate_in = act.e_c
        pre = f"block{b}.G"
        if cfg.gate_kind == "linear":
            grads[f"{pre}.W"] += gate_in.T @ d_logits
            grads[f"{pre}.b"] += d_logits.sum(0)
            d_gate_in = d_logits @ params[f"{pre}.W"].T
        else:
            grads[f"{pre}.W2"] += c["gate_a"].T @ d_logits
            grads[f"{pre}.b2"] += d_logits.sum(0)
            d_z = (d_logits @ params[f"{pre}.W2"].T) * gelu_grad(c["gate_z"])
            grads[f"{pre}.W1"] += gate_in.T @ d_z
            grads[f"{pre}.b1"] += d_z.sum(0)
            d_gate_in = d_z @ params[f"{pre}.W1"].T
        if cfg.gate_granularity == "pooled":
            d_ec = np.broadcast_to(d_gate_in / act.e_c.shape[0], act.e_c.shape)
        else:
            d_ec = d_gate_in
        for i in range(3):
            d_e[i] = d_e[i] + d_ec[:, i * d_model:(i + 1) * d_model]

        for i, a in enumerate(ATTRS):
            ep = f"block{b}.E_{a}"
            p = fwd.projected[a]
            grads[f"{ep}.W2"] += c[f"a_{a}"].T @ d_e[i]
            grads[f"{ep}.b2"] += d_e[i].sum(0)
            d_h = (d_e[i] @ params[f"{ep}.W2"].T) * gelu_grad(c[f"h_{a}"])
            grads[f"{ep}.W1"] += p.T @ d_h
            grads[f"{ep}.b1"] += d_h.sum(0)
            d_proj[a] += d_e[i] + d_h @ params[f"{ep}.W1"].T

    features = {}
    for a in ATTRS:
        f = fwd.bundle.get(a)
        grads[f"P_{a}.W"] += f.T @ d_proj[a]
        grads[f"P_{a}.b"] += d_proj[a].sum(0)
        features[f"f_{a}"] = d_proj[a] @ params[f"P_{a}.W"].T
    return MofeGrads(grads, features, attn_grads)


# --- accounting -----------------------------------------------------------

def expert_param_count(d_model: int, hidden: int) -> int:
    return (d_model * hidden + hidden) + (hidden * d_model + d_model)


def parameter_overhead(cfg: MofeConfig, base_params: int) -> dict:
    """Added parameter count and its ratio to ``base_params`` (weights + biases)."""
    if base_params <= 0:
        raise ValueError("base_params must be > 0")
    d = cfg.d_model
    shared = sum(cfg.in_dim(a) * d + d for a in ATTRS)
    if cfg.gate_kind == "linear":
        gate = 3 * d * 3 + 3
    else:
        g = cfg.gate_width
        gate = (3 * d * g + g) + (g * 3 + 3)
    per_block = 3 * expert_param_count(d, cfg.hidden) + gate + 2 * d * d
    n_inj = len(cfg.injected_blocks())
    total = shared + n_inj * per_block
    return {"mofe_params": total, "ratio": total / base_params, "blocks_injected": n_inj,
            "per_block_params": per_block, "shared_params": shared}


# --- verification helpers -------------------------------------------------

def random_inputs(cfg: MofeConfig, n_q: int = 2, n_ctx: int = 3, n_img: int = 3,
                  seed: int = 0) -> tuple[ExpertBundle, CrossAttnInputs]:
    rng = np.random.default_rng(seed)
    t, d = cfg.n_tokens, cfg.d_model
    bundle = ExpertBundle(rng.standard_normal((t, cfg.d_id)), rng.standard_normal((t, cfg.d_sem)),
                          rng.standard_normal((t, cfg.d_det)))
    inputs = CrossAttnInputs(rng.standard_normal((n_q, d)), rng.standard_normal((n_ctx, d)),
                             rng.standard_normal((n_ctx, d)), rng.standard_normal((n_img, d)),
                             rng.standard_normal((n_img, d)))
    return bundle, inputs


def sum_loss(fwd: MofeForward) -> float:
    return float(sum(act.o.sum() for act in fwd.blocks.values()))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries
    from turning finite-difference noise into huge ratios."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    if not a.size:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def gradient_check(cfg: MofeConfig, seed: int = 0, h: float = 1e-5, n_q: int = 2) -> dict:
    """Compare analytic gradients of loss = sum(o) with central differences
    over every parameter and every input feature. Returns per-tensor errors."""
    params = init_params(cfg, seed)
    bundle, inputs = random_inputs(cfg, n_q=n_q, seed=seed + 1)
    fwd = mofe_forward(bundle, inputs, params)
    grads = mofe_backward({b: np.ones_like(a.o) for b, a in fwd.blocks.items()}, fwd, params)

    def loss():
        return sum_loss(mofe_forward(bundle, inputs, params))

    def numeric(arr):
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss()
            arr[idx] = orig - h
            down = loss()
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        return g

    errors = {name: relative_error(grads.params[name], numeric(t)) for name, t in params.tensors.items()}
    for a in ATTRS:
        errors[f"f_{a}"] = relative_error(grads.features[f"f_{a}"], numeric(bundle.get(a)))
    for key in ("q", "k_ctx", "v_ctx", "k_img", "v_img"):
        total = sum(grads.attn[b][key] for b in grads.attn)
        errors[key] = relative_error(total, numeric(getattr(inputs, key)))
    return errors
