import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lfakit.mofe import (CrossAttnInputs, MofeConfig, attention, block_forward, expert_forward,
                         expert_param_count, facial_cross_attention, fuse, gate_forward, gelu,
                         init_params, mofe_backward, mofe_forward, param_shapes, parameter_overhead,
                         project, random_inputs, relative_error, softmax_rows)

TINY = dict(d_model=4, n_tokens=2, d_id=5, d_sem=6, d_det=7, n_blocks=4, inject_every=2)


def tiny(**kw):
    return MofeConfig(**{**TINY, **kw})


# --- softmax --------------------------------------------------------------

def test_softmax_example():
    p = softmax_rows(np.array([[math.log(2), 0.0, 0.0]]))
    np.testing.assert_allclose(p, [[0.5, 0.25, 0.25]], atol=1e-15)
    np.testing.assert_allclose(softmax_rows(np.zeros((2, 3))), np.full((2, 3), 1 / 3), atol=1e-15)


finite_logits = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)),
                       elements=st.floats(-50, 50))


@given(finite_logits, st.floats(-100, 100))
def test_softmax_rows_sum_and_shift(z, c):
    p = softmax_rows(z)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax_rows(z + c), p, atol=1e-12)


def test_softmax_large_logits_stable():
    p = softmax_rows(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.isfinite(p).all() and p[0, 0] == 1.0


# --- gate and fusion ------------------------------------------------------

@pytest.mark.parametrize("kind", ["linear", "mlp"])
@pytest.mark.parametrize("gran", ["token", "pooled"])
def test_gate_rows_sum_to_one(kind, gran, rng):
    cfg = tiny(gate_kind=kind, gate_granularity=gran)
    params = init_params(cfg, 3)
    w = gate_forward(rng.standard_normal((5, 12)) * 10, params, 0)
    assert w.shape == (5, 3)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)
    if gran == "pooled":
        assert np.all(w == w[0])


def test_gate_rejects_nan():
    params = init_params(tiny(), 0)
    with pytest.raises(ValueError, match="non-finite"):
        gate_forward(np.full((2, 12), np.nan), params, 0)


def test_fuse_one_hot_and_equal_experts(rng):
    e = [rng.standard_normal((3, 4)) for _ in range(3)]
    for j in range(3):
        w = np.zeros((3, 3))
        w[:, j] = 1.0
        assert np.array_equal(fuse(w, *e), e[j])
    same = fuse(rng.dirichlet(np.ones(3), size=3), e[0], e[0], e[0])
    np.testing.assert_allclose(same, e[0], atol=1e-15)


def test_fuse_example():
    a, b, c = np.array([[3.0, 0.0]]), np.array([[0.0, 3.0]]), np.array([[3.0, 3.0]])
    np.testing.assert_allclose(fuse(np.full((1, 3), 1 / 3), a, b, c), [[2.0, 2.0]], atol=1e-15)
    with pytest.raises(ValueError):
        fuse(np.ones((2, 3)), a, b, c)


# --- attention ------------------------------------------------------------

def test_single_kv_returns_value(rng):
    v = rng.standard_normal((1, 4))
    out, p = attention(rng.standard_normal((3, 4)), rng.standard_normal((1, 4)), v)
    assert np.array_equal(out, np.repeat(v, 3, axis=0)) and np.all(p == 1.0)


def test_duplicating_all_kv_tokens_leaves_output(rng):
    q, k, v = (rng.standard_normal((n, 4)) for n in (2, 3, 3))
    base, _ = attention(q, k, v)
    np.testing.assert_allclose(attention(q, np.vstack([k, k]), np.vstack([v, v]))[0], base, atol=1e-12)


def test_duplicating_one_token_doubles_its_weight(rng):
    q, k, v = (rng.standard_normal((n, 4)) for n in (2, 3, 3))
    got, _ = attention(q, np.vstack([k, k[1:2]]), np.vstack([v, v[1:2]]))
    logits = q @ k.T / 2.0
    logits[:, 1] += math.log(2.0)
    np.testing.assert_allclose(got, softmax_rows(logits) @ v, atol=1e-12)


def test_one_token_per_stream_sums_values(rng):
    q = rng.standard_normal((3, 4))
    streams = {s: (rng.standard_normal((1, 4)), rng.standard_normal((1, 4))) for s in ("ctx", "img", "fused")}
    o, _ = facial_cross_attention(q, streams)
    ref = sum(v for _, v in streams.values())
    np.testing.assert_allclose(o, np.repeat(ref, 3, axis=0), atol=1e-15)


def test_kv_permutation_invariance(rng):
    q, k, v = (rng.standard_normal((n, 4)) for n in (2, 5, 5))
    p = rng.permutation(5)
    np.testing.assert_allclose(attention(q, k[p], v[p])[0], attention(q, k, v)[0], atol=1e-12)


def test_zero_fused_values_gives_two_stream_sum(rng):
    q = rng.standard_normal((2, 4))
    ctx = (rng.standard_normal((3, 4)), rng.standard_normal((3, 4)))
    img = (rng.standard_normal((2, 4)), rng.standard_normal((2, 4)))
    zero = (rng.standard_normal((2, 4)), np.zeros((2, 4)))
    o, _ = facial_cross_attention(q, {"ctx": ctx, "img": img, "fused": zero})
    ref = attention(q, *ctx)[0] + attention(q, *img)[0]
    np.testing.assert_allclose(o, ref, atol=1e-12)


def test_attention_width_mismatch(rng):
    with pytest.raises(ValueError):
        facial_cross_attention(np.zeros((1, 4)), {"x": (np.zeros((2, 3)), np.zeros((2, 3)))})


# --- experts and blocks ---------------------------------------------------

def test_zero_inputs_zero_biases_give_zero_output():
    cfg = tiny()
    params = init_params(cfg, 0)
    for name, t in params.tensors.items():
        if name.rsplit(".", 1)[1].startswith("b"):
            t[...] = 0.0
    bundle, inputs = random_inputs(cfg)
    for a in ("id", "sem", "det"):
        getattr(bundle, f"f_{a}")[...] = 0.0
    inputs = CrossAttnInputs(inputs.q, inputs.k_ctx, np.zeros_like(inputs.v_ctx), inputs.k_img,
                             np.zeros_like(inputs.v_img))
    fwd = mofe_forward(bundle, inputs, params)
    for act in fwd.blocks.values():
        assert np.all(act.o == 0.0)


def test_expert_is_identity_when_second_layer_is_zero(rng):
    cfg = tiny(d_id=4, d_sem=4, d_det=4)
    params = init_params(cfg, 1)
    for a in ("id", "sem", "det"):
        params.tensors[f"P_{a}.W"][...] = np.eye(4)
        params.tensors[f"P_{a}.b"][...] = 0.0
        params.tensors[f"block0.E_{a}.W2"][...] = 0.0
        params.tensors[f"block0.E_{a}.b2"][...] = 0.0
    bundle, _ = random_inputs(cfg, seed=2)
    for a, e in zip(("id", "sem", "det"), expert_forward(bundle, params, 0)):
        assert np.array_equal(e, getattr(bundle, f"f_{a}"))


def test_gelu_values():
    np.testing.assert_allclose(gelu(np.array([0.0, 1.0, -1.0])),
                               [0.0, 0.8413447460685429, -0.15865525393145707], atol=1e-15)


def test_forward_deterministic():
    cfg = tiny()
    bundle, inputs = random_inputs(cfg, seed=4)
    a = mofe_forward(bundle, inputs, init_params(cfg, 9))
    b = mofe_forward(bundle, inputs, init_params(cfg, 9))
    for blk in a.blocks:
        assert np.array_equal(a.blocks[blk].o, b.blocks[blk].o)


def test_non_injected_block_raises():
    cfg = tiny()
    params = init_params(cfg, 0)
    bundle, inputs = random_inputs(cfg)
    with pytest.raises(ValueError, match="no facial stream"):
        expert_forward(bundle, params, 1)
    with pytest.raises(ValueError):
        block_forward(project(bundle, params), inputs, params, 5)


def test_injection_layout():
    cfg = tiny()
    fwd = mofe_forward(*random_inputs(cfg), init_params(cfg, 0))
    assert sorted(fwd.blocks) == [0, 2]
    for n, e in [(30, 2), (7, 3), (1, 1), (5, 10)]:
        assert len(MofeConfig(n_blocks=n, inject_every=e).injected_blocks()) == math.ceil(n / e)


def test_wrong_feature_width():
    cfg = tiny()
    bundle, inputs = random_inputs(cfg)
    bundle.f_id = np.zeros((2, 9))
    with pytest.raises(ValueError, match="width"):
        mofe_forward(bundle, inputs, init_params(cfg, 0))


@pytest.mark.parametrize("kw", [{"d_model": 0}, {"gate_kind": "moe"}, {"gate_granularity": "frame"},
                                {"inject_every": 0}])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        tiny(**kw)


# --- backward -------------------------------------------------------------

def test_zero_upstream_gives_zero_gradients():
    cfg = tiny()
    params = init_params(cfg, 0)
    fwd = mofe_forward(*random_inputs(cfg), params)
    g = mofe_backward({b: np.zeros_like(a.o) for b, a in fwd.blocks.items()}, fwd, params)
    assert all(np.all(t == 0) for t in g.params.values())
    assert all(np.all(t == 0) for t in g.features.values())


def test_gate_bias_gradient_sums_to_zero(rng):
    # softmax is shift-invariant, so the gradient w.r.t. the gate logits has zero row sums
    cfg = tiny()
    params = init_params(cfg, 0)
    fwd = mofe_forward(*random_inputs(cfg, seed=3), params)
    g = mofe_backward({b: rng.standard_normal(a.o.shape) for b, a in fwd.blocks.items()}, fwd, params)
    for b in cfg.injected_blocks():
        assert abs(g.params[f"block{b}.G.b"].sum()) < 1e-10


def _numeric_grad(f, arr, h=1e-5):
    out = np.zeros_like(arr)
    flat, g = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return out


@settings(max_examples=6)
@given(st.integers(0, 10_000), st.sampled_from(["linear", "mlp"]), st.sampled_from(["token", "pooled"]))
def test_backward_matches_finite_differences(seed, kind, gran):
    cfg = tiny(gate_kind=kind, gate_granularity=gran)
    params = init_params(cfg, seed)
    bundle, inputs = random_inputs(cfg, seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    upstream = {b: rng.standard_normal((2, cfg.d_model)) for b in cfg.injected_blocks()}

    def loss():
        fwd = mofe_forward(bundle, inputs, params)
        return sum(float((fwd.blocks[b].o * upstream[b]).sum()) for b in upstream)

    g = mofe_backward(upstream, mofe_forward(bundle, inputs, params), params)
    for name, t in params.tensors.items():
        assert relative_error(g.params[name], _numeric_grad(loss, t)) < 1e-4, name
    assert relative_error(g.features["f_det"], _numeric_grad(loss, bundle.f_det)) < 1e-4
    q_total = sum(g.attn[b]["q"] for b in g.attn)
    assert relative_error(q_total, _numeric_grad(loss, inputs.q)) < 1e-4


# --- parameter accounting -------------------------------------------------

def test_expert_param_count_example():
    assert expert_param_count(8, 16) == 280


def test_overhead_matches_shapes_and_halves():
    for kind in ("linear", "mlp"):
        cfg = MofeConfig(d_model=16, d_id=20, d_sem=24, d_det=24, n_blocks=6, gate_kind=kind)
        over = parameter_overhead(cfg, 10**6)
        assert over["mofe_params"] == sum(math.prod(s) for s in param_shapes(cfg).values())
        assert over["mofe_params"] == init_params(cfg).count()
        assert parameter_overhead(cfg, 2 * 10**6)["ratio"] == pytest.approx(over["ratio"] / 2, rel=1e-12)
    with pytest.raises(ValueError):
        parameter_overhead(cfg, 0)


def test_init_bounds():
    cfg = tiny()
    params = init_params(cfg, 0)
    assert np.all(np.abs(params["block0.W_k"]) <= 0.5)
    assert np.all(np.abs(params["P_id.W"]) <= 1 / math.sqrt(5))
