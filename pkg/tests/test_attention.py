from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from supra import attention as A
from supra import tensor as T
from supra.tensor import Tensor

import oracles


def rand_qkv(rng, h, s, d):
    return [Tensor(rng.normal(size=(h, s, d))) for _ in range(3)]


def rand_kmlp(rng, h, d):
    return A.KernelMLP(Tensor(np.eye(d) + 0.3 * rng.normal(size=(h, d, d))), Tensor(0.1 * rng.normal(size=(h, d))))


CONFIGS = {
    "supra": lambda h, dh: A.supra_config(h * dh, h),
    "t2r": lambda h, dh: A.t2r_config(h * dh, h),
    "elu1": lambda h, dh: A.elu1_config(h * dh, h),
    "supra_retnet": lambda h, dh: A.supra_config(h * dh, h, decay="retnet"),
    "elu1_rope_sum": lambda h, dh: A.preset("elu1", h * dh, h, rope_base=100.0, normalizer="sum_clamp",
                                           decay="lightning"),
}


# -- config ---------------------------------------------------------------

def test_config_validation():
    with pytest.raises(A.AttentionConfigError):
        A.AttentionConfig(d_model=10, n_heads=4)
    with pytest.raises(A.AttentionConfigError):
        A.AttentionConfig(kernel="cosine")
    with pytest.raises(A.AttentionConfigError):
        A.AttentionConfig(d_model=6, n_heads=2, rope_base=1e4)  # odd d_head


def test_config_dict_round_trip():
    cfg = A.supra_config(32, 4, decay="retnet")
    assert A.AttentionConfig.from_dict(cfg.to_dict()) == cfg


def test_default_scale_is_inverse_sqrt_head_dim():
    assert A.supra_config(64, 4).scale == 16 ** -0.5
    assert replace(A.supra_config(64, 4), qk_scale=1.0).scale == 1.0


# -- decay ----------------------------------------------------------------

def test_lightning_schedule_values():
    g = A.decay_schedule("lightning", 8)
    assert np.allclose(g, np.exp(-(2.0 ** (-8.0 * np.arange(1, 9) / 8))))
    assert abs(g.max() ** 2048 - 3.3546e-4) <= 1e-6


def test_retnet_schedule_values():
    assert np.allclose(A.decay_schedule("retnet", 4), 1 - 2.0 ** (-5 - np.arange(4)))


def test_decay_mask_is_causal_powers():
    m = A.decay_mask(np.array([0.5]), 4)[0]
    assert np.allclose(m, np.tril(0.5 ** (np.arange(4)[:, None] - np.arange(4)[None, :])))


def test_decay_impulse_weight_2048_back():
    # identity kernel, no rope: an impulse key 2048 steps back is weighted by gamma^2048
    g = A.decay_schedule("lightning", 8)
    cfg = replace(A.AttentionConfig(d_model=16, n_heads=8, kernel="identity", normalizer="group_norm",
                                    decay="lightning", rope_base=None), qk_scale=1.0)
    state = A.RecurrentState.zeros(cfg)
    one = np.zeros((8, 2))
    one[:, 0] = 1.0
    _, state = A.recurrent_step(cfg, state, one, one, one)
    zero = np.zeros((8, 2))
    for _ in range(2047):
        _, state = A.recurrent_step(cfg, state, zero, zero, zero)
    out, _ = A.recurrent_step(cfg, state, one, zero, zero)
    assert abs(out[7, 0] - 3.3546e-4) <= 1e-6
    assert np.allclose(out[:, 0], g ** 2048, rtol=1e-9, atol=1e-300)


# -- kernels and rope -----------------------------------------------------

def test_elu1_on_zeros_is_ones():
    assert np.array_equal(A.apply_kernel(A.elu1_config(8, 2), Tensor(np.zeros((3, 4)))).data, np.ones((3, 4)))


def test_relu_mlp_identity_init():
    k = A.KernelMLP.identity(1, 2)
    out = A.apply_kernel(A.supra_config(2, 1, rope_base=None), Tensor(np.array([[-1.0, 2.0]])), k)
    assert np.array_equal(out.data, [[0.0, 2.0]])


def test_elu1_strictly_positive(rng):
    x = rng.uniform(-10, 10, size=(4, 50, 8))
    assert (A.apply_kernel(A.elu1_config(32, 4), Tensor(x)).data > 0).all()


def test_rope_position_zero_is_identity(rng):
    x = rng.normal(size=(5, 8))
    assert np.array_equal(A.rope(Tensor(x[:1]), 0).data, x[:1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2**31 - 1))
def test_rope_preserves_norm(pos, seed):
    x = np.random.default_rng(seed).normal(size=(1, 16))
    y = A.rope(Tensor(x), pos).data
    assert abs(np.linalg.norm(y) - np.linalg.norm(x)) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 5000), st.integers(0, 2**31 - 1))
def test_rope_relative_position_identity(i, j, delta, seed):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))

    def dot(a, b):
        return float((A.rope(Tensor(q), a).data @ A.rope(Tensor(k), b).data.T)[0, 0])

    assert abs(dot(i, j) - dot(i + delta, j + delta)) <= 1e-9


def test_rope_matches_complex_rotation(rng):
    x = rng.normal(size=(6, 8))
    got = A.rope(Tensor(x), 3, 100.0).data
    ref = np.stack([oracles.rotate(x[t], 3 + t, 100.0) for t in range(6)])
    assert np.abs(got - ref).max() <= 1e-12


# -- softmax --------------------------------------------------------------

def test_softmax_single_token_returns_v(rng):
    q, k, v = (Tensor(rng.normal(size=(1, 4))) for _ in range(3))
    assert np.array_equal(A.softmax_attention(q, k, v).data, v.data)


def test_softmax_identical_keys_is_running_mean(rng):
    q = Tensor(rng.normal(size=(6, 4)))
    k = Tensor(np.tile(rng.normal(size=(1, 4)), (6, 1)))
    v = rng.normal(size=(6, 4))
    out = A.softmax_attention(q, k, Tensor(v)).data
    assert np.allclose(out, np.cumsum(v, 0) / np.arange(1, 7)[:, None], atol=1e-14)


@pytest.mark.parametrize("seq", [1, 2, 8, 16])
def test_softmax_matches_brute_force(rng, seq):
    q, k, v = (rng.normal(size=(seq, 4)) for _ in range(3))
    got = A.softmax_attention(Tensor(q), Tensor(k), Tensor(v), scale=0.5).data
    assert np.abs(got - oracles.softmax_attention(q, k, v, 0.5)).max() <= 1e-12


# -- linear: parallel -----------------------------------------------------

def test_linear_single_token_sum_clamp_returns_v(rng):
    cfg = A.AttentionConfig(d_model=4, n_heads=1, kernel="identity", normalizer="sum_clamp", decay="none",
                            rope_base=None)
    q, k, v = (Tensor(np.abs(rng.normal(size=(1, 4))) + 0.1) for _ in range(3))
    assert np.allclose(A.linear_attention_parallel(cfg, q, k, v).data, v.data, atol=1e-15)


@pytest.mark.parametrize("name", sorted(CONFIGS))
def test_linear_parallel_matches_brute_force(rng, name):
    h, dh, s = 2, 8, 32
    cfg = CONFIGS[name](h, dh)
    q, k, v = rand_qkv(rng, h, s, dh)
    km = rand_kmlp(rng, h, dh)
    got = A.linear_attention_parallel(cfg, q, k, v, km, start_pos=5).data
    g = cfg.gammas()
    for head in range(h):
        ref = oracles.linear_attention(q.data[head], k.data[head], v.data[head], cfg.kernel, g[head], cfg.scale,
                                       cfg.rope_base, cfg.normalizer == "sum_clamp", km.weight.data[head],
                                       km.bias.data[head], start_pos=5)
        assert np.abs(got[head] - ref).max() <= 1e-10


def test_linear_single_head_view_matches_multihead(rng):
    cfg = A.supra_config(16, 2)
    q, k, v = rand_qkv(rng, 2, 9, 8)
    km = rand_kmlp(rng, 2, 8)
    full = A.linear_attention_parallel(cfg, q, k, v, km).data
    one = A.linear_attention_parallel(cfg, Tensor(q.data[1]), Tensor(k.data[1]), Tensor(v.data[1]), km, head=1).data
    assert np.allclose(one, full[1], atol=1e-14)


def test_linear_rejects_softmax_config(rng):
    q, k, v = rand_qkv(rng, 2, 3, 4)
    with pytest.raises(A.AttentionConfigError):
        A.linear_attention_parallel(A.softmax_config(8, 2), q, k, v)


def test_capture_is_causal_and_reconstructs_output(rng):
    cfg = A.supra_config(16, 2)
    q, k, v = rand_qkv(rng, 2, 10, 8)
    km = rand_kmlp(rng, 2, 8)
    cap = []
    out = A.linear_attention_parallel(cfg, q, k, v, km, capture=cap).data
    a = cap[0]
    assert np.array_equal(np.triu(a, 1), np.zeros_like(a))
    assert np.abs(a @ v.data - out).max() <= 1e-8


# -- linear: chunked ------------------------------------------------------

@pytest.mark.parametrize("name", sorted(CONFIGS))
def test_chunk_equal_to_seq_is_exactly_parallel(rng, name):
    cfg = CONFIGS[name](2, 4)
    q, k, v = rand_qkv(rng, 2, 12, 4)
    km = rand_kmlp(rng, 2, 4)
    p = A.linear_attention_parallel(cfg, q, k, v, km, start_pos=2).data
    c = A.linear_attention_chunked(cfg, q, k, v, km, start_pos=2, chunk=12).data
    assert np.array_equal(p, c)


@pytest.mark.parametrize("name", sorted(CONFIGS))
def test_chunk_one_matches_recurrent(rng, name):
    cfg = CONFIGS[name](2, 4)
    q, k, v = rand_qkv(rng, 2, 12, 4)
    km = rand_kmlp(rng, 2, 4)
    c = A.linear_attention_chunked(cfg, q, k, v, km, chunk=1).data
    r = A.linear_attention_recurrent(cfg, q, k, v, km)[0].data
    assert np.abs(c - r).max() <= 1e-12


@pytest.mark.parametrize("name", sorted(CONFIGS))
def test_chunked_matches_parallel_seq64(rng, name):
    cfg = CONFIGS[name](2, 8)
    q, k, v = rand_qkv(rng, 2, 64, 8)
    km = rand_kmlp(rng, 2, 8)
    p = A.linear_attention_parallel(cfg, q, k, v, km).data
    c = A.linear_attention_chunked(cfg, q, k, v, km, chunk=16).data
    assert np.abs(p - c).max() <= 1e-8


def test_chunked_gradients_match_parallel(rng):
    cfg = A.supra_config(8, 2)
    q, k, v = (Tensor(t.data, requires_grad=True) for t in rand_qkv(rng, 2, 11, 4))
    km = rand_kmlp(rng, 2, 4)
    km.weight.requires_grad = True
    leaves = [q, k, v, km.weight]
    w = rng.normal(size=(2, 11, 4))

    def grads(fn):
        for t in leaves:
            t.grad = None
        T.tsum(fn() * w).backward()
        return [t.grad.copy() for t in leaves]

    gp = grads(lambda: A.linear_attention_parallel(cfg, q, k, v, km))
    gc = grads(lambda: A.linear_attention_chunked(cfg, q, k, v, km, chunk=4))
    for a, b in zip(gp, gc):
        assert np.abs(a - b).max() <= 1e-10


# -- recurrent ------------------------------------------------------------

def test_first_step_returns_v(rng):
    cfg = A.AttentionConfig(d_model=4, n_heads=1, kernel="identity", normalizer="sum_clamp", decay="none",
                            rope_base=None)
    q, k, v = (np.abs(rng.normal(size=(1, 4))) + 0.1 for _ in range(3))
    out, st = A.recurrent_step(cfg, A.RecurrentState.zeros(cfg), q, k, v)
    assert np.allclose(out, v, atol=1e-15) and st.pos == 1


def test_zero_key_leaves_state_unchanged(rng):
    cfg = A.AttentionConfig(d_model=8, n_heads=2, kernel="identity", normalizer="sum_clamp", decay="none",
                            rope_base=None)
    st0 = A.RecurrentState.zeros(cfg)
    _, st1 = A.recurrent_step(cfg, st0, rng.normal(size=(2, 4)), np.zeros((2, 4)), rng.normal(size=(2, 4)))
    assert np.array_equal(st1.s, st0.s) and np.array_equal(st1.z, st0.z) and st1.pos == 1


def test_recurrent_step_is_pure(rng):
    cfg = A.supra_config(8, 2)
    st0 = A.RecurrentState.zeros(cfg)
    A.recurrent_step(cfg, st0, *(rng.normal(size=(2, 4)) for _ in range(3)), A.KernelMLP.identity(2, 4))
    assert not st0.s.any() and st0.pos == 0


@pytest.mark.parametrize("name", sorted(CONFIGS))
def test_recurrent_matches_parallel_32_steps(rng, name):
    cfg = CONFIGS[name](2, 8)
    q, k, v = rand_qkv(rng, 2, 32, 8)
    km = rand_kmlp(rng, 2, 8)
    p = A.linear_attention_parallel(cfg, q, k, v, km).data
    r, st = A.linear_attention_recurrent(cfg, q, k, v, km)
    assert np.abs(p - r.data).max() <= 1e-8 and st.pos == 32


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(sorted(CONFIGS)), st.sampled_from([1, 2, 17, 64]), st.sampled_from([2, 4, 8]),
       st.integers(1, 20), st.integers(0, 50), st.integers(0, 2**31 - 1))
def test_three_formulations_agree(name, seq, dh, chunk, start, seed):
    rng = np.random.default_rng(seed)
    cfg = CONFIGS[name](2, dh)
    q, k, v = rand_qkv(rng, 2, seq, dh)
    km = rand_kmlp(rng, 2, dh)
    p = A.linear_attention_parallel(cfg, q, k, v, km, start_pos=start).data
    c = A.linear_attention_chunked(cfg, q, k, v, km, start_pos=start, chunk=chunk).data
    r = A.linear_attention_recurrent(cfg, q, k, v, km, state=replace(A.RecurrentState.zeros(cfg), pos=start))[0].data
    assert np.abs(p - c).max() <= 1e-8 and np.abs(p - r).max() <= 1e-8


def test_state_size_constant():
    cfg = A.supra_config(16, 2)
    assert A.RecurrentState.zeros(cfg).numel() == 2 * 8 * 8
    assert A.RecurrentState.zeros(A.t2r_config(16, 2)).numel() == 2 * 8 * 8 + 2 * 8


# -- block ----------------------------------------------------------------

def block_params(rng, cfg, scale=0.3):
    shapes = A.attention_param_shapes(cfg)
    p = {n: Tensor(rng.normal(0, scale, s)) for n, s in shapes.items()}
    if "kernel.weight" in p:
        p["kernel.weight"] = Tensor(np.eye(cfg.d_head) + 0.2 * rng.normal(size=shapes["kernel.weight"]))
    if "gn.weight" in p:
        p["gn.weight"] = Tensor(np.ones(cfg.d_model))
        p["gn.bias"] = Tensor(np.zeros(cfg.d_model))
    return p


def test_softmax_block_matches_reference(rng):
    cfg = A.softmax_config(16, 2)
    p = block_params(rng, cfg)
    x = rng.normal(size=(9, 16))
    got, _ = A.multihead_attention_block(cfg, p, Tensor(x))
    ref = oracles.multihead_softmax(x, *(p[n].data for n in ("wq", "wk", "wv", "wo")), 2, 1e4)
    assert np.abs(got.data - ref).max() <= 1e-10


@pytest.mark.parametrize("kind", ["supra", "t2r", "softmax"])
def test_block_parallel_vs_recurrent(rng, kind):
    cfg = A.preset(kind, 16, 2)
    p = block_params(rng, cfg)
    x = Tensor(rng.normal(size=(16, 16)))
    par, _ = A.multihead_attention_block(cfg, p, x)
    rec, st = A.multihead_attention_block(cfg, p, x, mode="recurrent", state=A.init_state(cfg))
    assert np.abs(par.data - rec.data).max() <= 1e-8
    assert st.pos == 16


def test_group_norm_absorbs_value_scale(rng):
    cfg = replace(A.supra_config(16, 2), gn_eps=1e-12)
    p = block_params(rng, cfg)
    x = Tensor(rng.normal(size=(7, 16)))
    a, b = [], []
    A.multihead_attention_block(cfg, p, x, pre_output=a)
    p2 = dict(p, wv=Tensor(2.0 * p["wv"].data))
    A.multihead_attention_block(cfg, p2, x, pre_output=b)
    assert np.allclose(a[0], b[0], atol=1e-6)


def test_block_batched_matches_unbatched(rng):
    cfg = A.supra_config(16, 2)
    p = block_params(rng, cfg)
    x = rng.normal(size=(3, 6, 16))
    batched, _ = A.multihead_attention_block(cfg, p, Tensor(x))
    for i in range(3):
        one, _ = A.multihead_attention_block(cfg, p, Tensor(x[i]))
        assert np.allclose(batched.data[i], one.data, atol=1e-13)


def test_block_recurrent_needs_state(rng):
    cfg = A.supra_config(16, 2)
    with pytest.raises(ValueError):
        A.multihead_attention_block(cfg, block_params(rng, cfg), Tensor(np.zeros((2, 16))), mode="recurrent")
