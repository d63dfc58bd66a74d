import math

import numpy as np
import pytest

from supra import tensor as T
from supra.gradcheck import check_tensors
from supra.model import (ModelConfig, forward_parallel, forward_recurrent, generate, init_model, init_model_state,
                         param_shapes, parse_sampler, recurrent_logits)

from conftest import perturbed_model, tiny_config

KINDS = ["softmax", "supra", "t2r", "elu1"]


def test_param_shapes_cover_all_layers():
    cfg = tiny_config("supra")
    shapes = param_shapes(cfg)
    assert shapes["tok_emb"] == (32, 16) and shapes["lm_head"] == (16, 32)
    assert shapes["layers.1.attn.kernel.weight"] == (2, 8, 8)
    assert shapes["layers.0.attn.gn.weight"] == (16,)
    assert "layers.0.attn.kernel.weight" not in param_shapes(tiny_config("softmax"))


def test_config_round_trip():
    cfg = tiny_config("supra")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_head_gives_uniform_logits():
    m = init_model(tiny_config("supra"), seed=0, zero_head=True)
    logits = forward_parallel(m, np.arange(10)).data
    assert np.array_equal(logits, np.zeros((10, 32)))


@pytest.mark.parametrize("kind", KINDS)
def test_causality(kind):
    m = perturbed_model(kind)
    toks = np.arange(12) % 32
    a = forward_parallel(m, toks).data
    toks2 = toks.copy()
    toks2[7] = 31
    b = forward_parallel(m, toks2).data
    assert np.array_equal(a[:7], b[:7])
    assert not np.allclose(a[7:], b[7:])


def test_random_init_cross_entropy_near_log_vocab():
    cfg = ModelConfig(max_seq=64)
    m = init_model(cfg, seed=0)
    toks = np.random.default_rng(0).integers(0, 259, (4, 33))
    loss = T.cross_entropy(forward_parallel(m, toks[:, :-1]), toks[:, 1:]).item()
    assert abs(loss - math.log(259)) / math.log(259) <= 0.05


@pytest.mark.parametrize("kind", KINDS)
def test_recurrent_matches_parallel_24_tokens(kind):
    m = perturbed_model(kind)
    toks = np.random.default_rng(1).integers(0, 32, 24)
    par = forward_parallel(m, toks).data
    rec = recurrent_logits(m, toks)
    tol = 1e-10 if kind == "softmax" else 1e-6
    assert np.abs(par - rec).max() <= tol


@pytest.mark.parametrize("kind", ["supra", "t2r", "elu1"])
def test_chunked_model_matches_parallel(kind):
    m = perturbed_model(kind)
    toks = np.random.default_rng(2).integers(0, 32, (2, 30))
    a = forward_parallel(m, toks).data
    b = forward_parallel(m, toks, mode="chunked", chunk=7).data
    assert np.abs(a - b).max() <= 1e-10


def test_start_pos_continuation_matches_full_sequence():
    m = perturbed_model("supra")
    toks = np.random.default_rng(3).integers(0, 32, 20)
    full = forward_parallel(m, toks).data
    st = init_model_state(m)
    for t in toks[:12]:
        _, st = forward_recurrent(m, st, int(t))
    tail = []
    for t in toks[12:]:
        lg, st = forward_recurrent(m, st, int(t))
        tail.append(lg)
    assert np.abs(np.stack(tail) - full[12:]).max() <= 1e-8


def test_state_size_10_vs_1000_tokens():
    for kind, ratio in (("supra", 1), ("softmax", 100)):
        m = init_model(tiny_config(kind, max_seq=16), seed=0)
        st = init_model_state(m)
        sizes = {}
        for i in range(1000):
            _, st = forward_recurrent(m, st, i % 32)
            if i + 1 in (10, 1000):
                sizes[i + 1] = st.numel()
        assert sizes[1000] == ratio * sizes[10]


def test_recurrent_does_not_mutate_state():
    m = perturbed_model("supra")
    st = init_model_state(m)
    _, st1 = forward_recurrent(m, st, 3)
    assert st.pos == 0 and st1.pos == 1
    assert all(not layer.s.any() for layer in st.layers)


def test_token_out_of_range():
    m = perturbed_model("supra")
    with pytest.raises(IndexError):
        forward_parallel(m, [0, 32])


@pytest.mark.parametrize("kind", ["softmax", "supra"])
def test_model_gradients_match_finite_differences(kind):
    m = perturbed_model(kind, vocab=32)
    toks = np.random.default_rng(4).integers(0, 32, (2, 7))
    errs = check_tensors(lambda: T.cross_entropy(forward_parallel(m, toks[:, :-1]), toks[:, 1:]), m.params,
                         max_entries=12)
    assert max(errs.values()) <= 1e-4, {k: v for k, v in errs.items() if v > 1e-4}


# -- generation -----------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_greedy_recurrent_equals_parallel(kind):
    m = perturbed_model(kind, scale=0.3)
    for prompt in ([1], [5, 6, 7], [31, 0, 2, 2, 9]):
        a = generate(m, prompt, 12, "greedy", "recurrent")
        b = generate(m, prompt, 12, "greedy", "parallel")
        assert a == b


def test_generation_zero_new_tokens_echoes_prompt():
    assert generate(perturbed_model("supra"), [3, 4], 0) == [3, 4]


def test_greedy_is_deterministic():
    m = perturbed_model("supra", scale=0.3)
    assert generate(m, [1, 2], 10) == generate(m, [1, 2], 10)


def test_temperature_sampling_reproducible_and_zero_is_greedy():
    m = perturbed_model("supra", scale=0.3)
    s = parse_sampler("temperature:1.5:7")
    assert generate(m, [1], 15, s) == generate(m, [1], 15, s)
    assert generate(m, [1], 15, parse_sampler("temperature:0:3")) == generate(m, [1], 15, "greedy")


def test_bad_sampler_and_empty_prompt():
    with pytest.raises(ValueError):
        parse_sampler("topk:5")
    with pytest.raises(ValueError):
        generate(perturbed_model("supra"), [], 3)
