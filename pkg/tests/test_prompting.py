"""Prefix-tuned attention: equivalences, oracle checks, gradient isolation."""

import math

import numpy as np
import pytest

from multilane import tensor as T
from multilane.backbone import msa
from multilane.errors import ConfigError
from multilane.prompting import make_prompts, prefix_msa, split_prompt
from multilane.tensor import Tensor

from conftest import grad_of

from test_backbone import attention_oracle


def t64(x, rg=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=rg)


def test_absent_prompt_equals_plain_msa():
    rng = np.random.default_rng(0)
    q, k, v = (t64(rng.normal(size=(4, 6))) for _ in range(3))
    a = prefix_msa(None, q, k, v, heads=2)
    b = msa(q, k, v, heads=2)
    assert np.array_equal(a.data, b.data)


def test_negligible_prompt_approximates_plain_msa():
    # zero value rows plus hugely negative key similarity: the prompt gets
    # essentially no attention mass, so the result matches plain msa
    rng = np.random.default_rng(1)
    q = t64(np.abs(rng.normal(size=(4, 6))) + 0.1)  # positive queries
    k = t64(rng.normal(size=(4, 6)))
    v = t64(rng.normal(size=(4, 6)))
    prompt = t64(np.concatenate([np.full((2, 6), -1e3), np.zeros((2, 6))], axis=0))
    with_prompt = prefix_msa(prompt, q, k, v, heads=2)
    plain = msa(q, k, v, heads=2)
    assert np.max(np.abs(with_prompt.data - plain.data)) < 1e-4


def test_prefix_msa_matches_three_key_oracle():
    # n=2 queries, L_p=2 (1 key + 1 value row), hand-sized single head
    rng = np.random.default_rng(2)
    q = t64(rng.normal(size=(2, 2)))
    k = t64(rng.normal(size=(2, 2)))
    v = t64(rng.normal(size=(2, 2)))
    prompt = t64(rng.normal(size=(2, 2)))
    p_k, p_v = prompt.data[:1], prompt.data[1:]
    got = prefix_msa(prompt, q, k, v, heads=1)
    expect = attention_oracle(q.data,
                              np.concatenate([p_k, k.data]),
                              np.concatenate([p_v, v.data]), heads=1)
    assert np.allclose(got.data, expect, atol=1e-12)


def test_output_length_equals_query_length():
    rng = np.random.default_rng(3)
    q = t64(rng.normal(size=(5, 4)))
    k = t64(rng.normal(size=(9, 4)))
    v = t64(rng.normal(size=(9, 4)))
    for rows in (2, 4, 8):
        prompt = t64(rng.normal(size=(rows, 4)))
        out = prefix_msa(prompt, q, k, v, heads=2)
        assert out.shape == (5, 4)


def test_odd_prompt_length_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        make_prompts(3, 4, (1,), rng)
    with pytest.raises(ConfigError):
        prefix_msa(t64(np.zeros((3, 4))), t64(np.zeros((2, 4))),
                   t64(np.zeros((2, 4))), t64(np.zeros((2, 4))), heads=2)


def test_make_prompts_cover_exactly_prompted_layers():
    rng = np.random.default_rng(4)
    prompts = make_prompts(6, 8, (1, 3, 5), rng)
    assert sorted(prompts) == [1, 3, 5]
    for p in prompts.values():
        assert p.shape == (6, 8) and p.requires_grad
    pk, pv = split_prompt(prompts[1])
    assert pk.shape == (3, 8) and pv.shape == (3, 8)


def test_gradients_reach_current_prompt_only():
    rng = np.random.default_rng(5)
    current = t64(rng.normal(size=(4, 4)), rg=True)
    other = t64(rng.normal(size=(4, 4)), rg=True)  # another task's prompt, unused
    q = t64(rng.normal(size=(3, 4)))
    k = t64(rng.normal(size=(3, 4)))
    v = t64(rng.normal(size=(3, 4)))

    def build():
        return T.mean(prefix_msa(current, q, k, v, heads=2))

    grads = grad_of(build, [current, other])
    assert grads[0] is not None and np.any(grads[0] != 0)
    assert grads[1] is None


def test_value_scaling_bounded_by_prompt_mass():
    # zeroing p_V moves the output by at most (prompt attention mass) x max||v||
    rng = np.random.default_rng(6)
    for trial in range(10):
        d, heads = 4, 2
        hd = d // heads
        q = rng.normal(size=(3, d))
        k = rng.normal(size=(5, d))
        v = rng.normal(size=(5, d))
        p = rng.normal(size=(4, d))
        p_zero_v = np.concatenate([p[:2], np.zeros((2, d))], axis=0)
        a = prefix_msa(t64(p), t64(q), t64(k), t64(v), heads=heads).data
        b = prefix_msa(t64(p_zero_v), t64(q), t64(k), t64(v), heads=heads).data
        # per head, recompute the attention mass on prompt positions
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            kk = np.concatenate([p[:2], k])[:, sl]
            scores = q[:, sl] @ kk.T / math.sqrt(hd)
            ex = np.exp(scores - scores.max(axis=1, keepdims=True))
            alpha = ex / ex.sum(axis=1, keepdims=True)
            prompt_mass = alpha[:, :2].sum(axis=1)
            vmax = np.abs(p[2:, sl]).max()
            diff = np.abs(a[:, sl] - b[:, sl]).max(axis=1)
            assert np.all(diff <= prompt_mass * vmax + 1e-9)
