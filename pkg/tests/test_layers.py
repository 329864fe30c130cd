import numpy as np
import pytest
from hypothesis import given, strategies as st

from ivlab import layers as L
from ivlab import tensor as T
from ivlab.tensor import Tensor


def test_attention_single_key_broadcasts_value():
    r = np.random.default_rng(0)
    q, k, v = Tensor(r.normal(size=(5, 4))), Tensor(r.normal(size=(1, 4))), Tensor(r.normal(size=(1, 4)))
    out = L.attention(q, k, v, heads=2).data
    np.testing.assert_allclose(out, np.repeat(v.data, 5, axis=0), atol=1e-15)


def test_attention_uniform_scores_average_values():
    v = np.random.default_rng(1).normal(size=(6, 4))
    out = L.attention(Tensor(np.zeros((3, 4))), Tensor(np.ones((6, 4))), Tensor(v), heads=2).data
    np.testing.assert_allclose(out, np.broadcast_to(v.mean(0), (3, 4)), atol=1e-14)


def test_attention_gradient_matches_finite_differences():
    r = np.random.default_rng(2)
    x = [r.normal(size=(3, 4)) for _ in range(3)]
    assert T.grad_check(lambda q, k, v: L.attention(q, k, v, 2).sum(), x) < 1e-6


def test_causal_attention_ignores_future():
    r = np.random.default_rng(3)
    P = {}
    L.init_attention(P, "a", 4, r)
    Pt = T.param_tensors(P)
    x = r.normal(size=(5, 4))
    y = x.copy()
    y[3:] += 10.0
    a = L.mha(Tensor(x), Tensor(x), Pt, "a", 2, causal=True).data
    b = L.mha(Tensor(y), Tensor(y), Pt, "a", 2, causal=True).data
    np.testing.assert_allclose(a[:3], b[:3], atol=1e-12)
    assert not np.allclose(a[3:], b[3:])


def test_attention_rejects_bad_heads():
    with pytest.raises(ValueError):
        L.attention(Tensor(np.ones((2, 5))), Tensor(np.ones((2, 5))), Tensor(np.ones((2, 5))), 2)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert not L.layer_norm(Tensor(np.full((1, 2), 7.0)), one, zero).data.any()
    np.testing.assert_allclose(L.layer_norm(Tensor([1.0, 3.0]), one, zero, eps=1e-12).data, [-1, 1], atol=1e-10)


@given(seed=st.integers(0, 2**16))
def test_layer_norm_statistics(seed):
    x = np.random.default_rng(seed).normal(3.0, 5.0, size=(4, 16))
    y = L.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(-1), 1.0, atol=1e-4)


def test_dropout_is_identity_in_eval_and_unbiased_in_train():
    x = Tensor(np.ones((200, 50)))
    assert L.dropout(x, 0.5, None) is x
    y = L.dropout(x, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05


def test_drop_path_drops_whole_samples():
    y = L.drop_path(Tensor(np.ones((64, 3, 2))), 0.5, np.random.default_rng(0)).data
    per = y.reshape(64, -1)
    assert np.all(per.min(1) == per.max(1))


def test_block_gradient():
    r = np.random.default_rng(4)
    P = {}
    L.init_block(P, "b", 4, r)
    x = r.normal(size=(2, 3, 4))
    f = lambda xt: L.block(xt, T.param_tensors(P, ()), "b", 2).sum()
    assert T.grad_check(f, [x]) < 1e-6


def test_block_depth_parses_index():
    assert L.block_depth("mae.blocks.3.attn.q.w", "blocks") == 3
    assert L.block_depth("mae.pos", "blocks") is None
