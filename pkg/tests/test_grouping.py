import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agmt import oracles
from agmt import tensor as T
from agmt.errors import DimensionError, NumericError, UsageError
from agmt.grouping import (
    a_grouping_forward,
    flatten_positions,
    init_a_grouping,
    init_m_grouping,
    init_n_grouping,
    inject_fault,
    m_grouping_forward,
    n_grouping_forward,
    normalize_rows,
)
from agmt.tensor import Tensor


def _head(seed=0, c=6, dk=4, dv=5, p=3):
    head = init_a_grouping(seed, c, dk, dv, p)
    rng = np.random.default_rng(seed + 100)
    for t in head.named_parameters().values():
        t.data[...] = rng.normal(size=t.shape)
    return head


def test_matches_loop_oracle():
    head = _head()
    feat = np.random.default_rng(1).normal(size=(3, 4, 6))
    f, a = a_grouping_forward(Tensor(feat), head)
    f_ref, a_ref = oracles.a_grouping_loop(
        feat, head.key_weight.data, head.key_bias.data, head.value_weight.data, head.value_bias.data,
        head.queries.data)
    np.testing.assert_allclose(a.data, a_ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(f.data, f_ref, rtol=0, atol=1e-12)


def test_flatten_is_row_major_w_fastest():
    x = np.arange(2 * 3 * 2, dtype=float).reshape(2, 3, 2)
    flat = flatten_positions(Tensor(x)).data
    for j in range(6):
        np.testing.assert_array_equal(flat[:, j], x[j // 3, j % 3])


def test_shapes_and_unit_rows():
    head = _head(p=4)
    f, a = a_grouping_forward(Tensor(np.random.default_rng(0).normal(size=(2, 5, 5, 6))), head)
    assert f.shape == (2, 4, 5) and a.shape == (2, 4, 25)
    np.testing.assert_allclose(np.linalg.norm(f.data, axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, atol=1e-12)


def test_uniform_attention_reduces_to_mean_pooling():
    head = _head()
    head.queries.data[...] = 0.0
    feat = np.random.default_rng(2).normal(size=(3, 3, 6))
    f, a = a_grouping_forward(Tensor(feat), head, normalize=False)
    np.testing.assert_allclose(a.data, 1.0 / 9.0, atol=1e-15)
    mean_v = (feat.reshape(9, 6) @ head.value_weight.data + head.value_bias.data).mean(axis=0)
    for p in range(3):
        np.testing.assert_allclose(f.data[p], mean_v, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20), h=st.integers(1, 5), w=st.integers(1, 5))
def test_permutation_invariance_property(seed, h, w):
    rng = np.random.default_rng(seed)
    head = _head(seed % 97)
    feat = rng.normal(size=(h, w, 6))
    perm = rng.permutation(h * w)
    shuffled = feat.reshape(h * w, 6)[perm].reshape(h, w, 6)
    f0, a0 = a_grouping_forward(Tensor(feat), head)
    f1, a1 = a_grouping_forward(Tensor(shuffled), head)
    assert np.abs(f0.data - f1.data).max() <= 1e-9
    assert np.abs(a0.data[:, perm] - a1.data).max() <= 1e-15


def test_gradient_through_head_including_queries():
    head = _head(p=2)
    feat = Tensor(np.random.default_rng(3).normal(size=(2, 3, 3, 6)), requires_grad=True)
    probe = Tensor(np.random.default_rng(4).normal(size=(2, 2, 5)))

    def fn():
        f, _ = a_grouping_forward(feat, head)
        return T.sum(T.mul(f, probe))

    params = list(head.named_parameters().values()) + [feat]
    assert T.gradient_check(fn, params) <= 1e-6


def test_channel_mismatch_and_degenerate_norm():
    with pytest.raises(DimensionError):
        a_grouping_forward(Tensor(np.zeros((3, 3, 5))), _head())
    with pytest.raises(NumericError):
        normalize_rows(Tensor(np.zeros((2, 3))))


def test_m_and_n_grouping_shapes():
    feat = Tensor(np.random.default_rng(0).uniform(size=(2, 4, 4, 6)))
    m = m_grouping_forward(feat, init_m_grouping(0, 6, 5, 3))
    n = n_grouping_forward(feat, init_n_grouping(0, 6, 15))
    assert m.shape == (2, 3, 5) and n.shape == (2, 1, 15)
    with pytest.raises(DimensionError):
        n_grouping_forward(feat, init_m_grouping(0, 6, 5, 3))


def test_fault_hook_breaks_row_sums_and_restores():
    head = _head()
    feat = Tensor(np.random.default_rng(5).normal(size=(3, 3, 6)))
    with inject_fault("softmax-axis"):
        _, bad = a_grouping_forward(feat, head)
    _, good = a_grouping_forward(feat, head)
    assert np.abs(bad.data.sum(axis=-1) - 1.0).max() > 1e-3
    np.testing.assert_allclose(good.data.sum(axis=-1), 1.0, atol=1e-12)
    with pytest.raises(UsageError):
        with inject_fault("nonsense"):
            pass
