import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from unifield.attention import PointTransformerBlock, VectorSelfAttention, relative_positions
from unifield.autodiff import Tensor, check_gradients, sum as tsum
from unifield.geometry import knn


def _hand_set(module):
    """Deterministic, non-trivial parameter values independent of any RNG."""
    for i, (_, p) in enumerate(module.named_parameters()):
        n = p.data.size
        p.data = (np.sin(np.arange(n) * 0.7 + i) * 0.5).reshape(p.shape).astype(p.dtype)


def test_relative_positions():
    p = np.array([[0.0, 0, 0], [1, 2, 3]])
    rel = relative_positions(p, p, np.array([[1], [0]]))
    np.testing.assert_array_equal(rel, [[[-1, -2, -3]], [[1, 2, 3]]])


def test_single_neighbour_collapses_to_value_plus_encoding(rng):
    attn = VectorSelfAttention(4, rng)
    _hand_set(attn)
    p = rng.normal(size=(5, 3))
    x = Tensor(rng.normal(size=(5, 4)))
    nbr = knn(p, p, 2)[:, 1:]  # one neighbour, not self
    y, w = attn(x, p, nbr, return_weights=True)
    np.testing.assert_array_equal(w.data, np.ones_like(w.data))
    v = attn.value(x).data[nbr[:, 0]]
    delta = attn.pos(Tensor(relative_positions(p, p, nbr))).data[:, 0]
    np.testing.assert_allclose(y.data, v + delta, atol=1e-12)


def test_matches_loop_oracle_on_three_points():
    rng = np.random.default_rng(0)
    attn = VectorSelfAttention(2, rng)
    _hand_set(attn)
    p = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 2.0, 0]])
    xs = np.array([[0.5, -1.0], [1.5, 0.25], [-0.75, 0.5]])
    nbr = knn(p, p, 2)
    y = attn(Tensor(xs), p, nbr).data
    q = [oracles.linear(list(r), attn.query) for r in xs]
    keys = [oracles.linear(list(r), attn.key) for r in xs]
    vals = [oracles.linear(list(r), attn.value) for r in xs]
    for i in range(3):
        # neighbours found independently by the loop oracle
        nb = oracles.nearest(p[i], p, 2)
        expect = oracles.attend(q[i], list(p[i]), nb, [list(p[j]) for j in nb],
                                [keys[j] for j in nb], [vals[j] for j in nb], attn.pos, attn.gamma)
        np.testing.assert_allclose(y[i], expect, rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_weights_normalized_per_channel(seed, k):
    rng = np.random.default_rng(seed)
    attn = VectorSelfAttention(3, rng)
    p = rng.normal(size=(8, 3))
    _, w = attn(Tensor(rng.normal(size=(8, 3))), p, knn(p, p, k), return_weights=True)
    assert np.all(w.data >= 0)
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-12)


def test_block_is_permutation_equivariant(rng):
    block = PointTransformerBlock(4, rng)
    _hand_set(block)
    p, x = rng.normal(size=(12, 3)), rng.normal(size=(12, 4))
    perm = rng.permutation(12)
    y = block(Tensor(x), p, knn(p, p, 4)).data
    y_perm = block(Tensor(x[perm]), p[perm], knn(p[perm], p[perm], 4)).data
    np.testing.assert_allclose(y_perm, y[perm], rtol=0, atol=1e-12)


@pytest.mark.parametrize("norm", [False, True])
def test_block_with_zeroed_branches_is_identity(rng, norm):
    block = PointTransformerBlock(4, rng, norm=norm)
    for lin in (block.attn.value, block.attn.pos.fc2, block.ffn.fc2):
        lin.weight.data = np.zeros_like(lin.weight.data)
        lin.bias.data = np.zeros_like(lin.bias.data)
    p, x = rng.normal(size=(6, 3)), rng.normal(size=(6, 4))
    np.testing.assert_array_equal(block(Tensor(x), p, knn(p, p, 3)).data, x)


def test_block_preserves_shape_and_dtype(rng):
    block = PointTransformerBlock(8, rng, dtype=np.float32)
    p = rng.normal(size=(10, 3))
    y = block(Tensor(rng.normal(size=(10, 8)).astype(np.float32)), p, knn(p, p, 4))
    assert y.shape == (10, 8) and y.dtype == np.float32


def test_bad_neighbour_indices(rng):
    attn = VectorSelfAttention(2, rng)
    p = rng.normal(size=(3, 3))
    with pytest.raises(IndexError):
        attn(Tensor(np.zeros((3, 2))), p, np.array([[0], [1], [3]]))
    with pytest.raises(ValueError):
        attn(Tensor(np.zeros((3, 2))), p, np.array([[0], [1]]))


def test_block_gradcheck(rng):
    block = PointTransformerBlock(3, rng)
    _hand_set(block)
    p = rng.normal(size=(6, 3))
    x = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(6, 3)))
    nbr = knn(p, p, 3)
    assert check_gradients(lambda: tsum(block(x, p, nbr) * w), [x] + block.parameters()) < 1e-4
