import numpy as np
import pytest

import oracles
from unifield.aggregation import SemanticAggregation, aggregate
from unifield.autodiff import Tensor, check_gradients, sum as tsum
from unifield.geometry import farthest_point_sampling


def _shake(module, rng, scale=0.3):
    for _, p in module.named_parameters():
        p.data = p.data + rng.normal(scale=scale, size=p.shape)


def test_slots_sit_on_fps_points(rng):
    agg = SemanticAggregation(4, rng, k=4)
    p, x = rng.normal(size=(20, 3)), Tensor(rng.normal(size=(20, 4)))
    state = agg(x, p, 5)
    assert state.features.shape == (5, 4)
    np.testing.assert_array_equal(state.index, farthest_point_sampling(p, 5))
    np.testing.assert_array_equal(state.positions, p[state.index])


def test_closed_update_gate_and_zero_ffn_return_centre_features(rng):
    agg = SemanticAggregation(3, rng, k=4)
    b = agg.gru.b_input.data.copy()
    b[3:6] = -40.0
    agg.gru.b_input.data = b
    agg.ffn.fc2.weight.data = np.zeros_like(agg.ffn.fc2.weight.data)
    agg.ffn.fc2.bias.data = np.zeros_like(agg.ffn.fc2.bias.data)
    p, x = rng.normal(size=(10, 3)), rng.uniform(-1, 1, (10, 3))
    state = agg(Tensor(x), p, 4)
    np.testing.assert_allclose(state.features.data, x[state.index], atol=1e-12, rtol=0)


def test_matches_loop_oracle_six_points_two_slots():
    rng = np.random.default_rng(3)
    agg = SemanticAggregation(2, rng, k=3)
    _shake(agg, rng)
    p = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0.5, 0], [0, 1.5, 0], [3, 3, 0], [0.5, 0.5, 1]])
    x = rng.normal(size=(6, 2))
    got = agg(Tensor(x), p, 2).features.data

    # FPS by hand: seed 0, then the point farthest from it
    far = max(range(6), key=lambda i: (oracles.sq_dist(p[i], p[0]), -i))
    centres = [0, far]
    keys = [oracles.linear(list(r), agg.key) for r in x]
    vals = [oracles.linear(list(r), agg.value) for r in x]
    for s, c in enumerate(centres):
        nb = oracles.nearest(p[c], p, 3)
        q = oracles.linear(list(x[c]), agg.query)
        y = oracles.attend(q, list(p[c]), nb, [list(p[j]) for j in nb],
                           [keys[j] for j in nb], [vals[j] for j in nb], agg.pos, agg.gamma)
        h = oracles.gru(list(x[c]), y, agg.gru)
        f = oracles.ffn(h, agg.ffn)
        np.testing.assert_allclose(got[s], [h[i] + f[i] for i in range(2)], rtol=0, atol=1e-12)


@pytest.mark.parametrize("iterations", [1, 3])
def test_gru_update_count(rng, iterations):
    agg = SemanticAggregation(3, rng, k=4, iterations=iterations)
    p = rng.normal(size=(9, 3))
    state, weights = agg(Tensor(rng.normal(size=(9, 3))), p, 3, return_weights=True)
    assert agg.gru.calls == iterations
    assert len(weights) == iterations


def test_feature_space_neighbours_run(rng):
    agg = SemanticAggregation(3, rng, k=4, iterations=2, neighbor_space="features")
    p = rng.normal(size=(9, 3))
    assert agg(Tensor(rng.normal(size=(9, 3))), p, 3).features.shape == (3, 3)


def test_k_clamped_to_point_count(rng):
    agg = SemanticAggregation(2, rng, k=16)
    p = rng.normal(size=(5, 3))
    _, weights = agg(Tensor(rng.normal(size=(5, 2))), p, 2, return_weights=True)
    assert weights[0].shape == (2, 5, 2)


def test_argument_validation(rng):
    agg = SemanticAggregation(2, rng, k=2)
    p, x = rng.normal(size=(4, 3)), Tensor(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        agg(x, p, 5)
    with pytest.raises(ValueError):
        agg(Tensor(np.zeros((3, 2))), p, 2)
    with pytest.raises(ValueError):
        aggregate(x, p, 2, agg, iterations=0)
    with pytest.raises(ValueError):
        SemanticAggregation(2, rng, neighbor_space="bogus")


def test_gradcheck_eight_points_three_slots(rng):
    agg = SemanticAggregation(3, rng, k=4)
    _shake(agg, rng, 0.1)
    p = rng.normal(size=(8, 3))
    x = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 3)))
    err = check_gradients(lambda: tsum(agg(x, p, 3).features * w), [x] + agg.parameters())
    assert err < 1e-4
