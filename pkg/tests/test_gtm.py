import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nhac.errors import InvalidConfigError, InvalidInputError
from nhac.gtm import (
    build_graph,
    dynamic_threshold,
    pairwise_distances,
    trim,
    trim_tracklet,
    trimmed_cluster_distance,
)
from tests.oracles import scalar_trim


def test_single_node_survives():
    g = trim_tracklet([[0.3, -0.2, 0.9]])
    assert g.survivor_mask.tolist() == [True]
    assert g.threshold < 1e-12
    assert g.trimmed_feature is g.centroid


def test_identical_nodes_all_survive():
    g = trim_tracklet(np.tile([1.0, 2.0], (5, 1)))
    assert g.survivor_mask.all()
    np.testing.assert_allclose(g.similarities, 1.0)


def test_planted_outlier_is_trimmed():
    nodes = np.array([[1.0, 0.0]] * 9 + [[-1.0, 0.2]])
    g = trim_tracklet(nodes, delta=0.5)
    assert g.survivor_mask.tolist() == [True] * 9 + [False]
    np.testing.assert_allclose(g.trimmed_feature, [1.0, 0.0])


def test_threshold_value():
    # u = [0, 0, 1, 4]: q = 5 / (4 * 0.5)
    assert dynamic_threshold([0, 0, 1, 4], 0.5) == 2.5
    assert dynamic_threshold([0, 0, 1, 4], 1.0) == 1.25


def test_node_at_threshold_survives():
    # equal deviations give u == q exactly and both survive
    g = build_graph([[1.0, 0.0], [1.0, 0.0]])
    g.similarities = np.array([0.0, 0.0])
    mask, _ = trim(g, delta=1.0)
    assert g.threshold == 1.0 and mask.all()


def test_invalid_delta():
    with pytest.raises(InvalidConfigError):
        trim_tracklet([[1.0, 0.0]], delta=0.0)


def test_empty_graph():
    with pytest.raises(InvalidInputError):
        build_graph(np.zeros((0, 3)))


def test_zero_centroid_warns():
    with pytest.warns(RuntimeWarning):
        g = trim_tracklet([[1.0, 0.0], [-1.0, 0.0]])
    assert g.survivor_mask.all()


def test_matches_scalar_oracle_on_random_graphs():
    rng = np.random.default_rng(0)
    for _ in range(300):
        L = int(rng.integers(1, 33))
        dim = int(rng.choice([4, 64]))
        delta = float(rng.uniform(0.05, 1.0))
        nodes = rng.standard_normal((L, dim)) + rng.standard_normal(dim)
        g = trim_tracklet(nodes, delta)
        assert g.survivor_mask.tolist() == scalar_trim(nodes.tolist(), delta)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 32), st.floats(1e-3, 1.0))
def test_survivors_never_empty(seed, L, delta):
    rng = np.random.default_rng(seed)
    nodes = rng.standard_normal((L, 8)) * rng.uniform(0.01, 3)
    g = trim_tracklet(nodes, delta)
    assert g.survivor_mask.any()


def test_larger_delta_trims_at_least_as_much():
    rng = np.random.default_rng(5)
    for _ in range(100):
        nodes = rng.standard_normal((20, 6)) + 1.5
        trimmed = [(~trim_tracklet(nodes, d).survivor_mask).sum() for d in (0.1, 0.3, 0.5, 0.9)]
        assert trimmed == sorted(trimmed)


def test_trimmed_feature_is_survivor_mean():
    rng = np.random.default_rng(1)
    nodes = np.vstack([rng.normal(1, 0.1, (12, 4)), -rng.normal(1, 0.1, (2, 4))])
    g = trim_tracklet(nodes, 0.5)
    assert g.n_trimmed >= 1
    np.testing.assert_allclose(g.trimmed_feature, nodes[g.survivor_mask].mean(axis=0))


def test_cluster_distance_is_minimum_pair():
    A = [[0.0, 0.0], [3.0, 0.0]]
    B = [[0.0, 4.0], [6.0, 4.0], [3.0, 1.0]]
    assert trimmed_cluster_distance(A, B) == 1.0
    assert trimmed_cluster_distance(A, B) == trimmed_cluster_distance(B, A)


def test_pairwise_distances_exact_on_integers():
    A = np.array([[0, 0], [1, 1]], dtype=float)
    B = np.array([[3, 4], [1, 1]], dtype=float)
    np.testing.assert_array_equal(pairwise_distances(A, B), [[5.0, math.sqrt(2)], [math.sqrt(13), 0.0]])
