import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nhac.errors import InvalidInputError, NonFiniteLossError
from nhac.model import (
    EmbeddingModel,
    LookupTable,
    SgdOptimizer,
    TrainSample,
    batch_loss_and_grads,
    cluster_probability,
    embed,
    id_loss,
    normalize,
    softmax,
    tracklet_feature,
    train_step,
    triplet_loss,
    update_lookup,
)
from nhac.nrm import Triplet

# 1 / (1 + exp(-10)) and -log of it, evaluated with the math module
SIGMA_10 = 0.9999546021312976
NEG_LOG_SIGMA_10 = 4.539889921686465e-05


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def small_model(seed=0, dropout=0.0, init="random"):
    return EmbeddingModel(6, 10, 4, dropout_rate=dropout, seed=seed, init=init)


# ---- embed -------------------------------------------------------------------

def test_embed_zero_weights_gives_first_basis_vector():
    m = small_model()
    for k in m.params:
        m.params[k][...] = 0.0
    with pytest.warns(RuntimeWarning):
        e = embed(m, np.ones(6))
    np.testing.assert_array_equal(e, [1.0, 0.0, 0.0, 0.0])


def test_embed_unit_norm_with_identity_like_weights():
    m = EmbeddingModel(4, 8, 4, dropout_rate=0.0)
    m.params["W1"] = np.vstack([np.eye(4), -np.eye(4)])
    m.params["W2"] = np.hstack([np.eye(4), -np.eye(4)])
    m.params["b1"][:] = 0
    m.params["b2"][:] = 0
    x = np.array([0.6, 0.0, -0.8, 0.0])
    e = embed(m, x)
    assert abs(np.linalg.norm(e) - 1.0) < 1e-9
    np.testing.assert_allclose(e, x, atol=1e-15)


def test_embed_dropout_replay_is_deterministic():
    m = small_model(dropout=0.5)
    x = np.linspace(-1, 1, 6)
    a = embed(m, x, train_mode=True, rng=np.random.default_rng(7))
    b = embed(m, x, train_mode=True, rng=np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    # the mask really is drawn: a different stream gives a different output
    c = embed(m, x, train_mode=True, rng=np.random.default_rng(8))
    assert not np.array_equal(a, c)


def test_embed_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        embed(small_model(), np.ones(5))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["random", "isometric"]))
def test_embed_outputs_are_unit_norm(seed, init):
    rng = np.random.default_rng(seed)
    m = EmbeddingModel(6, 10, 4, dropout_rate=0.5, seed=seed, init=init)
    E = m.forward(rng.standard_normal((5, 6)), train_mode=True, rng=rng)[0]
    np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0, atol=1e-9)


def test_isometric_init_preserves_geometry():
    rng = np.random.default_rng(3)
    X = unit_rows(rng, 20, 16)
    E = EmbeddingModel(16, 64, 32, seed=1).embed_frames(X)
    np.testing.assert_allclose(E @ E.T, X @ X.T, atol=0.02)


# ---- tracklet_feature ----------------------------------------------------------

def test_tracklet_feature_small_cases():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    np.testing.assert_array_equal(tracklet_feature([e1]), e1)
    np.testing.assert_array_equal(tracklet_feature([e1, e2]), [0.5, 0.5])


def test_tracklet_feature_matches_summation_oracle():
    E = unit_rows(np.random.default_rng(0), 16, 8)
    oracle = [math.fsum(E[:, j]) / 16 for j in range(8)]
    np.testing.assert_allclose(tracklet_feature(list(E)), oracle, rtol=0, atol=1e-12)


def test_tracklet_feature_empty():
    with pytest.raises(InvalidInputError):
        tracklet_feature([])


# ---- lookup table and cluster probability -------------------------------------------

def test_cluster_probability_cases():
    v = np.array([0.0, 0.0, 1.0])
    assert cluster_probability(LookupTable(np.array([[1.0], [0.0], [0.0]])), v) == pytest.approx([1.0])
    table = LookupTable(np.eye(3)[:, :2])
    np.testing.assert_allclose(cluster_probability(table, v), [0.5, 0.5], atol=1e-15)
    p = cluster_probability(LookupTable(np.eye(2), tau=0.1), np.array([1.0, 0.0]))
    assert p[0] == pytest.approx(SIGMA_10, rel=1e-12)
    assert p[1] == pytest.approx(1 - SIGMA_10, rel=1e-9)


def test_cluster_probability_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        cluster_probability(LookupTable(np.eye(3)), np.ones(2))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-500, 500))
def test_softmax_sums_to_one_and_ignores_logit_shift(seed, shift):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 20, size=rng.integers(1, 30))
    p = softmax(logits)
    assert abs(p.sum() - 1) < 1e-9
    assert (p > 0).all() or logits.ptp() > 700
    np.testing.assert_allclose(softmax(logits + shift), p, atol=1e-9)


def test_probability_monotone_in_target_logit():
    cols = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    table = LookupTable(cols, tau=0.5)
    prev = -1.0
    for a in np.linspace(-1, 1, 11):
        p = cluster_probability(table, np.array([a, 0.3]))[0]
        assert p > prev
        prev = p


def test_id_loss_cases():
    loss, g = id_loss(LookupTable(np.array([[1.0], [0.0]])), np.array([0.3, 0.4]), 0)
    assert loss == 0.0
    np.testing.assert_allclose(g, 0.0, atol=1e-15)
    loss, _ = id_loss(LookupTable(np.eye(4)[:, :3]), np.array([0, 0, 0, 1.0]), 2)
    assert loss == pytest.approx(math.log(3), rel=1e-12)
    loss, _ = id_loss(LookupTable(np.eye(2), tau=0.1), np.array([1.0, 0.0]), 0)
    assert loss == pytest.approx(NEG_LOG_SIGMA_10, rel=1e-9)


def test_id_loss_label_range():
    with pytest.raises(InvalidInputError):
        id_loss(LookupTable(np.eye(2)), np.array([1.0, 0.0]), 2)


def test_id_loss_gradient_matches_finite_difference():
    rng = np.random.default_rng(1)
    table = LookupTable(rng.standard_normal((5, 4)), tau=0.1)
    v = rng.standard_normal(5) * 0.3
    _, g = id_loss(table, v, 2)
    h = 1e-6
    fd = [(id_loss(table, v + h * e, 2)[0] - id_loss(table, v - h * e, 2)[0]) / (2 * h)
          for e in np.eye(5)]
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_update_lookup():
    table = LookupTable(np.eye(2))
    update_lookup(table, 0, np.array([1.0, 0.0]))
    np.testing.assert_array_equal(table.columns[:, 0], [1.0, 0.0])

    table = LookupTable(np.array([[1.0], [0.0]]))
    update_lookup(table, 0, np.array([0.0, 1.0]))
    np.testing.assert_allclose(table.columns[:, 0], [math.sqrt(2) / 2] * 2, rtol=1e-15)

    table = LookupTable(unit_rows(np.random.default_rng(2), 3, 4).T)
    before = table.columns.copy()
    update_lookup(table, 1, normalize(np.ones(4)))
    np.testing.assert_array_equal(table.columns[:, [0, 2]], before[:, [0, 2]])
    np.testing.assert_allclose(np.linalg.norm(table.columns, axis=0), 1.0, atol=1e-9)


def test_update_lookup_antipodal_keeps_column():
    table = LookupTable(np.array([[1.0], [0.0]]))
    with pytest.warns(RuntimeWarning):
        update_lookup(table, 0, np.array([-1.0, 0.0]))
    np.testing.assert_array_equal(table.columns[:, 0], [1.0, 0.0])


# ---- triplet loss ------------------------------------------------------------------

def test_triplet_loss_cases():
    a = np.zeros(2)
    loss, _ = triplet_loss(a, np.array([0.5, 0.0]), np.array([0.0, 0.5]), 0.3)
    assert loss == pytest.approx(0.3)
    loss, grads = triplet_loss(a, np.array([0.1, 0.0]), np.array([0.0, 0.5]), 0.3)
    assert loss == 0.0 and all(not g.any() for g in grads)
    loss, _ = triplet_loss(a, np.array([0.5, 0.0]), np.array([0.0, 0.6]), 0.3)
    assert loss == pytest.approx(0.2, abs=1e-15)


def test_triplet_loss_gradient_matches_finite_difference():
    rng = np.random.default_rng(4)
    a, p, n = rng.standard_normal((3, 5))
    n = a + 0.1 * (n - a)  # keep the hinge active
    loss, grads = triplet_loss(a, p, n, 0.3)
    assert loss > 0
    h = 1e-6
    for which, g in enumerate(grads):
        fd = []
        for e in np.eye(5):
            args_p = [a, p, n]
            args_m = [a, p, n]
            args_p[which] = args_p[which] + h * e
            args_m[which] = args_m[which] - h * e
            fd.append((triplet_loss(*args_p, 0.3)[0] - triplet_loss(*args_m, 0.3)[0]) / (2 * h))
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


# ---- optimizer and train_step --------------------------------------------------------

def test_learning_rate_schedule():
    opt = SgdOptimizer()
    assert opt.rate_for_epoch(1) == 0.1
    assert opt.rate_for_epoch(15) == 0.1
    assert opt.rate_for_epoch(16) == 0.01


def _batch(rng, n=2, M=4, d=6):
    return [TrainSample(rng.standard_normal((M, d)), i % 2) for i in range(n)]


def test_velocity_buffers_match_parameter_shapes():
    rng = np.random.default_rng(0)
    m = small_model()
    opt = SgdOptimizer()
    table = LookupTable(rng.standard_normal((4, 2)))
    train_step(m, table, opt, _batch(rng), rng=rng)
    assert {k: v.shape for k, v in opt.velocity.items()} == {k: v.shape for k, v in m.params.items()}


def test_zero_learning_rate_freezes_parameters():
    rng = np.random.default_rng(0)
    m = small_model(dropout=0.5)
    before = {k: v.copy() for k, v in m.params.items()}
    table = LookupTable(rng.standard_normal((4, 2)))
    id_l, trip_l = train_step(m, table, SgdOptimizer(0.0, 0.9, 15, 0.0), _batch(rng), rng=rng)
    assert id_l > 0 and trip_l == 0.0
    for k in before:
        np.testing.assert_array_equal(m.params[k], before[k])


def test_train_step_is_deterministic():
    def trained():
        rng = np.random.default_rng(11)
        m = small_model(seed=3, dropout=0.5)
        table = LookupTable(np.random.default_rng(5).standard_normal((4, 2)))
        opt = SgdOptimizer()
        trip = [Triplet((0, 0), (0, 1), (1, 0), 2), Triplet((1, 1), (1, 0), (0, 1), 2)]
        for epoch in range(1, 6):
            train_step(m, table, opt, _batch(rng), trip, epoch=epoch, rng=rng)
        return m.params, table.columns
    (p1, c1), (p2, c2) = trained(), trained()
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])
    np.testing.assert_array_equal(c1, c2)


def test_train_step_keeps_lookup_unit_norm():
    rng = np.random.default_rng(0)
    m = small_model(dropout=0.5)
    table = LookupTable(rng.standard_normal((4, 2)))
    for epoch in range(1, 4):
        train_step(m, table, SgdOptimizer(), _batch(rng), epoch=epoch, rng=rng)
    np.testing.assert_allclose(np.linalg.norm(table.columns, axis=0), 1.0, atol=1e-9)


def test_non_finite_loss_aborts():
    rng = np.random.default_rng(0)
    m = small_model()
    m.params["W1"][0, 0] = np.nan
    table = LookupTable(rng.standard_normal((4, 2)))
    with pytest.raises(NonFiniteLossError):
        train_step(m, table, SgdOptimizer(), _batch(rng), rng=rng)


def numeric_grads(model, loss_fn, h=1e-5):
    out = {}
    for name, arr in model.params.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loss_fn()
            arr[idx] = old - h
            down = loss_fn()
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_single_sample_gradient_check():
    rng = np.random.default_rng(2)
    m = small_model(seed=2)
    table = LookupTable(rng.standard_normal((4, 3)), tau=0.1)
    batch = [TrainSample(rng.standard_normal((4, 6)), 1)]
    _, _, grads, _ = batch_loss_and_grads(m, table, batch)
    fd = numeric_grads(m, lambda: batch_loss_and_grads(m, table, batch)[0])
    for k in grads:
        assert relative_error(grads[k], fd[k]) < 1e-4, k
