import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latgraph import gcn
from latgraph.errors import ShapeError, ValidationError
from latgraph.graph import LatencyGraph, renormalize

from oracles import (
    finite_difference_grads,
    max_relative_error,
    random_gcn_instance,
    single_layer_ngd_oracle,
)


# -- softmax and loss ------------------------------------------------------------

def test_softmax_example():
    got = gcn.softmax_rows(np.array([[0.0, math.log(3.0)]]))
    np.testing.assert_allclose(got, [[0.25, 0.75]], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_shift_invariant(seed, shift):
    z = np.random.default_rng(seed).normal(size=(4, 5)) * 5
    np.testing.assert_allclose(gcn.softmax_rows(z), gcn.softmax_rows(z + shift), atol=1e-12)
    np.testing.assert_allclose(gcn.softmax_rows(z).sum(axis=1), 1.0, atol=1e-12)


def test_cross_entropy_of_uniform_is_log_k():
    probs = np.full((3, 4), 0.25)
    assert gcn.masked_cross_entropy(probs, [0, 1, 2], [True, True, True]) == pytest.approx(math.log(4))


def test_cross_entropy_two_vertex_example():
    probs = np.array([[0.5, 0.5], [0.75, 0.25]])
    got = gcn.masked_cross_entropy(probs, [0, 1], [True, True])
    assert got == pytest.approx(-(math.log(0.5) + math.log(0.25)) / 2, abs=1e-12)
    assert got == pytest.approx(1.0397, abs=1e-4)


def test_empty_mask_rejected():
    with pytest.raises(ValidationError):
        gcn.masked_cross_entropy(np.full((2, 2), 0.5), [0, 1], [False, False])


# -- forward ---------------------------------------------------------------------

def test_identity_network_returns_softmax_of_aggregated_features():
    x = np.array([[1.0, 0.0], [0.0, 2.0]])
    prop = renormalize(np.array([[0, 1], [1, 0]]))
    model = gcn.GcnModel([np.eye(2)], dropout=0.0)
    cache = gcn.forward(model, prop, x)
    np.testing.assert_allclose(cache.logits, prop @ x, atol=1e-12)
    np.testing.assert_allclose(cache.probs, gcn.softmax_rows(prop @ x), atol=1e-12)


def test_two_vertex_hidden_layer_by_hand():
    prop = np.array([[0.5, 0.5], [0.5, 0.5]])
    x = np.array([[2.0], [6.0]])
    w1 = np.array([[1.0]])
    w2 = np.array([[1.0, -1.0]])
    cache = gcn.forward(gcn.GcnModel([w1, w2], dropout=0.0), prop, x)
    np.testing.assert_allclose(cache.preact[0], [[4.0], [4.0]])
    np.testing.assert_allclose(cache.logits, [[4.0, -4.0], [4.0, -4.0]])


def test_relu_zeroes_negative_hidden_units():
    prop = np.eye(2)
    cache = gcn.forward(gcn.GcnModel([np.array([[-1.0]]), np.array([[1.0]])], dropout=0.0),
                        prop, np.array([[1.0], [-1.0]]))
    np.testing.assert_allclose(cache.inputs[1], [[0.0], [1.0]])


def test_zero_dropout_is_bit_identical_to_inference():
    model, prop, x, _, _ = random_gcn_instance(np.random.default_rng(0))
    model.dropout = 0.0
    a = gcn.forward(model, prop, x).probs
    b = gcn.forward(model, prop, x, dropout_active=True, rng=np.random.default_rng(1)).probs
    assert np.array_equal(a, b)


def test_forward_shape_mismatch():
    model, prop, x, _, _ = random_gcn_instance(np.random.default_rng(0))
    with pytest.raises(ShapeError):
        gcn.forward(model, prop, x[:-1])


def test_init_model_starts_uniform():
    model = gcn.init_model(7, 4, gcn.GcnConfig(hidden=5))
    probs = gcn.forward(model, np.eye(3), np.random.default_rng(0).random((3, 7))).probs
    np.testing.assert_allclose(probs, 0.25)


# -- backward --------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_central_differences(seed):
    model, prop, x, labels, mask = random_gcn_instance(np.random.default_rng(seed))
    cache = gcn.forward(model, prop, x)
    analytic = gcn.backward(cache, labels, mask, prop, model, weight_decay=5e-4)
    numeric = finite_difference_grads(model, prop, x, labels, mask, weight_decay=5e-4)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_duplicating_masked_vertices_leaves_gradient_unchanged():
    model, prop, x, labels, mask = random_gcn_instance(np.random.default_rng(4))
    n = prop.shape[0]
    big_prop = np.zeros((2 * n, 2 * n))
    big_prop[:n, :n] = big_prop[n:, n:] = prop
    big_x = np.vstack([x, x])
    big_labels = np.concatenate([labels, labels])
    big_mask = np.concatenate([mask, mask])
    g1 = gcn.backward(gcn.forward(model, prop, x), labels, mask, prop, model)
    g2 = gcn.backward(gcn.forward(model, big_prop, big_x), big_labels, big_mask, big_prop, model)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_backward_rejects_mismatched_cache():
    model, prop, x, labels, mask = random_gcn_instance(np.random.default_rng(0))
    cache = gcn.forward(model, prop, x)
    other = gcn.GcnModel([np.ones((4, 3))], dropout=0.0)
    with pytest.raises(ValidationError):
        gcn.backward(cache, labels, mask, prop, other)


# -- natural-gradient preconditioning ----------------------------------------------

def test_zero_gradient_gives_zero_direction():
    model, prop, x, labels, mask = random_gcn_instance(np.random.default_rng(2))
    cache = gcn.forward(model, prop, x)
    zeros = [np.zeros_like(p) for p in model.params]
    out = gcn.ngd_precondition(zeros, cache, prop, model, gcn.NgdState(mask, labels, 1.0, 100.0))
    assert all(np.array_equal(o, np.zeros_like(o)) for o in out)


@pytest.mark.parametrize("lam,mask", [(1.0, [True, False]), (0.0, [True, False]), (0.5, [True, True])])
def test_single_layer_two_vertex_matches_hand_oracle(lam, mask):
    prop = renormalize(np.array([[0, 1], [1, 0]]))
    x = np.array([[1.0, -0.5], [0.3, 2.0]])
    w = np.array([[0.2, -0.1, 0.4], [0.0, 0.3, -0.2]])
    b = np.array([0.1, 0.0, -0.1])
    labels = np.array([2, 0])
    model = gcn.GcnModel([w], [b], dropout=0.0)
    cache = gcn.forward(model, prop, x)
    grads = gcn.backward(cache, labels, mask, prop, model)
    got = gcn.ngd_precondition(grads, cache, prop, model, gcn.NgdState(mask, labels, lam, 100.0))
    want_w, want_b = single_layer_ngd_oracle(prop, x, w, b, labels, np.array(mask), lam, 100.0)
    np.testing.assert_allclose(got[0], want_w, atol=1e-10)
    np.testing.assert_allclose(got[1], want_b, atol=1e-10)


def test_lambda_zero_factors_use_labelled_rows_only():
    model, prop, x, labels, mask = random_gcn_instance(np.random.default_rng(6))
    cache = gcn.forward(model, prop, x)
    factors = gcn.ngd_factors(cache, prop, model, gcn.NgdState(mask, labels, 0.0, 100.0))
    agg = np.hstack([cache.aggregated[0], np.ones((prop.shape[0], 1))])
    want_v = agg[mask].T @ agg[mask] / prop.shape[0]
    np.testing.assert_allclose(factors[0][0], want_v, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0))
def test_factors_are_positive_semidefinite(seed, lam):
    model, prop, x, labels, mask = random_gcn_instance(np.random.default_rng(seed))
    cache = gcn.forward(model, prop, x)
    for v, u in gcn.ngd_factors(cache, prop, model, gcn.NgdState(mask, labels, lam, 100.0)):
        for m in (v, u):
            np.testing.assert_allclose(m, m.T, atol=1e-12)
            assert np.linalg.eigvalsh(m).min() > -1e-10


def test_ngd_state_validation():
    with pytest.raises(ValidationError):
        gcn.NgdState([True], [0], 1.0, 0.0)
    with pytest.raises(ValidationError):
        gcn.NgdState([True], [0], -1.0, 1.0)


# -- optimizer step ----------------------------------------------------------------

def test_adam_first_step_moves_by_learning_rate():
    w = [np.array([[1.0, -2.0]]), np.array([0.5])]
    g = [np.array([[3.0, -0.1]]), np.array([1e-3])]
    state = gcn.OptimizerState(rule="adam", lr=0.01)
    new = gcn.optimizer_step(w, g, state)
    np.testing.assert_allclose(new[0] - w[0], [[-0.01, 0.01]], rtol=1e-4)
    np.testing.assert_allclose(new[1] - w[1], [-0.01], rtol=1e-4)
    assert state.step == 1


def test_zero_direction_changes_weights_only_by_decay():
    w = [np.array([[2.0, -4.0]])]
    for rule in ("adam", "sgd"):
        state = gcn.OptimizerState(rule=rule, lr=0.1, decoupled_weight_decay=0.5)
        new = gcn.optimizer_step(w, [np.zeros((1, 2))], state)
        np.testing.assert_allclose(new[0], w[0] * (1 - 0.05))
        plain = gcn.optimizer_step(w, [np.zeros((1, 2))], gcn.OptimizerState(rule=rule))
        np.testing.assert_array_equal(plain[0], w[0])


def test_heavy_ball_accumulates_momentum():
    state = gcn.OptimizerState(rule="sgd", lr=0.1, beta1=0.5)
    w = [np.zeros(1)]
    w = gcn.optimizer_step(w, [np.ones(1)], state)
    w = gcn.optimizer_step(w, [np.ones(1)], state)
    np.testing.assert_allclose(w[0], [-0.1 - 0.15])


def test_optimizer_is_deterministic_and_checks_shapes():
    w = [np.arange(4.0).reshape(2, 2)]
    g = [np.full((2, 2), 0.3)]
    a = gcn.optimizer_step(w, g, gcn.OptimizerState())
    b = gcn.optimizer_step(w, g, gcn.OptimizerState())
    assert np.array_equal(a[0], b[0])
    with pytest.raises(ShapeError):
        gcn.optimizer_step(w, [np.zeros(3)], gcn.OptimizerState())


# -- training --------------------------------------------------------------------

def two_cluster_graph(n_per=10, seed=0):
    """Two disconnected cliques whose features separate the classes."""
    rng = np.random.default_rng(seed)
    n = 2 * n_per
    adj = np.zeros((n, n), dtype=bool)
    adj[:n_per, :n_per] = True
    adj[n_per:, n_per:] = True
    np.fill_diagonal(adj, False)
    labels = np.repeat([0, 1], n_per)
    x = rng.normal(0, 0.1, size=(n, 3))
    x[:, 0] += np.where(labels == 0, 1.0, -1.0)
    train = np.zeros(n, dtype=bool)
    train[[0, 1, 2, n_per, n_per + 1, n_per + 2]] = True
    val = np.zeros(n, dtype=bool)
    val[[3, 4, n_per + 3, n_per + 4]] = True
    return LatencyGraph(adj, {}, x, labels, {"train": train, "val": val})


@pytest.mark.parametrize("optimizer", ["adam", "ngd"])
def test_first_epoch_loss_is_near_log_k(optimizer):
    g = two_cluster_graph()
    res = gcn.train(g, None, gcn.GcnConfig(optimizer=optimizer, max_epochs=5), 2)
    assert res.history[0].train_loss <= math.log(2) + 0.1


@pytest.mark.parametrize("optimizer", ["adam", "ngd"])
def test_separable_toy_reaches_full_training_accuracy(optimizer):
    g = two_cluster_graph()
    cfg = gcn.GcnConfig(optimizer=optimizer, dropout=0.0, patience=50)
    res = gcn.train(g, None, cfg, 2)
    probs = gcn.predict(res.model, renormalize(g.adjacency), g.features)
    assert gcn.accuracy(probs, g.labels, g.masks["train"]) == 1.0
    assert res.best_val_loss < res.initial_val_loss


def test_history_bounded_and_best_snapshot_returned():
    g = two_cluster_graph()
    cfg = gcn.GcnConfig(optimizer="adam", patience=3)
    res = gcn.train(g, None, cfg, 2)
    assert 1 <= res.epochs_run <= 200
    losses = [r.val_loss for r in res.history]
    assert res.best_val_loss == min(losses)
    assert res.best_epoch == int(np.argmin(losses)) + 1
    if res.epochs_run < cfg.max_epochs:
        assert res.epochs_run == res.best_epoch + cfg.patience
    probs = gcn.predict(res.model, renormalize(g.adjacency), g.features)
    assert gcn.masked_cross_entropy(probs, g.labels, g.masks["val"]) == pytest.approx(res.best_val_loss)


def test_training_is_deterministic():
    g = two_cluster_graph()
    a = gcn.train(g, None, gcn.GcnConfig(seed=3), 2)
    b = gcn.train(g, None, gcn.GcnConfig(seed=3), 2)
    assert [r.val_loss for r in a.history] == [r.val_loss for r in b.history]
    for p, q in zip(a.model.params, b.model.params):
        assert np.array_equal(p, q)


def test_training_requires_both_masks():
    g = two_cluster_graph()
    empty = LatencyGraph(g.adjacency, {}, g.features, g.labels,
                         {"train": g.masks["train"], "val": np.zeros(20, dtype=bool)})
    with pytest.raises(ValidationError):
        gcn.train(empty, None, gcn.GcnConfig(), 2)


def test_invalid_config_rejected():
    for bad in (dict(optimizer="sgd"), dict(outer_rule="rmsprop"), dict(dropout=1.0), dict(patience=0),
                dict(ngd_epsilon=0.0)):
        with pytest.raises(ValidationError):
            gcn.GcnConfig(**bad).validate()


def test_checkpoint_round_trip(tmp_path):
    g = two_cluster_graph()
    cfg = gcn.GcnConfig(max_epochs=5)
    res = gcn.train(g, None, cfg, 2)
    gcn.save_checkpoint(tmp_path / "ck.json", res.model, cfg)
    model, back = gcn.load_checkpoint(tmp_path / "ck.json")
    assert back == cfg
    for p, q in zip(model.params, res.model.params):
        assert np.array_equal(p, q)
    gcn.write_history_csv(tmp_path / "h.csv", res.history)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_acc" and len(lines) == res.epochs_run + 1
