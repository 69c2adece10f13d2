import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphpurify.gnn import (PARAM_NAMES, GcnParams, TrainConfig, accuracy_from_logits,
                             gcn_forward, grad_wrt_adjacency, load_params, loss_and_grads,
                             predict_accuracy, save_params, train_classifier)
from graphpurify.graphcore import Graph, SbmConfig, generate_sbm, split_dataset

from helpers import central_diff, random_adjacency, rel_err


def _random_params(rng, f, c, task="node", h=5, h2=4):
    p = GcnParams.init(f, c, h, h2, task, seed=int(rng.integers(1 << 30)))
    p.b1[:] = rng.normal(0, 0.3, h)
    p.b2[:] = rng.normal(0, 0.3, h2)
    return p


def _dense_oracle(p, a, x, task):
    s = a + np.eye(len(a))
    d = np.diag(1 / np.sqrt(s.sum(1)))
    an = d @ s @ d
    h1 = np.maximum(an @ x @ p.W1 + p.b1, 0)
    h2 = np.maximum(an @ h1 @ p.W2 + p.b2, 0)
    if task == "graph":
        return h2.mean(0) @ p.Wout + p.bout, h2
    return h2 @ p.Wout + p.bout, h2


def test_zero_weights_give_uniform_output():
    g = generate_sbm(SbmConfig(8, 2, 0.6, 0.1, seed=0))
    logits, _ = gcn_forward(GcnParams.zeros(1, 3), g)
    assert np.all(logits == 0)
    prob = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    assert np.allclose(prob, 1 / 3)


def test_isolated_node_sees_only_itself():
    p = GcnParams(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
    x = np.array([[0.3, 0.7]])
    logits, hidden = gcn_forward(p, Graph(np.zeros((1, 1)), x))
    assert np.allclose(logits, x) and np.allclose(hidden, x)


@pytest.mark.parametrize("task", ["node", "graph"])
def test_forward_matches_dense_oracle(task):
    rng = np.random.default_rng(5)
    a = random_adjacency(rng, 6)
    x = rng.standard_normal((6, 3))
    p = _random_params(rng, 3, 2, task)
    logits, hidden = gcn_forward(p, Graph(a, x))
    want, want_h = _dense_oracle(p, a, x, task)
    assert np.allclose(logits, want, atol=1e-12)
    assert np.allclose(hidden, want_h, atol=1e-12)


@pytest.mark.parametrize("task", ["node", "graph"])
def test_parameter_gradients_match_finite_differences(task):
    rng = np.random.default_rng(7)
    for _ in range(5):
        n = int(rng.integers(3, 9))
        a = random_adjacency(rng, n).astype(float)
        x = rng.standard_normal((n, 3))
        p = _random_params(rng, 3, 3, task)
        y = rng.integers(0, 3, n) if task == "node" else int(rng.integers(0, 3))
        _, grads, _ = loss_and_grads(p, a, x, y)
        for name in PARAM_NAMES:
            arr = getattr(p, name)
            for _ in range(3):
                idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
                fd = central_diff(lambda: loss_and_grads(p, a, x, y)[0], arr, idx, 1e-4)
                assert rel_err(fd, grads[name][idx]) < 1e-4, name


def test_adjacency_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    a = random_adjacency(rng, 6).astype(float)
    x = rng.standard_normal((6, 3))
    p = _random_params(rng, 3, 2)
    y = rng.integers(0, 2, 6)
    g = grad_wrt_adjacency(p, a, y, features=x)
    pairs = [(0, 1), (0, 5), (1, 3), (2, 4), (3, 5)]
    for i, j in pairs:
        def loss():
            return loss_and_grads(p, a, x, y)[0]
        # moving one entry of the pair: the symmetrized gradient averages both directions
        fd_ij = central_diff(loss, a, (i, j), 1e-5)
        fd_ji = central_diff(loss, a, (j, i), 1e-5)
        assert rel_err(0.5 * (fd_ij + fd_ji), g[i, j]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 8))
def test_adjacency_gradient_symmetric_zero_diagonal(seed, n):
    rng = np.random.default_rng(seed)
    p = _random_params(rng, 2, 2)
    g = grad_wrt_adjacency(p, random_adjacency(rng, n).astype(float), rng.integers(0, 2, n),
                           features=rng.standard_normal((n, 2)))
    assert np.allclose(g, g.T) and not np.diag(g).any()


def test_zero_features_give_zero_adjacency_gradient():
    rng = np.random.default_rng(2)
    p = GcnParams.init(3, 2, 5, 4, seed=0)
    g = grad_wrt_adjacency(p, random_adjacency(rng, 6), rng.integers(0, 2, 6),
                           features=np.zeros((6, 3)))
    assert np.all(g == 0)


def test_two_cliques_train_to_perfect_accuracy():
    g = generate_sbm(SbmConfig(10, 2, 1.0, 0.0, seed=0, feature_dim=2, feature_signal=2.0))
    split = split_dataset(10, (0.8, 0.1, 0.1), seed=0)
    res = train_classifier(g, split, TrainConfig(epochs=200, learning_rate=1e-2, seed=0))
    assert predict_accuracy(res.params, g, idx=split.train) == 1.0
    assert len(res.loss_history) == 200
    assert res.loss_history[-1] < res.loss_history[0]


def test_zero_learning_rate_keeps_parameters():
    g = generate_sbm(SbmConfig(12, 2, 0.6, 0.1, seed=1, feature_dim=3))
    split = split_dataset(12, seed=0)
    cfg = TrainConfig(epochs=5, learning_rate=0.0, weight_decay=0.0, seed=3)
    res = train_classifier(g, split, cfg)
    init = GcnParams.init(3, 2, cfg.hidden, cfg.hidden2, "node", seed=3)
    for name in PARAM_NAMES:
        assert np.array_equal(getattr(res.params, name), getattr(init, name))


def test_training_is_deterministic():
    g = generate_sbm(SbmConfig(20, 2, 0.5, 0.05, seed=2, feature_dim=3))
    split = split_dataset(20, seed=0)
    cfg = TrainConfig(epochs=20, seed=4)
    a, b = train_classifier(g, split, cfg), train_classifier(g, split, cfg)
    assert all(np.array_equal(getattr(a.params, k), getattr(b.params, k)) for k in PARAM_NAMES)


def test_graph_task_training_runs():
    graphs = [generate_sbm(SbmConfig(8, 1 + i % 2, 0.8, 0.1, seed=i)) for i in range(10)]
    graphs = [Graph(g.adjacency, g.features, None, i % 2) for i, g in enumerate(graphs)]
    res = train_classifier(graphs, split_dataset(10, seed=0), TrainConfig(epochs=10))
    assert res.params.task == "graph"
    assert 0.0 <= predict_accuracy(res.params, graphs) <= 1.0


def test_accuracy_tie_rule_and_perfect_logits():
    assert accuracy_from_logits(np.zeros((4, 3)), [0, 0, 0, 0]) == 1.0
    assert accuracy_from_logits(np.eye(3) * 5, [0, 1, 2]) == 1.0


def test_untrained_accuracy_is_near_chance():
    rng = np.random.default_rng(0)
    accs = []
    for seed in range(200):
        g = generate_sbm(SbmConfig(20, 2, 0.3, 0.05, seed=seed, feature_dim=3))
        labels = rng.integers(0, 3, 20)
        accs.append(predict_accuracy(GcnParams.init(3, 3, seed=seed), g, labels))
    assert abs(np.mean(accs) - 1 / 3) < 0.05


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    n = 7
    a = random_adjacency(rng, n)
    x = rng.standard_normal((n, 3))
    perm = rng.permutation(n)
    p = _random_params(rng, 3, 2)
    node, _ = gcn_forward(p, Graph(a, x))
    node_p, _ = gcn_forward(p, Graph(a[np.ix_(perm, perm)], x[perm]))
    assert np.allclose(node_p, node[perm], atol=1e-9)
    pg = GcnParams(**p.as_dict(), task="graph")
    assert np.allclose(gcn_forward(pg, Graph(a, x))[0],
                       gcn_forward(pg, Graph(a[np.ix_(perm, perm)], x[perm]))[0], atol=1e-9)


def test_checkpoint_round_trip(tmp_path):
    p = GcnParams.init(4, 3, 6, 5, "graph", seed=9)
    save_params(p, tmp_path / "c.json")
    q = load_params(tmp_path / "c.json")
    assert q.task == "graph"
    assert all(np.array_equal(getattr(p, k), getattr(q, k)) for k in PARAM_NAMES)


def test_non_finite_input_rejected():
    p = GcnParams.init(1, 2)
    with pytest.raises(ValueError):
        loss_and_grads(p, np.zeros((2, 2)), np.array([[np.inf], [0.0]]), [0, 1])
