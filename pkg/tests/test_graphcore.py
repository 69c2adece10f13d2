import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphpurify.graphcore import (DatasetSplit, EdgeStateVector, Graph, GraphFormatError,
                                   SbmConfig, degree_features, edge_density, generate_sbm,
                                   read_edge_list, read_features, rng_stream, split_dataset,
                                   write_edge_list, write_features)


def _valid(g: Graph):
    a = g.adjacency
    assert np.array_equal(a, a.T)
    assert not np.diag(a).any()
    assert set(np.unique(a)) <= {0, 1}
    assert np.isfinite(g.features).all()


def test_extreme_probabilities_give_two_cliques():
    g = generate_sbm(SbmConfig(4, 2, 1.0, 0.0, seed=0))
    expected = np.array([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]])
    assert np.array_equal(g.adjacency, expected)
    assert g.node_labels.tolist() == [0, 0, 1, 1]


def test_intra_block_count_within_three_sigma():
    g = generate_sbm(SbmConfig(60, 2, 0.3, 0.02, seed=7))
    same = g.node_labels[:, None] == g.node_labels[None, :]
    intra = int(np.triu(g.adjacency * same, k=1).sum())
    trials = 2 * 30 * 29 // 2
    mean, sd = 0.3 * trials, np.sqrt(trials * 0.3 * 0.7)
    assert mean == pytest.approx(261.0)
    assert abs(intra - mean) < 3 * sd


def test_sbm_is_deterministic():
    cfg = SbmConfig(50, 3, 0.3, 0.05, seed=11, feature_dim=4)
    assert generate_sbm(cfg) == generate_sbm(cfg)
    assert not np.array_equal(generate_sbm(cfg).adjacency,
                              generate_sbm(SbmConfig(50, 3, 0.3, 0.05, seed=12)).adjacency)


def test_sbm_default_features_are_normalized_degrees():
    g = generate_sbm(SbmConfig(30, 2, 0.4, 0.05, seed=1))
    assert np.allclose(g.features, degree_features(g.adjacency))


@pytest.mark.parametrize("kwargs", [dict(num_nodes=2, num_blocks=3),
                                    dict(num_nodes=10, intra_prob=0.1, inter_prob=0.2),
                                    dict(num_nodes=10, seed=-1)])
def test_sbm_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        SbmConfig(**kwargs)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 40), blocks=st.integers(1, 4), inter=st.floats(0, 0.3),
       gap=st.floats(0.01, 0.7), seed=st.integers(0, 2**31 - 1), dim=st.integers(0, 3))
def test_sbm_graphs_satisfy_invariants(n, blocks, inter, gap, seed, dim):
    if n < blocks:
        return
    g = generate_sbm(SbmConfig(n, blocks, min(inter + gap, 1.0), inter, seed, dim))
    _valid(g)
    assert g.features.shape == (n, max(dim, 1))


def test_degree_features_examples():
    path = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    assert degree_features(path)[:, 0].tolist() == [0.5, 1.0, 0.5]
    assert degree_features(np.zeros((3, 3)))[:, 0].tolist() == [0.0, 0.0, 0.0]
    clique = np.ones((4, 4)) - np.eye(4)
    assert degree_features(clique)[:, 0].tolist() == [1.0] * 4


@pytest.mark.parametrize("adj", [np.array([[0, 1], [0, 0]]), np.array([[1, 0], [0, 0]]),
                                 np.array([[0, 2], [2, 0]]), np.zeros((2, 3))])
def test_graph_rejects_invalid_adjacency(adj):
    with pytest.raises(ValueError):
        Graph(adj, np.zeros((adj.shape[0], 1)))


def test_graph_rejects_bad_features():
    with pytest.raises(ValueError):
        Graph(np.zeros((2, 2)), np.array([[np.nan], [0.0]]))
    with pytest.raises(ValueError):
        Graph(np.zeros((2, 2)), np.zeros((3, 1)))


def test_edge_state_vector():
    assert EdgeStateVector([0.25, 0.75])[1] == 0.75
    with pytest.raises(ValueError):
        EdgeStateVector([0.5, 0.6])


def test_read_path_graph(tmp_path):
    p = tmp_path / "g.edges"
    p.write_text("nodes 3\n0 1\n1 2\n")
    g = read_edge_list(p)
    assert np.array_equal(g.adjacency, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])


def test_duplicate_edges_are_idempotent(tmp_path):
    p = tmp_path / "g.edges"
    p.write_text("nodes 3\n0 1\n1 0\n0 1\n")
    assert read_edge_list(p).num_edges == 1


def test_self_loop_rejected(tmp_path):
    p = tmp_path / "g.edges"
    p.write_text("nodes 3\n0 1\n2 2\n")
    with pytest.raises(GraphFormatError, match="self-loop"):
        read_edge_list(p)


@pytest.mark.parametrize("text,line", [("nodes 3\n0 x\n", ":2:"), ("edges 3\n", ":1:"),
                                       ("nodes 3\n0 1\n0 5\n", ":3:")])
def test_malformed_lines_report_line_number(tmp_path, text, line):
    p = tmp_path / "g.edges"
    p.write_text(text)
    with pytest.raises(GraphFormatError, match=line):
        read_edge_list(p)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 200), p=st.floats(0.0, 0.2), seed=st.integers(0, 10_000))
def test_edge_list_round_trip(tmp_path_factory, n, p, seed):
    rng = np.random.default_rng(seed)
    a = np.triu((rng.random((n, n)) < p).astype(np.uint8), k=1)
    g = Graph(a + a.T, np.zeros((n, 1)), rng.integers(0, 3, n))
    path = tmp_path_factory.mktemp("rt") / "g.edges"
    write_edge_list(g, path)
    back = read_edge_list(path)
    assert np.array_equal(back.adjacency, g.adjacency)
    assert np.array_equal(back.node_labels, g.node_labels)


def test_features_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal((5, 3))
    write_features(x, tmp_path / "x.csv")
    assert np.array_equal(read_features(tmp_path / "x.csv"), x)


@pytest.mark.parametrize("n,ratios,sizes", [(10, (0.8, 0.1, 0.1), (8, 1, 1)),
                                            (10, (0.1, 0.1, 0.8), (1, 1, 8)),
                                            (3, (1, 0, 0), (3, 0, 0))])
def test_split_sizes(n, ratios, sizes):
    s = split_dataset(n, ratios, seed=0)
    assert s.sizes == sizes
    assert sorted(np.concatenate([s.train, s.val, s.test]).tolist()) == list(range(n))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 300), w=st.lists(st.floats(0.01, 1), min_size=3, max_size=3),
       seed=st.integers(0, 1000))
def test_split_is_disjoint_cover_and_deterministic(n, w, seed):
    ratios = np.array(w) / sum(w)
    ratios[2] = 1.0 - ratios[0] - ratios[1]
    s = split_dataset(n, ratios, seed)
    assert sorted(np.concatenate([s.train, s.val, s.test]).tolist()) == list(range(n))
    assert all(abs(size - r * n) < 1 for size, r in zip(s.sizes, ratios))
    assert split_dataset(n, ratios, seed).train.tolist() == s.train.tolist()


def test_split_rejects_bad_input():
    with pytest.raises(ValueError):
        split_dataset(0)
    with pytest.raises(ValueError):
        split_dataset(10, (0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        DatasetSplit(np.array([0, 1]), np.array([1]), np.array([2]))


def test_edge_density_and_rng_streams():
    g = Graph(np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]]), np.zeros((3, 1)))
    assert edge_density(g) == pytest.approx(1 / 3)
    a = rng_stream(3, "x", 1).random(4)
    assert np.array_equal(a, rng_stream(3, "x", 1).random(4))
    assert not np.array_equal(a, rng_stream(3, "y", 1).random(4))
