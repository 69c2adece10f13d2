import numpy as np
import pytest

from graphpurify.diffusion import (DenoiserParams, build_schedule, forward_sample, reverse_probs,
                                   sample_edges)
from graphpurify.gnn import TrainConfig, train_classifier
from graphpurify.graphcore import Graph, SbmConfig, generate_sbm, rng_stream, split_dataset
from graphpurify.lid import purification_time
from graphpurify.purifier import (PurificationError, PurifyConfig, _chain, evaluate_purification,
                                  purify)

from helpers import random_adjacency


def _edge_only_denoiser(in_dim, gain=3.0, bias=-1.5):
    """Denoiser whose clean-edge logit is ``gain * edge + bias`` and nothing else."""
    p = DenoiserParams.init(in_dim, 4, 3, 2, seed=0).with_zero_scorer()
    p.tensors["S_pair"][0, 0] = 1.0
    p.tensors["s_out"][0] = gain
    p.tensors["c_out"][0] = bias
    return p


def _attacked(n=12, seed=0):
    g = generate_sbm(SbmConfig(n, 2, 0.5, 0.1, seed=seed, feature_dim=3))
    return g


def test_zero_degree_returns_attacked_graph():
    g = _attacked()
    sch = build_schedule(20, 0.008, 0.2)
    den = DenoiserParams.init(3, 4, 3, 2, seed=1)
    out, trace = purify(g, None, den, sch, PurifyConfig(t_p=5), lambda_matrix=np.zeros((12, 12)))
    assert np.array_equal(out.adjacency, g.adjacency)
    assert all(s["mask_density"] == 0 for s in trace.steps)


def test_matches_per_pair_enumeration():
    # with an edge-only denoiser every pair evolves independently, so the
    # output marginal of each pair follows from 2-state matrix products
    sch = build_schedule(10, 0.008, 0.3)
    t_p = 3
    a_adv = np.array([[0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 0], [1, 0, 0, 0]])
    lam = np.array([[0, 1.0, 0.0, 0.5], [1.0, 0, 0.2, 0.9], [0.0, 0.2, 0, 1.0],
                    [0.5, 0.9, 1.0, 0]])
    x = np.random.default_rng(0).standard_normal((4, 2))
    g = Graph(a_adv, x)
    den = _edge_only_denoiser(2)
    p0 = 1 / (1 + np.exp(-np.array([-1.5, 1.5])))  # p(a0 = 1 | edge state)
    abar, m = sch.alpha_bar, np.array([0.7, 0.3])

    def trans(ab):
        return ab * np.eye(2) + (1 - ab) * m[None, :]

    def step_prob(s, t):
        qb_prev, qb_t = trans(abar[t - 1]), trans(abar[t])
        q_t = np.linalg.solve(qb_prev, qb_t)
        out = 0.0
        for a0 in (0, 1):
            post = qb_prev[a0, :] * q_t[:, s]
            out += post[1] / post.sum() * (p0[s] if a0 else 1 - p0[s])
        return out

    iu = np.triu_indices(4, 1)
    oracle = []
    for i, j in zip(*iu):
        k = purification_time(lam[i, j], sch, t_p)
        a = a_adv[i, j]
        if k == 0:
            oracle.append(float(a))
            continue
        v = trans(abar[k])[a]
        for t in range(k, 0, -1):
            on = sum(v[s] * step_prob(s, t) for s in (0, 1))
            v = np.array([1 - on, on])
        oracle.append(v[1])
    runs = 600
    hits = np.zeros(len(oracle))
    for seed in range(runs):
        out, _ = purify(g, None, den, sch, PurifyConfig(t_p=t_p, guidance=False, seed=seed),
                        lambda_matrix=lam)
        hits += out.adjacency[iu]
    oracle = np.array(oracle)
    sd = np.sqrt(oracle * (1 - oracle) / runs)
    assert np.all(np.abs(hits / runs - oracle) <= 4 * sd + 1e-12)


def test_purification_is_deterministic():
    g = _attacked(seed=3)
    sch = build_schedule(20, 0.008, 0.2)
    split = split_dataset(12, (0.5, 0.2, 0.3), seed=0)
    clf = train_classifier(g, split, TrainConfig(epochs=20, seed=0)).params
    den = DenoiserParams.init(3, 4, 3, 2, seed=1)
    cfg = PurifyConfig(t_p=4, seed=5, lid=PurifyConfig().lid.__class__(k=3))
    a, ta = purify(g, clf, den, sch, cfg)
    b, tb = purify(g, clf, den, sch, cfg)
    assert np.array_equal(a.adjacency, b.adjacency)
    assert ta.steps == tb.steps
    assert len(ta.steps) == 4 and [s["t"] for s in ta.steps] == [4, 3, 2, 1]


def test_unguided_isotropic_equals_plain_reverse_diffusion():
    g = _attacked(seed=4)
    sch = build_schedule(20, 0.008, 0.2)
    den = DenoiserParams.init(3, 4, 3, 2, seed=2)
    cfg = PurifyConfig(t_p=5, guidance=False, isotropic=True, seed=7)
    out, _ = purify(g, None, den, sch, cfg)
    state = forward_sample(g.adjacency, sch, 5, rng=rng_stream(7, 0, "init"))
    for t in range(5, 0, -1):
        prob = reverse_probs(den, state, g.features, sch, t)
        state = sample_edges(prob, rng_stream(7, 0, "reverse", t))
    assert np.array_equal(out.adjacency, state)


def test_mask_grows_as_denoising_proceeds():
    g = _attacked(n=16, seed=5)
    sch = build_schedule(30, 0.008, 0.2)
    rng = np.random.default_rng(0)
    lam = rng.random((16, 16))
    lam = (lam + lam.T) / 2
    den = DenoiserParams.init(3, 4, 3, 2, seed=2)
    _, trace = purify(g, None, den, sch, PurifyConfig(t_p=8, guidance=False),
                      lambda_matrix=lam)
    dens = [s["mask_density"] for s in trace.steps]
    assert len(dens) == 8 and all(b >= a for a, b in zip(dens, dens[1:]))


def test_stronger_degree_changes_more_edges():
    g = _attacked(n=16, seed=6)
    sch = build_schedule(30, 0.008, 0.2)
    den = _edge_only_denoiser(3, gain=6.0, bias=-3.0)  # trusts the noisy state
    iu = np.triu_indices(16, 1)
    changed = {}
    for level in (0.2, 1.0):
        lam = np.full((16, 16), level)
        changed[level] = np.mean([
            (purify(g, None, den, sch, PurifyConfig(t_p=8, guidance=False, seed=s),
                    lambda_matrix=lam)[0].adjacency[iu] != g.adjacency[iu]).sum()
            for s in range(10)])
    assert changed[1.0] > changed[0.2]


def test_majority_vote_over_restarts():
    g = _attacked(seed=7)
    sch = build_schedule(20, 0.008, 0.2)
    den = DenoiserParams.init(3, 4, 3, 2, seed=2)
    cfg = PurifyConfig(t_p=5, guidance=False, isotropic=True, num_restarts=3, seed=1)
    out, trace = purify(g, None, den, sch, cfg)
    from graphpurify.lid import build_timetable
    table = build_timetable(np.ones((12, 12)) - np.eye(12), sch, 5)
    chains = [_chain(g, den, sch, cfg, table, r, None) for r in range(3)]
    want = (np.sum(chains, axis=0) >= 2).astype(np.uint8)
    assert np.array_equal(out.adjacency, want)
    assert trace.restarts == 3 and len(trace.steps) == 5


def test_guided_run_records_guidance():
    g = _attacked(seed=8)
    sch = build_schedule(20, 0.008, 0.2)
    den = DenoiserParams.init(3, 4, 3, 2, seed=2)
    _, trace = purify(g, None, den, sch, PurifyConfig(t_p=3), lambda_matrix=np.ones((12, 12)))
    assert any(s["guidance_norm"] > 0 for s in trace.steps)
    assert all(s["transfer_entropy"] is None or np.isfinite(s["transfer_entropy"])
               for s in trace.steps)


def test_config_validation():
    sch = build_schedule(10, 0.008, 0.2)
    g = _attacked()
    den = DenoiserParams.init(3, 4, 3, 2)
    for cfg in (PurifyConfig(t_p=10), PurifyConfig(t_p=0), PurifyConfig(num_restarts=0),
                PurifyConfig(t_p=3, reference="other")):
        with pytest.raises(ValueError):
            purify(g, None, den, sch, cfg, lambda_matrix=np.ones((12, 12)))
    with pytest.raises(PurificationError):
        purify(g, None, den, sch, PurifyConfig(t_p=3), lambda_matrix=np.ones((5, 5)))


def test_trajectory_reference_is_valid():
    g = _attacked(seed=9)
    sch = build_schedule(20, 0.008, 0.2)
    den = DenoiserParams.init(3, 4, 3, 2, seed=2)
    out, _ = purify(g, None, den, sch, PurifyConfig(t_p=4, reference="trajectory"),
                    lambda_matrix=np.full((12, 12), 0.5))
    Graph(out.adjacency, g.features)


@pytest.fixture(scope="module")
def scored():
    g = generate_sbm(SbmConfig(40, 2, 0.3, 0.02, seed=0, feature_dim=4))
    split = split_dataset(40, (0.5, 0.2, 0.3), seed=0)
    clf = train_classifier(g, split, TrainConfig(epochs=100, learning_rate=1e-2)).params
    rng = np.random.default_rng(0)
    flips = np.triu(rng.random((40, 40)) < 0.05, 1).astype(np.uint8)
    flips = flips | flips.T
    return g, g.with_adjacency(g.adjacency ^ flips), flips, clf, split.test


def test_evaluation_trivial_cases(scored):
    clean, attacked, flips, clf, idx = scored
    m = evaluate_purification(clean, attacked, clean, flips, clf, idx)
    assert m.removal_rate == 1.0 and m.preservation_rate == 1.0
    if m.acc_clean != m.acc_attacked:
        assert m.recovery_ratio == pytest.approx(1.0)
    m = evaluate_purification(clean, attacked, attacked, flips, clf, idx)
    assert m.removal_rate == 0.0 and m.preservation_rate == 1.0 and m.recovery_ratio == 0.0
    comp = attacked.with_adjacency((1 - attacked.adjacency) * (1 - np.eye(40, dtype=np.uint8)))
    m = evaluate_purification(clean, attacked, comp, flips, clf, idx)
    assert m.removal_rate == 1.0 and m.preservation_rate == 0.0


def test_evaluation_for_graph_tasks():
    from graphpurify.gnn import GcnParams
    rng = np.random.default_rng(1)
    graphs = [Graph(random_adjacency(rng, 6), rng.standard_normal((6, 2)), None, i % 2)
              for i in range(4)]
    clf = GcnParams.init(2, 2, task="graph", seed=0)
    masks = [np.zeros((6, 6), dtype=np.uint8) for _ in graphs]
    m = evaluate_purification(graphs, graphs, graphs, masks, clf)
    assert m.removal_rate == 1.0 and m.preservation_rate == 1.0
