"""Structural evasion attacks under an edge-flip budget."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gnn import GcnParams, grad_wrt_adjacency, loss_and_grads
from .graphcore import Graph, rng_stream


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackBudget:
    fraction: float
    resolved_count: int

    @classmethod
    def resolve(cls, fraction: float, num_edges: int) -> "AttackBudget":
        if not 0.0 < fraction < 1.0:
            raise ValueError(f"budget fraction must lie in (0, 1), got {fraction}")
        count = max(1, int(math.floor(fraction * num_edges + 0.5)))
        return cls(fraction, count)


@dataclass(frozen=True, eq=False)
class AttackResult:
    perturbed: Graph
    flipped_mask: np.ndarray
    attack_name: str
    seed: int
    metadata: dict = field(default_factory=dict)

    @property
    def num_flips(self) -> int:
        return int(np.triu(self.flipped_mask, k=1).sum())

    def flipped_pairs(self) -> list[tuple[int, int]]:
        iu, ju = np.nonzero(np.triu(self.flipped_mask, k=1))
        return list(zip(iu.tolist(), ju.tolist()))


def _budget(graph: Graph, budget) -> AttackBudget:
    if isinstance(budget, AttackBudget):
        return budget
    if isinstance(budget, (int, np.integer)) and not isinstance(budget, bool):
        if budget < 1:
            raise ValueError("budget must flip at least one pair")
        return AttackBudget(budget / max(graph.num_edges, 1), int(budget))
    return AttackBudget.resolve(float(budget), graph.num_edges)


def _apply(graph: Graph, pairs, name: str, seed: int, **meta) -> AttackResult:
    n = graph.num_nodes
    mask = np.zeros((n, n), dtype=np.uint8)
    for i, j in pairs:
        mask[i, j] = mask[j, i] = 1
    return AttackResult(graph.with_adjacency(graph.adjacency ^ mask), mask, name, seed, meta)


def _upper_pairs(cond: np.ndarray) -> np.ndarray:
    iu, ju = np.nonzero(np.triu(cond, k=1))
    return np.stack([iu, ju], axis=1)


def attack_random(graph: Graph, budget, seed: int = 0) -> AttackResult:
    """Insert ``budget`` uniformly chosen non-edges."""
    b = _budget(graph, budget)
    non_edges = _upper_pairs(graph.adjacency == 0)
    if len(non_edges) < b.resolved_count:
        raise AttackError(
            f"need {b.resolved_count} absent pairs to insert, graph has {len(non_edges)}")
    rng = rng_stream(seed, "attack-random")
    pick = rng.choice(len(non_edges), size=b.resolved_count, replace=False)
    return _apply(graph, non_edges[np.sort(pick)], "random", seed, budget=b.resolved_count)


def attack_dice(graph: Graph, labels=None, budget=0.1, seed: int = 0) -> AttackResult:
    """Delete intra-class edges and insert inter-class non-edges.

    Half the budget (rounded down) goes to deletions and the rest to
    insertions; when one pool runs dry the other action takes over.
    """
    labels = graph.node_labels if labels is None else np.asarray(labels)
    if labels is None:
        raise AttackError("DICE needs node labels")
    b = _budget(graph, budget)
    same = labels[:, None] == labels[None, :]
    rng = rng_stream(seed, "attack-dice")
    del_pool = _upper_pairs((graph.adjacency == 1) & same)
    ins_pool = _upper_pairs((graph.adjacency == 0) & ~same)
    del_pool = del_pool[rng.permutation(len(del_pool))]
    ins_pool = ins_pool[rng.permutation(len(ins_pool))]
    n_del = b.resolved_count // 2
    n_ins = b.resolved_count - n_del
    if n_del > len(del_pool):
        n_ins += n_del - len(del_pool)
        n_del = len(del_pool)
    if n_ins > len(ins_pool):
        n_del = min(len(del_pool), n_del + n_ins - len(ins_pool))
        n_ins = len(ins_pool)
    pairs = np.concatenate([del_pool[:n_del], ins_pool[:n_ins]]).reshape(-1, 2)
    partial = n_del + n_ins < b.resolved_count
    return _apply(graph, pairs, "dice", seed, budget=b.resolved_count, deletions=int(n_del),
                  insertions=int(n_ins), partial=bool(partial))


def flip_scores(grad: np.ndarray, adjacency: np.ndarray) -> np.ndarray:
    """First-order loss change of flipping each pair: positive grad favours insertion."""
    return grad * (1.0 - 2.0 * np.asarray(adjacency, dtype=np.float64))


def attack_grad_greedy(graph: Graph, classifier_params: GcnParams, labels=None, budget=0.1,
                       seed: int = 0, target_idx=None) -> AttackResult:
    """Greedy gradient attack: flip the best-scoring pair, recompute, repeat.

    The loss is the classifier's cross-entropy on ``target_idx`` (all nodes
    by default) for node tasks, or on the graph label for graph tasks. Pairs
    are never flipped twice. ``seed`` is recorded only; the attack is
    deterministic with ties going to the lowest (row, col) pair.
    """
    b = _budget(graph, budget)
    task = classifier_params.task
    if labels is None:
        labels = graph.node_labels if task == "node" else graph.graph_label
    if labels is None:
        raise AttackError("gradient attack needs labels for its loss")
    n = graph.num_nodes
    adj = graph.adjacency.astype(np.float64)
    feats = graph.features
    used = np.eye(n, dtype=bool)
    losses = []
    pairs = []
    for _ in range(b.resolved_count):
        g = grad_wrt_adjacency(classifier_params, adj, labels, features=feats, idx=target_idx)
        score = flip_scores(g, adj)
        score[used] = -np.inf
        score[np.tril_indices(n)] = -np.inf
        flat = int(np.argmax(score))
        if not np.isfinite(score.flat[flat]):
            raise AttackError("no feasible pair left to flip")
        i, j = divmod(flat, n)
        adj[i, j] = adj[j, i] = 1.0 - adj[i, j]
        used[i, j] = used[j, i] = True
        pairs.append((i, j))
        losses.append(loss_and_grads(classifier_params, adj, feats, labels, target_idx)[0])
    return _apply(graph, pairs, "grad_greedy", seed, budget=b.resolved_count,
                  loss_trace=[float(v) for v in losses])


ATTACKS = {
    "random": lambda g, params, budget, seed, idx: attack_random(g, budget, seed),
    "dice": lambda g, params, budget, seed, idx: attack_dice(g, None, budget, seed),
    "grad_greedy": lambda g, params, budget, seed, idx: attack_grad_greedy(
        g, params, None, budget, seed, idx),
}


def run_attack(name: str, graph: Graph, params: GcnParams, budget, seed: int,
               target_idx=None) -> AttackResult:
    if name not in ATTACKS:
        raise ValueError(f"unknown attack {name!r}; choose from {sorted(ATTACKS)}")
    return ATTACKS[name](graph, params, budget, seed, target_idx)
