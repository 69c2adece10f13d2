"""Two-layer GCN classifier with hand-written backpropagation.

The forward pass is

    H1 = relu(Â X W1 + b1)
    H2 = relu(Â H1 W2 + b2)
    logits = H2 Wout + bout            (node task)
    logits = mean_rows(H2) Wout + bout (graph task)

with Â = D^-1/2 (A + I) D^-1/2. ``H2`` is what the LID estimator consumes.
Every function accepts a real-valued adjacency so gradients with respect to
the edge weights are available to the structural attacks.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphcore import DatasetSplit, Graph, rng_stream
from .optim import make_optimizer

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wout", "bout")
CHECKPOINT_FORMAT = "graphpurify.gcn/v1"


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class GcnParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wout: np.ndarray
    bout: np.ndarray
    task: str = "node"

    def __post_init__(self):
        if self.task not in ("node", "graph"):
            raise ValueError(f"task must be 'node' or 'graph', got {self.task!r}")
        f, h = self.W1.shape
        h_, h2 = self.W2.shape
        h2_, c = self.Wout.shape
        if h != h_ or h2 != h2_ or self.b1.shape != (h,) or self.b2.shape != (h2,) \
                or self.bout.shape != (c,):
            raise ValueError("inconsistent GCN parameter shapes")
        for name in PARAM_NAMES:
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"parameter {name} has non-finite entries")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1], self.Wout.shape[1]

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "GcnParams":
        return GcnParams(**{k: v.copy() for k, v in self.as_dict().items()}, task=self.task)

    @classmethod
    def init(cls, in_dim: int, num_classes: int, hidden=16, hidden2=16, task="node", seed=0):
        rng = rng_stream(seed, "gcn-init")

        def glorot(a, b):
            lim = np.sqrt(6.0 / (a + b))
            return rng.uniform(-lim, lim, size=(a, b))

        return cls(
            W1=glorot(in_dim, hidden), b1=np.zeros(hidden),
            W2=glorot(hidden, hidden2), b2=np.zeros(hidden2),
            Wout=glorot(hidden2, num_classes), bout=np.zeros(num_classes),
            task=task,
        )

    @classmethod
    def zeros(cls, in_dim: int, num_classes: int, hidden=16, hidden2=16, task="node"):
        return cls(np.zeros((in_dim, hidden)), np.zeros(hidden), np.zeros((hidden, hidden2)),
                   np.zeros(hidden2), np.zeros((hidden2, num_classes)), np.zeros(num_classes), task)


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 200
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 5e-4
    seed: int = 0
    hidden: int = 16
    hidden2: int = 16

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class ForwardCache:
    norm_adj: np.ndarray
    inv_sqrt_deg: np.ndarray
    features: np.ndarray
    P1: np.ndarray
    Z1: np.ndarray
    H1: np.ndarray
    P2: np.ndarray
    Z2: np.ndarray
    H2: np.ndarray
    logits: np.ndarray


def normalize_adjacency(adjacency: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(D^-1/2 (A+I) D^-1/2, d^-1/2)`` for a real adjacency."""
    s = np.asarray(adjacency, dtype=np.float64) + np.eye(adjacency.shape[0])
    inv_sqrt = 1.0 / np.sqrt(s.sum(axis=1))
    return inv_sqrt[:, None] * s * inv_sqrt[None, :], inv_sqrt


def normalization_backward(grad_norm: np.ndarray, norm_adj: np.ndarray,
                           inv_sqrt_deg: np.ndarray) -> np.ndarray:
    """Pull ``dL/dÂ`` back to ``dL/dA`` through the symmetric normalization.

    Entries of A are treated as independent variables (no symmetry tying);
    the degree of node k is the k-th row sum of A + I.
    """
    direct = grad_norm * np.outer(inv_sqrt_deg, inv_sqrt_deg)
    weighted = grad_norm * norm_adj
    inv_deg = inv_sqrt_deg ** 2
    grad_deg = -0.5 * inv_deg * (weighted.sum(axis=1) + weighted.sum(axis=0))
    return direct + grad_deg[:, None]


def _forward(params: GcnParams, adjacency, features, task=None) -> ForwardCache:
    task = task or params.task
    x = np.asarray(features, dtype=np.float64)
    a = np.asarray(adjacency, dtype=np.float64)
    if not (np.isfinite(x).all() and np.isfinite(a).all()):
        raise ValueError("non-finite input to gcn forward pass")
    if x.shape[1] != params.W1.shape[0]:
        raise ValueError(f"feature width {x.shape[1]} != parameter input width {params.W1.shape[0]}")
    norm_adj, inv_sqrt = normalize_adjacency(a)
    P1 = norm_adj @ x
    Z1 = P1 @ params.W1 + params.b1
    H1 = np.maximum(Z1, 0.0)
    P2 = norm_adj @ H1
    Z2 = P2 @ params.W2 + params.b2
    H2 = np.maximum(Z2, 0.0)
    if task == "node":
        logits = H2 @ params.Wout + params.bout
    elif task == "graph":
        logits = H2.mean(axis=0) @ params.Wout + params.bout
    else:
        raise ValueError(f"unknown task {task!r}")
    return ForwardCache(norm_adj, inv_sqrt, x, P1, Z1, H1, P2, Z2, H2, logits)


def gcn_forward(params: GcnParams, graph: Graph, task: str | None = None):
    """Return ``(logits, hidden)`` where ``hidden`` is the post-ReLU layer-2 output."""
    cache = _forward(params, graph.adjacency, graph.features, task)
    return cache.logits, cache.H2


def gcn_forward_dense(params: GcnParams, adjacency, features, task: str | None = None):
    cache = _forward(params, adjacency, features, task)
    return cache.logits, cache.H2


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    logp = log_softmax(logits)
    m = len(labels)
    loss = -logp[np.arange(m), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(m), labels] -= 1.0
    return float(loss), grad / m


def _backward(params: GcnParams, cache: ForwardCache, grad_logits: np.ndarray, task: str,
              want_adjacency=False):
    grads = {}
    n = cache.H2.shape[0]
    if task == "node":
        grads["Wout"] = cache.H2.T @ grad_logits
        grads["bout"] = grad_logits.sum(axis=0)
        dH2 = grad_logits @ params.Wout.T
    else:
        g = np.ravel(grad_logits)
        grads["Wout"] = np.outer(cache.H2.mean(axis=0), g)
        grads["bout"] = g.copy()
        dH2 = np.tile(params.Wout @ g / n, (n, 1))
    dZ2 = dH2 * (cache.Z2 > 0)
    grads["W2"] = cache.P2.T @ dZ2
    grads["b2"] = dZ2.sum(axis=0)
    dP2 = dZ2 @ params.W2.T
    dH1 = cache.norm_adj.T @ dP2
    dZ1 = dH1 * (cache.Z1 > 0)
    grads["W1"] = cache.P1.T @ dZ1
    grads["b1"] = dZ1.sum(axis=0)
    grad_adj = None
    if want_adjacency:
        dP1 = dZ1 @ params.W1.T
        d_norm = dP2 @ cache.H1.T + dP1 @ cache.features.T
        grad_adj = normalization_backward(d_norm, cache.norm_adj, cache.inv_sqrt_deg)
    return grads, grad_adj


def loss_and_grads(params: GcnParams, adjacency, features, labels, idx=None,
                   want_adjacency=False):
    """Cross-entropy on ``idx`` (node task) or on the single graph label.

    Returns ``(loss, param_grads, adjacency_grad_or_None)``; the adjacency
    gradient is unsymmetrized.
    """
    task = params.task
    cache = _forward(params, adjacency, features, task)
    if task == "node":
        idx = np.arange(cache.logits.shape[0]) if idx is None else np.asarray(idx)
        loss, g_sel = cross_entropy(cache.logits[idx], np.asarray(labels)[idx])
        g = np.zeros_like(cache.logits)
        np.add.at(g, idx, g_sel)
    else:
        loss, g = cross_entropy(cache.logits, labels)
        g = g[0]
    grads, grad_adj = _backward(params, cache, g, task, want_adjacency)
    return loss, grads, grad_adj


def grad_wrt_adjacency(params: GcnParams, graph_or_adj, loss_target, features=None, idx=None):
    """Gradient of the classification loss with respect to a continuous adjacency.

    ``loss_target`` holds node labels (node task) or the graph label (graph
    task). The result is symmetrized as ``(G + G^T) / 2`` with a zero diagonal.
    """
    if isinstance(graph_or_adj, Graph):
        adjacency, features = graph_or_adj.adjacency, graph_or_adj.features
    else:
        adjacency = graph_or_adj
    _, _, g = loss_and_grads(params, adjacency, features, loss_target, idx, want_adjacency=True)
    g = 0.5 * (g + g.T)
    np.fill_diagonal(g, 0.0)
    return g


def predict(params: GcnParams, graph: Graph) -> np.ndarray:
    logits, _ = gcn_forward(params, graph)
    return np.argmax(np.atleast_2d(logits), axis=-1)


def accuracy_from_logits(logits: np.ndarray, labels) -> float:
    """Argmax accuracy; ties resolve to the smaller class index."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def predict_accuracy(params: GcnParams, data, labels=None, idx=None) -> float:
    """Accuracy on nodes of one graph (node task) or over a list of graphs."""
    if params.task == "node":
        logits, _ = gcn_forward(params, data)
        labels = data.node_labels if labels is None else np.asarray(labels)
        idx = np.arange(len(labels)) if idx is None else np.asarray(idx)
        return accuracy_from_logits(logits[idx], labels[idx])
    graphs = list(data)
    labels = [g.graph_label for g in graphs] if labels is None else list(labels)
    logits = np.stack([gcn_forward(params, g)[0] for g in graphs])
    return accuracy_from_logits(logits, labels)


@dataclass
class TrainResult:
    params: GcnParams
    loss_history: list[float] = field(default_factory=list)


def train_classifier(dataset, splits: DatasetSplit, config: TrainConfig, task: str | None = None,
                     num_classes: int | None = None) -> TrainResult:
    """Full-batch training on the train split.

    ``dataset`` is one labelled :class:`Graph` for node classification or a
    sequence of graphs with ``graph_label`` set for graph classification.
    """
    if task is None:
        task = "node" if isinstance(dataset, Graph) else "graph"
    if task == "node":
        labels = dataset.node_labels
        if labels is None:
            raise ValueError("node classification needs node_labels")
        in_dim = dataset.features.shape[1]
        nc = num_classes or int(labels.max()) + 1
    else:
        graphs = list(dataset)
        train_graphs = [graphs[i] for i in splits.train]
        if any(g.graph_label is None for g in train_graphs):
            raise ValueError("graph classification needs graph_label on training graphs")
        in_dim = graphs[0].features.shape[1]
        nc = num_classes or max(g.graph_label for g in graphs if g.graph_label is not None) + 1
    if len(splits.train) == 0:
        raise ValueError("empty training split")

    params = GcnParams.init(in_dim, nc, config.hidden, config.hidden2, task, config.seed)
    tensors = params.as_dict()
    opt = make_optimizer(config.optimizer, tensors, config.learning_rate, config.betas,
                         config.eps, config.weight_decay)
    history = []
    for epoch in range(config.epochs):
        if task == "node":
            loss, grads, _ = loss_and_grads(params, dataset.adjacency, dataset.features,
                                            labels, splits.train)
        else:
            loss = 0.0
            grads = {k: np.zeros_like(v) for k, v in tensors.items()}
            for g in train_graphs:
                l, gr, _ = loss_and_grads(params, g.adjacency, g.features, g.graph_label)
                loss += l / len(train_graphs)
                for k in grads:
                    grads[k] += gr[k] / len(train_graphs)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"classifier loss became {loss} at epoch {epoch}")
        history.append(loss)
        opt.step(tensors, grads)
    log.debug("classifier trained: final loss %.4f", history[-1])
    return TrainResult(params, history)


def save_params(params: GcnParams, path) -> None:
    f, h, h2, c = params.dims
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": {"F": f, "H": h, "H2": h2, "C": c, "task": params.task},
        "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in params.as_dict().items()},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_params(path) -> GcnParams:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a GCN checkpoint (format {doc.get('format')!r})")
    arrays = {k: np.array(t["data"], dtype=np.float64).reshape(t["shape"])
              for k, t in doc["tensors"].items()}
    params = GcnParams(**arrays, task=doc["config"]["task"])
    cfg = doc["config"]
    if params.dims != (cfg["F"], cfg["H"], cfg["H2"], cfg["C"]):
        raise ValueError(f"{path}: tensor shapes disagree with the config header")
    return params
