"""Two-state discrete diffusion over the upper triangle of an adjacency matrix.

Forward corruption uses ``Qbar(t) = abar(t) I + (1 - abar(t)) 1 m^T`` with the
cosine schedule and the edge-density marginal ``m``. The denoiser predicts
``p(A0 | At, t)`` for every node pair; the reverse step mixes the closed-form
posterior ``q(A_{t-1} | At, A0)`` over that prediction.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .gnn import TrainingDiverged, normalize_adjacency
from .graphcore import EdgeStateVector, Graph, rng_stream
from .optim import make_optimizer

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "graphpurify.denoiser/v1"


# ---------------------------------------------------------------- schedule

def cosine_alpha_bar(t, T: int, s: float):
    """``cos^2(((t/T + s)/(1 + s)) * pi/2)`` for real-valued ``t``."""
    return np.cos((np.asarray(t, dtype=np.float64) / T + s) / (1 + s) * (np.pi / 2)) ** 2


def cosine_one_minus_alpha_bar(t, T: int, s: float):
    # sin^2 avoids the cancellation in 1 - cos^2 near t = 0
    return np.sin((np.asarray(t, dtype=np.float64) / T + s) / (1 + s) * (np.pi / 2)) ** 2


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    s: float
    edge_density: float
    alpha_bar: np.ndarray = field(repr=False)
    m: EdgeStateVector = field(repr=False)

    def snr(self, t) -> np.ndarray:
        """Noise-to-signal ratio ``(1 - abar) / abar`` at integer or real ``t``."""
        return cosine_one_minus_alpha_bar(t, self.T, self.s) / cosine_alpha_bar(t, self.T, self.s)

    def to_dict(self) -> dict:
        return {"T": self.T, "s": self.s, "edge_density": self.edge_density}


def build_schedule(T: int, s: float = 0.008, edge_density: float = 0.1) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not s > 0:
        raise ValueError(f"s must be positive, got {s}")
    if not 0.0 < edge_density < 1.0:
        raise ValueError(f"edge_density must lie strictly inside (0, 1), got {edge_density}")
    T = int(T)
    abar = cosine_alpha_bar(np.arange(T + 1), T, s)
    abar[T] = 0.0  # cos(pi/2) is 6e-17 in floating point, the formula's endpoint is exactly 0
    abar.setflags(write=False)
    m = EdgeStateVector(np.array([1.0 - edge_density, edge_density]))
    return NoiseSchedule(T, float(s), float(edge_density), abar, m)


def _check_t(schedule: NoiseSchedule, t: int, lo: int = 0):
    if not (lo <= t <= schedule.T) or int(t) != t:
        raise ValueError(f"time step {t} outside [{lo}, {schedule.T}]")


def transition(alpha: float, m) -> np.ndarray:
    """``alpha I + (1 - alpha) 1 m^T`` as a 2x2 row-stochastic matrix."""
    m = np.asarray(getattr(m, "probabilities", m), dtype=np.float64)
    return alpha * np.eye(2) + (1.0 - alpha) * np.outer(np.ones(2), m)


def qbar(schedule: NoiseSchedule, t: int) -> np.ndarray:
    _check_t(schedule, t)
    return transition(schedule.alpha_bar[t], schedule.m)


def q_step(schedule: NoiseSchedule, t: int) -> np.ndarray:
    """Single-step ``Q(t) = Qbar(t-1)^-1 Qbar(t)`` via the explicit 2x2 inverse."""
    _check_t(schedule, t, lo=1)
    prev = qbar(schedule, t - 1)
    det = prev[0, 0] * prev[1, 1] - prev[0, 1] * prev[1, 0]
    if schedule.alpha_bar[t - 1] == 0.0 or det == 0.0:
        raise ValueError(f"Qbar({t - 1}) is singular")
    inv = np.array([[prev[1, 1], -prev[0, 1]], [-prev[1, 0], prev[0, 0]]]) / det
    return inv @ qbar(schedule, t)


def posterior(a_t: int, a_0: int, schedule: NoiseSchedule, t: int) -> EdgeStateVector:
    """``q(A_{t-1} | A_t = a_t, A_0 = a_0)`` over the two edge states."""
    q = q_step(schedule, t)
    qb = qbar(schedule, t - 1)
    unnorm = q[:, a_t] * qb[a_0, :]
    z = unnorm.sum()
    if not z > 0:
        raise ValueError(f"inconsistent (a_t={a_t}, a_0={a_0}, t={t}): zero posterior mass")
    p = unnorm / z
    return EdgeStateVector(p / p.sum())


def posterior_table(schedule: NoiseSchedule, t: int) -> np.ndarray:
    """``table[a_t, a_0] = q(A_{t-1} = 1 | a_t, a_0)``."""
    return np.array([[posterior(at, a0, schedule, t)[1] for a0 in (0, 1)] for at in (0, 1)])


def forward_sample(graph_or_adj, schedule: NoiseSchedule, t: int, seed=None,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw ``A(t) ~ q(A(t) | A(0))`` independently per upper-triangle pair."""
    _check_t(schedule, t)
    adj = graph_or_adj.adjacency if isinstance(graph_or_adj, Graph) else np.asarray(graph_or_adj)
    if rng is None:
        rng = rng_stream(0 if seed is None else seed, "forward", t)
    n = adj.shape[0]
    qb = qbar(schedule, t)
    iu, ju = np.triu_indices(n, k=1)
    p_on = qb[adj[iu, ju].astype(np.int64), 1]
    on = rng.random(len(iu)) < p_on
    out = np.zeros((n, n), dtype=np.uint8)
    out[iu[on], ju[on]] = 1
    return out | out.T


def sample_edges(prob: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli draw of the upper triangle of ``prob``, mirrored."""
    n = prob.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    on = rng.random(len(iu)) < prob[iu, ju]
    out = np.zeros((n, n), dtype=np.uint8)
    out[iu[on], ju[on]] = 1
    return out | out.T


# ---------------------------------------------------------------- denoiser

DENOISER_NAMES = ("W_in", "b_in", "W_t", "W1", "b1", "W2", "b2",
                  "S_prod", "S_sum", "S_time", "S_pair", "c1", "s_out", "c_out")
SCORER_NAMES = ("S_prod", "S_sum", "S_time", "S_pair", "c1", "s_out", "c_out")
PAIR_FEATURES = ("edge", "common", "edge_x_common", "cosine", "edge_x_cosine")


def time_embedding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])


@dataclass
class DenoiserParams:
    """Message-passing encoder plus a symmetric pairwise edge scorer.

    The encoder adds its input embedding back onto the second propagation
    round so node identity survives heavy structural noise. For a pair
    (i, j) the scorer sees ``h_i * h_j``, ``h_i + h_j``, the time embedding
    and fixed structural pair features of the noisy graph (see
    :func:`pair_features`), and outputs the log-odds that the clean edge is
    present.
    """

    tensors: dict

    def __post_init__(self):
        missing = set(DENOISER_NAMES) - set(self.tensors)
        if missing:
            raise ValueError(f"denoiser tensors missing: {sorted(missing)}")
        for k, v in self.tensors.items():
            if not np.isfinite(v).all():
                raise ValueError(f"denoiser tensor {k} has non-finite entries")
        d = self.width
        t = self.tensors
        if t["W1"].shape != (d, d) or t["W2"].shape != (d, d) or t["S_prod"].shape[0] != d \
                or t["S_sum"].shape[0] != d or t["S_time"].shape[0] != t["W_t"].shape[0]:
            raise ValueError("inconsistent denoiser tensor shapes")

    @property
    def width(self) -> int:
        return self.tensors["W_in"].shape[1]

    @property
    def in_dim(self) -> int:
        return self.tensors["W_in"].shape[0]

    @property
    def time_dim(self) -> int:
        return self.tensors["W_t"].shape[0]

    @property
    def scorer_hidden(self) -> int:
        return self.tensors["c1"].shape[0]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams({k: v.copy() for k, v in self.tensors.items()})

    @classmethod
    def init(cls, in_dim: int, width=32, scorer_hidden=32, time_dim=16, seed=0):
        rng = rng_stream(seed, "denoiser-init")

        def glorot(a, b):
            lim = np.sqrt(6.0 / (a + b))
            return rng.uniform(-lim, lim, size=(a, b))

        d, m, e = width, scorer_hidden, time_dim
        return cls({
            "W_in": glorot(in_dim, d), "b_in": np.zeros(d), "W_t": glorot(e, d),
            "W1": glorot(d, d), "b1": np.zeros(d), "W2": glorot(d, d), "b2": np.zeros(d),
            "S_prod": glorot(d, m), "S_sum": glorot(d, m), "S_time": glorot(e, m),
            "S_pair": glorot(len(PAIR_FEATURES), m), "c1": np.zeros(m),
            "s_out": glorot(m, 1)[:, 0], "c_out": np.zeros(1),
        })

    def with_zero_scorer(self) -> "DenoiserParams":
        p = self.copy()
        for k in SCORER_NAMES:
            p.tensors[k][...] = 0.0
        return p


@lru_cache(maxsize=16)
def _pair_index(n: int):
    iu, ju = np.triu_indices(n, k=1)
    cols = np.arange(len(iu))
    ones = np.ones(len(iu))
    inc_i = sp.csr_matrix((ones, (iu, cols)), shape=(n, len(iu)))
    inc_j = sp.csr_matrix((ones, (ju, cols)), shape=(n, len(iu)))
    return iu, ju, inc_i, inc_j


def pair_features(adjacency, features) -> np.ndarray:
    """Parameter-free pair descriptors, one row per upper-triangle pair.

    Columns follow ``PAIR_FEATURES``: the edge state, ``log1p`` of the
    common-neighbour count, the cosine similarity of two-hop smoothed node
    features, and the products of the edge state with the latter two.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    n = a.shape[0]
    iu, ju, _, _ = _pair_index(n)
    edge = a[iu, ju]
    common = np.log1p((a @ a)[iu, ju])
    norm_adj, _ = normalize_adjacency(a)
    smooth = norm_adj @ (norm_adj @ np.asarray(features, dtype=np.float64))
    smooth = smooth / np.maximum(np.linalg.norm(smooth, axis=1, keepdims=True), 1e-12)
    cosine = np.einsum("ij,ij->i", smooth[iu], smooth[ju])
    return np.stack([edge, common, edge * common, cosine, edge * cosine], axis=1)


def _denoiser_forward(params: DenoiserParams, adjacency, features, t: int):
    p = params.tensors
    a = np.asarray(adjacency, dtype=np.float64)
    x = np.asarray(features, dtype=np.float64)
    n = a.shape[0]
    iu, ju, _, _ = _pair_index(n)
    temb = time_embedding(t, params.time_dim)
    norm_adj, _ = normalize_adjacency(a)
    h0 = x @ p["W_in"] + p["b_in"] + temb @ p["W_t"]
    P1 = norm_adj @ h0
    Z1 = P1 @ p["W1"] + p["b1"]
    h1 = np.maximum(Z1, 0.0)
    P2 = norm_adj @ h1
    Z2 = P2 @ p["W2"] + p["b2"]
    h2 = np.maximum(Z2, 0.0) + h0
    hi, hj = h2[iu], h2[ju]
    prod, summ = hi * hj, hi + hj
    pf = pair_features(a, x)
    U = prod @ p["S_prod"] + summ @ p["S_sum"] + (temb @ p["S_time"] + p["c1"]) \
        + pf @ p["S_pair"]
    Zs = np.maximum(U, 0.0)
    logits = Zs @ p["s_out"] + p["c_out"][0]
    if not np.isfinite(logits).all():
        raise FloatingPointError("denoiser produced non-finite activations")
    cache = dict(norm_adj=norm_adj, x=x, temb=temb, h0=h0, P1=P1, Z1=Z1, h1=h1, P2=P2, Z2=Z2,
                 h2=h2, hi=hi, hj=hj, prod=prod, summ=summ, pf=pf, U=U, Zs=Zs)
    return logits, cache


def _denoiser_backward(params: DenoiserParams, cache: dict, d_logits: np.ndarray) -> dict:
    p = params.tensors
    n = cache["h2"].shape[0]
    _, _, inc_i, inc_j = _pair_index(n)
    g = {}
    g["s_out"] = cache["Zs"].T @ d_logits
    g["c_out"] = np.array([d_logits.sum()])
    dU = np.outer(d_logits, p["s_out"]) * (cache["U"] > 0)
    g["S_prod"] = cache["prod"].T @ dU
    g["S_sum"] = cache["summ"].T @ dU
    dU_tot = dU.sum(axis=0)
    g["S_time"] = np.outer(cache["temb"], dU_tot)
    g["c1"] = dU_tot
    g["S_pair"] = cache["pf"].T @ dU
    d_prod = dU @ p["S_prod"].T
    d_sum = dU @ p["S_sum"].T
    dh2 = inc_i @ (d_prod * cache["hj"] + d_sum) + inc_j @ (d_prod * cache["hi"] + d_sum)
    dZ2 = dh2 * (cache["Z2"] > 0)
    g["W2"] = cache["P2"].T @ dZ2
    g["b2"] = dZ2.sum(axis=0)
    dh1 = cache["norm_adj"].T @ (dZ2 @ p["W2"].T)
    dZ1 = dh1 * (cache["Z1"] > 0)
    g["W1"] = cache["P1"].T @ dZ1
    g["b1"] = dZ1.sum(axis=0)
    dh0 = cache["norm_adj"].T @ (dZ1 @ p["W1"].T) + dh2
    g["W_in"] = cache["x"].T @ dh0
    g["b_in"] = dh0.sum(axis=0)
    g["W_t"] = np.outer(cache["temb"], dh0.sum(axis=0))
    return g


def _logits_to_matrix(logits: np.ndarray, n: int) -> np.ndarray:
    iu, ju, _, _ = _pair_index(n)
    prob = np.zeros((n, n))
    prob[iu, ju] = 1.0 / (1.0 + np.exp(-logits))
    return prob + prob.T


def denoise_predict(params: DenoiserParams, noisy, t: int, features=None) -> np.ndarray:
    """Edge-presence probabilities for ``A0`` given ``At`` (symmetric, zero diagonal)."""
    if isinstance(noisy, Graph):
        adjacency, features = noisy.adjacency, noisy.features
    else:
        adjacency = noisy
    if t < 1:
        raise ValueError("denoise_predict needs t >= 1")
    logits, _ = _denoiser_forward(params, adjacency, features, t)
    return _logits_to_matrix(logits, np.asarray(adjacency).shape[0])


def edge_cross_entropy(logits, target, weights=None):
    """Weighted mean binary cross-entropy on log-odds and its gradient.

    ``weights`` default to uniform; they are normalized to sum to one.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    w = np.full(logits.shape, 1.0 / logits.size) if weights is None \
        else np.asarray(weights, dtype=np.float64) / np.sum(weights)
    loss = float(np.sum(w * (np.logaddexp(0.0, logits) - target * logits)))
    return loss, w * (1.0 / (1.0 + np.exp(-logits)) - target)


def denoiser_loss(params: DenoiserParams, noisy_adj, features, clean_adj, t: int,
                  want_grads=True):
    """Mean per-pair binary cross-entropy against the clean upper triangle."""
    logits, cache = _denoiser_forward(params, noisy_adj, features, t)
    n = np.asarray(noisy_adj).shape[0]
    iu, ju, _, _ = _pair_index(n)
    target = np.asarray(clean_adj, dtype=np.float64)[iu, ju]
    loss, d_logits = edge_cross_entropy(logits, target)
    if not want_grads:
        return loss, None
    return loss, _denoiser_backward(params, cache, d_logits)


@dataclass
class DiffusionTrainConfig:
    steps: int = 2000
    learning_rate: float = 3e-4
    optimizer: str = "adam"
    weight_decay: float = 0.0
    width: int = 32
    scorer_hidden: int = 32
    time_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class DiffusionTrainResult:
    params: DenoiserParams
    loss_history: list[float] = field(default_factory=list)


def train_diffusion(clean_graphs, schedule: NoiseSchedule, config: DiffusionTrainConfig,
                    init: DenoiserParams | None = None) -> DiffusionTrainResult:
    """One (graph, t) pair per optimizer step, t uniform on ``1..T``."""
    graphs = [clean_graphs] if isinstance(clean_graphs, Graph) else list(clean_graphs)
    if not graphs:
        raise ValueError("train_diffusion needs at least one clean graph")
    params = init.copy() if init is not None else DenoiserParams.init(
        graphs[0].features.shape[1], config.width, config.scorer_hidden, config.time_dim,
        config.seed)
    opt = make_optimizer(config.optimizer, params.tensors, config.learning_rate,
                         weight_decay=config.weight_decay)
    rng = rng_stream(config.seed, "diffusion-train")
    history = []
    for step in range(config.steps):
        g = graphs[rng.integers(len(graphs))]
        t = int(rng.integers(1, schedule.T + 1))
        noisy = forward_sample(g.adjacency, schedule, t, rng=rng)
        loss, grads = denoiser_loss(params, noisy, g.features, g.adjacency, t)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"diffusion loss became {loss} at step {step}")
        history.append(loss)
        opt.step(params.tensors, grads)
    return DiffusionTrainResult(params, history)


# ---------------------------------------------------------------- reverse step

def reverse_probs(params: DenoiserParams, noisy_adj, features, schedule: NoiseSchedule,
                  t: int) -> np.ndarray:
    """``p(A_{t-1} = 1) = sum_a0 q(A_{t-1} = 1 | a_t, a0) p(a0 | A_t)`` per pair."""
    _check_t(schedule, t, lo=1)
    p0 = denoise_predict(params, noisy_adj, t, features)
    table = posterior_table(schedule, t)
    a_t = np.asarray(noisy_adj).astype(np.int64)
    prob = table[a_t, 0] * (1.0 - p0) + table[a_t, 1] * p0
    np.fill_diagonal(prob, 0.0)
    return np.clip(prob, 0.0, 1.0)


def reverse_step(params: DenoiserParams, noisy, schedule: NoiseSchedule, t: int, seed=None,
                 features=None, rng: np.random.Generator | None = None):
    """Return ``(sampled A_{t-1}, pre-sampling probability matrix)``."""
    if isinstance(noisy, Graph):
        adjacency, features = noisy.adjacency, noisy.features
    else:
        adjacency = noisy
    prob = reverse_probs(params, adjacency, features, schedule, t)
    if rng is None:
        rng = rng_stream(0 if seed is None else seed, "reverse", t)
    return sample_edges(prob, rng), prob


# ---------------------------------------------------------------- checkpoints

def save_denoiser(params: DenoiserParams, schedule: NoiseSchedule, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": {"F": params.in_dim, "D": params.width, "M": params.scorer_hidden,
                   "E": params.time_dim},
        "schedule": schedule.to_dict(),
        "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in params.tensors.items()},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_denoiser(path) -> tuple[DenoiserParams, NoiseSchedule]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a denoiser checkpoint (format {doc.get('format')!r})")
    tensors = {k: np.array(t["data"], dtype=np.float64).reshape(t["shape"])
               for k, t in doc["tensors"].items()}
    params = DenoiserParams(tensors)
    cfg = doc["config"]
    if (params.in_dim, params.width, params.scorer_hidden, params.time_dim) != \
            (cfg["F"], cfg["D"], cfg["M"], cfg["E"]):
        raise ValueError(f"{path}: tensor shapes disagree with the config header")
    sch = doc["schedule"]
    return params, build_schedule(sch["T"], sch["s"], sch["edge_density"])
