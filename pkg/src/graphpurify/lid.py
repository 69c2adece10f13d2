"""Local intrinsic dimensionality and the per-edge purification timetable.

Node LID estimates (maximum likelihood over the k nearest neighbours in the
classifier's hidden space) are min-max normalized and combined into a
per-edge adversarial degree ``Lambda = g g^T``. Each edge's degree is turned
into the isotropic diffusion time with the same noise-to-signal ratio, and
per-step masks decide which edges are being denoised.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .diffusion import NoiseSchedule

GAMMA_CAP = 1e6


@dataclass(frozen=True)
class LidConfig:
    k: int | None = None
    epsilon_dist: float = 1e-12
    gamma_max: float = GAMMA_CAP

    def __post_init__(self):
        if self.k is not None and self.k < 2:
            raise ValueError(f"k must be at least 2, got {self.k}")
        if not self.epsilon_dist > 0:
            raise ValueError("epsilon_dist must be positive")

    def resolve_k(self, n: int) -> int:
        k = self.k if self.k is not None else default_k(n)
        if not 2 <= k < n:
            raise ValueError(f"need 2 <= k < N, got k={k} with N={n}")
        return k


def default_k(n: int) -> int:
    return 20 if n >= 40 else max(2, n // 4)


@dataclass(frozen=True)
class LidDiagnostics:
    k: int
    n_floored: int
    n_degenerate: int
    gamma_min: float
    gamma_mean: float
    gamma_max: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def lid_from_distances(knn_dist: np.ndarray, epsilon_dist=1e-12, gamma_max=GAMMA_CAP):
    """MLE of LID from sorted neighbour distances ``(n, k)``.

    Returns ``(gamma, n_floored, degenerate_mask)``. Rows whose log-ratio sum
    is zero (all k distances equal) get ``gamma_max``.
    """
    d = np.asarray(knn_dist, dtype=np.float64)
    n_floored = int((d < epsilon_dist).sum())
    d = np.maximum(d, epsilon_dist)
    k = d.shape[1]
    mean_log = np.log(d / d[:, -1:]).sum(axis=1) / k
    degenerate = mean_log == 0.0
    with np.errstate(divide="ignore"):
        gamma = np.where(degenerate, gamma_max, -1.0 / np.where(degenerate, -1.0, mean_log))
    return gamma, n_floored, degenerate


def estimate_lid(embeddings: np.ndarray, config: LidConfig = LidConfig(),
                 return_diagnostics=False):
    """Per-node LID from Euclidean distances between embedding rows.

    A node is not its own neighbour; equal distances are ordered by the
    smaller node index.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("embeddings contain non-finite entries")
    n = z.shape[0]
    k = config.resolve_k(n)
    dist = cdist(z, z)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    knn = np.take_along_axis(dist, order, axis=1)
    gamma, n_floored, degenerate = lid_from_distances(knn, config.epsilon_dist, config.gamma_max)
    if not return_diagnostics:
        return gamma
    diag = LidDiagnostics(k, n_floored, int(degenerate.sum()), float(gamma.min()),
                          float(gamma.mean()), float(gamma.max()))
    return gamma, diag


@dataclass(frozen=True)
class AdversarialDegreeMap:
    gamma: np.ndarray
    gamma_norm: np.ndarray
    lambda_matrix: np.ndarray


def minmax(gamma: np.ndarray) -> np.ndarray:
    g = np.asarray(gamma, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if hi == lo:
        return np.full_like(g, 0.5)
    return (g - lo) / (hi - lo)


def adversarial_degree(gamma: np.ndarray) -> AdversarialDegreeMap:
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g <= 0):
        raise ValueError("LID values must be positive")
    norm = minmax(g)
    lam = np.outer(norm, norm)
    np.fill_diagonal(lam, 0.0)
    return AdversarialDegreeMap(g, norm, lam)


def purification_time_real(lam, schedule: NoiseSchedule, t_p: int):
    """Unclamped, unrounded equivalent isotropic time for adversarial degree ``lam``.

    Uses ``arccos(sqrt(a / (lam (1 - a) + a))) == arctan(sqrt(lam (1 - a) / a))``
    with ``a = abar(t_p)``; the arctan form stays accurate for small ``lam``.
    """
    if not 1 <= t_p <= schedule.T:
        raise ValueError(f"t_p must lie in [1, T={schedule.T}], got {t_p}")
    a = schedule.alpha_bar[t_p]
    if a == 0.0:
        raise ValueError(f"abar(t_p={t_p}) is 0; the time remapping is degenerate at t_p = T")
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValueError("adversarial degree must lie in [0, 1]")
    one_minus = np.sin((t_p / schedule.T + schedule.s) / (1 + schedule.s) * (np.pi / 2)) ** 2
    angle = np.arctan2(np.sqrt(lam * one_minus), np.sqrt(a))
    s = schedule.s
    return schedule.T * (2 * (1 + s) / np.pi * angle - s)


def purification_time(lam, schedule: NoiseSchedule, t_p: int):
    """Integer purification time: clamp to ``[0, t_p]``, round half up."""
    raw = purification_time_real(lam, schedule, t_p)
    out = np.floor(np.clip(raw, 0.0, t_p) + 0.5).astype(np.int64)
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PurificationTimetable:
    t_hat: np.ndarray
    t_p: int
    n_clamped: int = 0

    def __post_init__(self):
        th = np.asarray(self.t_hat)
        if not np.array_equal(th, th.T):
            raise ValueError("timetable must be symmetric")
        if th.min() < 0 or th.max() > self.t_p:
            raise ValueError("timetable entries must lie in [0, t_p]")

    def histogram(self) -> list[int]:
        iu = np.triu_indices(self.t_hat.shape[0], k=1)
        return np.bincount(self.t_hat[iu], minlength=self.t_p + 1).tolist()


def build_timetable(lambda_matrix: np.ndarray, schedule: NoiseSchedule,
                    t_p: int) -> PurificationTimetable:
    raw = purification_time_real(lambda_matrix, schedule, t_p)
    clamped = int(((raw < 0) | (raw > t_p)).sum() // 2)
    t_hat = purification_time(lambda_matrix, schedule, t_p)
    t_hat = np.maximum(t_hat, t_hat.T)  # guard against asymmetric float rounding
    np.fill_diagonal(t_hat, 0)
    return PurificationTimetable(t_hat, t_p, clamped)


def make_mask(timetable: PurificationTimetable, t: int) -> np.ndarray:
    """Binary mask of edges under purification at step ``t``: ``t <= t_hat``."""
    if not 1 <= t <= timetable.t_p:
        raise ValueError(f"mask step {t} outside [1, {timetable.t_p}]")
    return (t <= timetable.t_hat).astype(np.uint8)


def blend(mask: np.ndarray, predicted: np.ndarray, forward_noisy: np.ndarray) -> np.ndarray:
    """``mask * predicted + (1 - mask) * forward_noisy`` entrywise."""
    mask = np.asarray(mask)
    predicted = np.asarray(predicted)
    forward_noisy = np.asarray(forward_noisy)
    if not (mask.shape == predicted.shape == forward_noisy.shape):
        raise ValueError("mask and matrices must have the same shape")
    return np.where(mask.astype(bool), predicted, forward_noisy)
