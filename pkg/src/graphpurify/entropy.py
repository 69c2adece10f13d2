"""Matrix-based Rényi entropy of graphs and transfer-entropy guidance.

A graph is summarized by node representations ``Z = Â X`` (one
parameter-free propagation round); its entropy is the Rényi entropy of the
trace-normalized Gaussian Gram matrix of Z. Joint entropies use Hadamard
products of Gram matrices.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .diffusion import NoiseSchedule
from .gnn import normalization_backward, normalize_adjacency


class EntropyError(ValueError):
    pass


@dataclass(frozen=True)
class EntropyConfig:
    alpha: float = 2.0
    sigma: float = 2.0
    bandwidth_mode: str = "fixed"
    form: str = "ratio"

    def __post_init__(self):
        if not self.alpha > 0 or self.alpha == 1:
            raise ValueError(f"alpha must be positive and != 1, got {self.alpha}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.bandwidth_mode not in ("fixed", "silverman"):
            raise ValueError(f"unknown bandwidth_mode {self.bandwidth_mode!r}")
        if self.form not in ("ratio", "difference"):
            raise ValueError(f"unknown transfer-entropy form {self.form!r}")


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 1.0
    sign: str = "ascend"
    gradient_mode: str = "analytic_alpha2"
    fd_step: float = 1e-4

    def __post_init__(self):
        if not self.scale >= 0:
            raise ValueError(f"guidance scale must be non-negative, got {self.scale}")
        if self.sign not in ("ascend", "descend"):
            raise ValueError(f"sign must be 'ascend' or 'descend', got {self.sign!r}")
        if self.gradient_mode not in ("analytic_alpha2", "finite_difference"):
            raise ValueError(f"unknown gradient_mode {self.gradient_mode!r}")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")


def propagate(adjacency, features) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2 X`` for a binary or relaxed adjacency."""
    a = np.asarray(adjacency, dtype=np.float64)
    if np.any(a < 0):
        raise ValueError("adjacency entries must be non-negative")
    norm_adj, _ = normalize_adjacency(a)
    return norm_adj @ np.asarray(features, dtype=np.float64)


def silverman_sigma(z: np.ndarray) -> float:
    n = z.shape[0]
    d = pdist(z) if n > 1 else np.zeros(1)
    return max(1.06 * float(np.std(d)) * n ** (-0.2), 1e-6)


def bandwidth(z: np.ndarray, config: EntropyConfig) -> float:
    return config.sigma if config.bandwidth_mode == "fixed" else silverman_sigma(z)


def kernel_matrix(z: np.ndarray, sigma: float) -> np.ndarray:
    sq = squareform(pdist(np.asarray(z, dtype=np.float64), "sqeuclidean"))
    return np.exp(-sq / (2.0 * sigma ** 2))


def gram(z: np.ndarray, config: EntropyConfig = EntropyConfig()) -> np.ndarray:
    """Trace-normalized Gram matrix ``K_ij / (n sqrt(K_ii K_jj))``."""
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("representations contain non-finite entries")
    k = kernel_matrix(z, bandwidth(z, config))
    d = np.sqrt(np.diag(k))
    return k / np.outer(d, d) / z.shape[0]


def spectrum(k_hat: np.ndarray) -> np.ndarray:
    lam = np.linalg.eigvalsh(np.asarray(k_hat, dtype=np.float64))
    if lam.min() < -1e-9:
        raise EntropyError(f"matrix is not positive semidefinite (eigenvalue {lam.min():.3g})")
    # eigenvalues under the numerical-rank tolerance are rounding noise; for
    # alpha < 1 they would otherwise contribute lam**alpha >> lam
    tol = len(lam) * np.finfo(np.float64).eps * max(lam.max(), 0.0)
    return np.where(lam > tol, lam, 0.0)


def renyi_entropy(k_hat: np.ndarray, alpha: float = 2.0) -> float:
    """``log(sum_i lambda_i^alpha) / (1 - alpha)`` over the eigenvalues of ``k_hat``."""
    if alpha == 1:
        raise ValueError("alpha = 1 (Shannon limit) is not supported")
    lam = spectrum(k_hat)
    return float(np.log(np.sum(lam ** alpha)) / (1.0 - alpha))


def renyi2_trace(k_hat: np.ndarray) -> float:
    """Order-2 entropy as ``-log tr(K^2)``; no eigendecomposition needed."""
    k = np.asarray(k_hat, dtype=np.float64)
    return float(-np.log(np.sum(k * k)))


def _entropy(k_hat, alpha):
    return renyi2_trace(k_hat) if alpha == 2 else renyi_entropy(k_hat, alpha)


def hadamard_normalized(grams) -> np.ndarray:
    grams = list(grams)
    if not grams:
        raise ValueError("need at least one Gram matrix")
    shape = grams[0].shape
    out = np.ones(shape)
    for g in grams:
        if g.shape != shape:
            raise ValueError(f"Gram matrices differ in size: {shape} vs {g.shape}")
        out = out * g
    tr = np.trace(out)
    if not tr > 0:
        raise EntropyError("Hadamard product has non-positive trace")
    return out / tr


def joint_entropy(grams, alpha: float = 2.0) -> float:
    return renyi_entropy(hadamard_normalized(grams), alpha)


def _grams_for(adjs, features, config):
    return [gram(propagate(a, features), config) for a in adjs]


def transfer_entropy_from_grams(k_prev, k_t, k_adv, config: EntropyConfig) -> float:
    a = config.alpha
    if config.form == "difference":
        return (_entropy(hadamard_normalized([k_prev, k_t]), a) - _entropy(k_t, a)
                - _entropy(hadamard_normalized([k_prev, k_t, k_adv]), a)
                + _entropy(hadamard_normalized([k_t, k_adv]), a))
    h_t = _entropy(k_t, a)
    h_t_adv = _entropy(hadamard_normalized([k_t, k_adv]), a)
    if abs(h_t) < 1e-12 or abs(h_t_adv) < 1e-12:
        raise EntropyError(
            f"conditioning entropy is zero (H(t)={h_t:.3g}, H(t,adv)={h_t_adv:.3g}); "
            "the ratio form is undefined for a rank-1 Gram matrix")
    return (_entropy(hadamard_normalized([k_prev, k_t]), a) / h_t
            - _entropy(hadamard_normalized([k_prev, k_t, k_adv]), a) / h_t_adv)


def transfer_entropy(prev_adj, cur_adj, adv_adj, features,
                     config: EntropyConfig = EntropyConfig()) -> float:
    """Transfer entropy from the current reverse state to the next one, given the attacked graph."""
    k_prev, k_t, k_adv = _grams_for([prev_adj, cur_adj, adv_adj], features, config)
    return transfer_entropy_from_grams(k_prev, k_t, k_adv, config)


def _pair_symmetrize(g: np.ndarray) -> np.ndarray:
    out = g + g.T
    np.fill_diagonal(out, 0.0)
    return out


def guidance_gradient(prev_prob, cur_adj, adv_adj, features,
                      config: EntropyConfig = EntropyConfig(),
                      guidance: GuidanceConfig = GuidanceConfig()) -> np.ndarray:
    """Derivative of the transfer entropy with respect to each symmetric pair of ``prev_prob``.

    Entry (i, j) is ``d TE / d u`` where ``u`` moves ``prev_prob[i, j]`` and
    ``prev_prob[j, i]`` together. The diagonal is zero.
    """
    prev_prob = np.asarray(prev_prob, dtype=np.float64)
    if guidance.gradient_mode == "finite_difference":
        return _fd_guidance_gradient(prev_prob, cur_adj, adv_adj, features, config,
                                     guidance.fd_step)
    if config.alpha != 2:
        raise ValueError("analytic guidance gradient is only available for alpha = 2")
    if config.bandwidth_mode != "fixed":
        raise ValueError("analytic guidance gradient needs a fixed kernel bandwidth")
    x = np.asarray(features, dtype=np.float64)
    sigma = config.sigma
    norm_prev, inv_sqrt = normalize_adjacency(prev_prob)
    z_prev = norm_prev @ x
    k_raw = kernel_matrix(z_prev, sigma)
    n = x.shape[0]
    k_prev = k_raw / n
    k_t, k_adv = _grams_for([cur_adj, adv_adj], x, config)
    b1 = k_t
    b2 = k_t * k_adv
    if config.form == "ratio":
        h_t = renyi2_trace(k_t)
        h_t_adv = renyi2_trace(hadamard_normalized([k_t, k_adv]))
        if abs(h_t) < 1e-12 or abs(h_t_adv) < 1e-12:
            raise EntropyError("conditioning entropy is zero; the ratio-form gradient is undefined")
        c1, c2 = 1.0 / h_t, 1.0 / h_t_adv
    else:
        c1 = c2 = 1.0
    # d(-log sum (K*B)^2)/dK = -2 K B^2 / sum (K*B)^2 ; the trace of K*B does not
    # depend on K because diag(K) is fixed at 1/n.
    h1 = k_prev * b1
    h2 = k_prev * b2
    g_khat = c1 * (-2.0 * h1 * b1 / np.sum(h1 * h1)) - c2 * (-2.0 * h2 * b2 / np.sum(h2 * h2))
    g_dist = (g_khat / n) * k_raw * (-1.0 / (2.0 * sigma ** 2))
    w = g_dist + g_dist.T
    g_z = 2.0 * (w.sum(axis=1)[:, None] * z_prev - w @ z_prev)
    g_norm = g_z @ x.T
    g_adj = normalization_backward(g_norm, norm_prev, inv_sqrt)
    return _pair_symmetrize(g_adj)


def _fd_guidance_gradient(prev_prob, cur_adj, adv_adj, features, config, step):
    x = np.asarray(features, dtype=np.float64)
    k_t, k_adv = _grams_for([cur_adj, adv_adj], x, config)
    n = prev_prob.shape[0]
    out = np.zeros((n, n))

    def te(p):
        return transfer_entropy_from_grams(gram(propagate(p, x), config), k_t, k_adv, config)

    for i, j in zip(*np.triu_indices(n, k=1)):
        p = prev_prob.copy()
        p[i, j] = p[j, i] = prev_prob[i, j] + step
        up = te(p)
        p[i, j] = p[j, i] = prev_prob[i, j] - step
        down = te(p)
        out[i, j] = out[j, i] = (up - down) / (2.0 * step)
    return out


def guidance_step_size(schedule: NoiseSchedule, t: int, guidance: GuidanceConfig) -> float:
    if not 1 <= t <= schedule.T:
        raise ValueError(f"guidance step {t} outside [1, {schedule.T}]")
    noise = 1.0 - schedule.alpha_bar[t]
    if noise < 1e-12:
        raise ValueError(f"1 - abar({t}) = {noise:.3g} is too small for the guidance scale")
    return guidance.scale / noise


def apply_guidance(prev_prob, grad, schedule: NoiseSchedule, t: int,
                   guidance: GuidanceConfig = GuidanceConfig()) -> np.ndarray:
    """Move ``prev_prob`` along ``grad`` by ``scale / (1 - abar(t))`` and clamp to [0, 1]."""
    sign = 1.0 if guidance.sign == "ascend" else -1.0
    out = np.asarray(prev_prob, dtype=np.float64) + sign * guidance_step_size(
        schedule, t, guidance) * np.asarray(grad, dtype=np.float64)
    out = np.clip(0.5 * (out + out.T), 0.0, 1.0)
    np.fill_diagonal(out, 0.0)
    return out
