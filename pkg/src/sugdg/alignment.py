"""Loss machinery: class-reweighted cross-entropy, RBF-kernel MMD, Soft-MMD
label augmentation, symmetric KL distance, sample-pair attention weights and
the combined training objective.

Every loss returns its value together with exact gradients with respect to
its inputs, so the network's backward pass can be driven directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError, NumericError
from .geometry import pairwise_chamfer
from .net import ForwardTrace, ModelParams, backward

logger = logging.getLogger(__name__)

DEFAULT_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)
LOG_FLOOR = np.log(1e-12)


# ------------------------------------------------------------- class weighting


@dataclass(frozen=True)
class ClassWeights:
    alpha: np.ndarray
    q: float


def class_weights(counts: Sequence[int], q: float) -> ClassWeights:
    """``alpha_i = m_i^-q / sum_j m_j^-q``; empty classes get weight 0."""
    m = np.asarray(counts, dtype=np.float64)
    if q < 0:
        raise DomainError("q must be non-negative")
    if np.any(m < 0):
        raise DomainError("class counts must be non-negative")
    present = m > 0
    if not present.any():
        raise DomainError("at least one class must have samples")
    if not present.all():
        logger.warning("classes %s have no samples; assigning weight 0", np.flatnonzero(~present).tolist())
    raw = np.zeros_like(m)
    raw[present] = m[present] ** (-q)
    return ClassWeights(raw / raw.sum(), float(q))


def weighted_ce(
    trace_or_logits: Union[ForwardTrace, np.ndarray], labels: np.ndarray, alpha: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Batch mean of ``alpha[y] * -log p(y)`` and its gradient w.r.t. the logits."""
    logits = trace_or_logits.logits if isinstance(trace_or_logits, ForwardTrace) else np.asarray(trace_or_logits)
    labels = np.asarray(labels)
    alpha = np.asarray(alpha, dtype=np.float64)
    B = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(B), labels] - log_norm
    clamped = log_p < LOG_FLOOR
    if clamped.any():
        logger.warning("p(y) underflow on %d samples; log clamped at log(1e-12)", int(clamped.sum()))
        log_p = np.where(clamped, LOG_FLOOR, log_p)
    w = alpha[labels]
    loss = float(np.sum(-w * log_p) / B)
    probs = np.exp(shifted - log_norm[:, None])
    grad = probs.copy()
    grad[np.arange(B), labels] -= 1.0
    grad *= (w * ~clamped / B)[:, None]
    return loss, grad


# ------------------------------------------------------------------------- MMD


@dataclass(frozen=True)
class KernelSpec:
    """Equal-weight mixture of RBF kernels ``exp(-|x-y|^2 / (2 sigma^2))``."""

    sigmas: Tuple[float, ...]

    def __post_init__(self):
        sig = tuple(float(s) for s in self.sigmas)
        if not sig or any(not np.isfinite(s) or s <= 0 for s in sig):
            raise DomainError("kernel bandwidths must be positive and finite")
        object.__setattr__(self, "sigmas", sig)

    @classmethod
    def median_heuristic(
        cls, A: np.ndarray, B: np.ndarray, multipliers: Sequence[float] = DEFAULT_MULTIPLIERS
    ) -> "KernelSpec":
        """Bandwidths ``sigma^2 = median pairwise squared distance * multiplier`` over A and B jointly."""
        Z = np.concatenate([A, B])
        d = _sq_dist(Z, Z)[np.triu_indices(len(Z), k=1)]
        med = float(np.median(d)) if d.size else 0.0
        if not med > 0:
            med = 1.0
        return cls(tuple(np.sqrt(med * m) for m in multipliers))


def _sq_dist(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - Y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kernel_sum(X, Y, kernel: KernelSpec, weights=None):
    """``sum_ij w_ij k(x_i, y_j)`` with gradients w.r.t. X and Y."""
    D = _sq_dist(X, Y)
    K = np.zeros_like(D)
    dK = np.zeros_like(D)
    J = len(kernel.sigmas)
    for s in kernel.sigmas:
        e = np.exp(-D / (2.0 * s * s))
        K += e / J
        dK -= e / (2.0 * s * s * J)
    if weights is not None:
        K = K * weights
        dK = dK * weights
    # d/dx_i of k(|x_i - y_j|^2) = k' * 2 (x_i - y_j)
    gx = 2.0 * (X * dK.sum(axis=1)[:, None] - dK @ Y)
    gy = 2.0 * (Y * dK.sum(axis=0)[:, None] - dK.T @ X)
    return float(K.sum()), gx, gy


def mmd2(
    A: np.ndarray,
    B: np.ndarray,
    kernel: KernelSpec,
    pair_weights: Optional[np.ndarray] = None,
    allow_single: bool = False,
    cross_only: bool = False,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Biased squared-MMD estimate between the rows of A and B.

    Unweighted: ``mean k(a, a') - 2 mean k(a, b) + mean k(b, b')``.

    ``pair_weights`` (ns, nt) is rescaled to mean one and reduced to sample
    weights ``u_i = mean_j w_ij`` and ``v_j = mean_i w_ij``; the result is the
    MMD between the reweighted empirical distributions, so it stays
    non-negative and vanishes for identical sets with symmetric weights.
    ``cross_only=True`` instead multiplies each cross term by ``w_ij`` and
    leaves the within-set terms unweighted (can go negative).

    Returns the value and its gradients with respect to A and B.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    ns, nt = len(A), len(B)
    minimum = 1 if allow_single else 2
    if ns < minimum or nt < minimum:
        raise DomainError(f"MMD needs at least {minimum} samples per side, got {ns} and {nt}")
    w_ss = w_tt = w_st = None
    if pair_weights is not None:
        W = np.asarray(pair_weights, dtype=np.float64)
        if W.shape != (ns, nt):
            raise DomainError(f"pair weights must have shape {(ns, nt)}, got {W.shape}")
        if not np.all(np.isfinite(W)) or np.any(W < 0) or not W.sum() > 0:
            raise DomainError("pair weights must be finite, non-negative and not all zero")
        W = W / W.mean()
        if cross_only:
            w_st = W
        else:
            u, v = W.mean(axis=1), W.mean(axis=0)
            w_ss, w_tt, w_st = np.outer(u, u), np.outer(v, v), np.outer(u, v)
    kss, gss_x, gss_y = _kernel_sum(A, A, kernel, w_ss)
    ktt, gtt_x, gtt_y = _kernel_sum(B, B, kernel, w_tt)
    kst, gst_x, gst_y = _kernel_sum(A, B, kernel, w_st)
    value = kss / ns**2 + ktt / nt**2 - 2.0 * kst / (ns * nt)
    gA = (gss_x + gss_y) / ns**2 - 2.0 * gst_x / (ns * nt)
    gB = (gtt_x + gtt_y) / nt**2 - 2.0 * gst_y / (ns * nt)
    return value, gA, gB


def soft_mmd_features(features: np.ndarray, labels: np.ndarray, scale: float, num_classes: int) -> np.ndarray:
    """Append ``scale * onehot(label)`` to every feature row."""
    onehot = np.zeros((len(labels), num_classes))
    onehot[np.arange(len(labels)), labels] = scale
    return np.concatenate([features, onehot], axis=1)


def strip_soft_features(augmented: np.ndarray, num_classes: int) -> np.ndarray:
    return augmented[:, : augmented.shape[1] - num_classes]


def unit_rows(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise L2 normalisation; zero rows stay zero. Returns (unit rows, norms)."""
    norms = np.sqrt(np.einsum("ij,ij->i", features, features))
    safe = np.where(norms > 1e-12, norms, 1.0)
    return np.where((norms > 1e-12)[:, None], features / safe[:, None], 0.0), norms


def unit_rows_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    safe = np.where(norms > 1e-12, norms, 1.0)
    proj = np.einsum("ij,ij->i", unit, grad_unit)
    g = (grad_unit - unit * proj[:, None]) / safe[:, None]
    return np.where((norms > 1e-12)[:, None], g, 0.0)


# ------------------------------------------------------------ semantic distance


def _check_simplex(p: np.ndarray, what: str) -> None:
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise DomainError(f"{what} is not a probability vector")


def _smooth(p: np.ndarray, eps: float) -> np.ndarray:
    q = p + eps
    return q / q.sum(axis=-1, keepdims=True)


def js_distance(X: np.ndarray, Y: np.ndarray, eps: float = 1e-6) -> float:
    """Symmetrised KL divergence ``KL(X||Y)/2 + KL(Y||X)/2`` on eps-smoothed vectors."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    _check_simplex(X, "X")
    _check_simplex(Y, "Y")
    if X.shape != Y.shape:
        raise DomainError("distributions must have equal length")
    p, q = _smooth(X, eps), _smooth(Y, eps)
    return float(0.5 * np.sum(p * np.log(p / q)) + 0.5 * np.sum(q * np.log(q / p)))


def js_matrix(P: np.ndarray, Q: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """:func:`js_distance` between every row of P and every row of Q."""
    p, q = _smooth(np.asarray(P, dtype=np.float64), eps), _smooth(np.asarray(Q, dtype=np.float64), eps)
    lp, lq = np.log(p), np.log(q)
    # 0.5 * sum_c (p_c - q_c)(log p_c - log q_c), expanded for all pairs
    self_p = np.sum(p * lp, axis=1)
    self_q = np.sum(q * lq, axis=1)
    return 0.5 * (self_p[:, None] + self_q[None, :] - p @ lq.T - lp @ q.T)


# --------------------------------------------------------- sample-pair attention


@dataclass(frozen=True)
class SDAWeights:
    """Per-pair attention matrices (source rows, target columns), each rescaled to mean one."""

    geo: np.ndarray
    sem: np.ndarray
    eps: float = 1e-3

    @classmethod
    def uniform(cls, ns: int, nt: int) -> "SDAWeights":
        return cls(np.ones((ns, nt)), np.ones((ns, nt)))


def inverse_distance_weights(distances: np.ndarray, eps: float) -> np.ndarray:
    w = 1.0 / (np.asarray(distances, dtype=np.float64) + eps)
    return w / w.mean()


def sda_weights(
    clouds_s: np.ndarray,
    clouds_t: np.ndarray,
    softmax_s: np.ndarray,
    softmax_t: np.ndarray,
    eps: float = 1e-3,
    js_eps: float = 1e-6,
) -> SDAWeights:
    geo = inverse_distance_weights(pairwise_chamfer(clouds_s, clouds_t), eps)
    sem = inverse_distance_weights(js_matrix(softmax_s, softmax_t, js_eps), eps)
    return SDAWeights(geo, sem, eps)


# ------------------------------------------------------------- total objective


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    ali_geo: float
    ali_sem: float
    ali: float
    total: float
    lam: float


KernelArg = Union[None, KernelSpec, Tuple[KernelSpec, KernelSpec]]


@dataclass(frozen=True)
class AlignmentTerms:
    geo: float
    sem: float
    grad_fl_s: np.ndarray
    grad_fl_t: np.ndarray
    grad_fh_s: np.ndarray
    grad_fh_t: np.ndarray


def alignment_terms(
    trace_s: ForwardTrace,
    trace_t: ForwardTrace,
    labels_s: np.ndarray,
    labels_t: np.ndarray,
    num_classes: int,
    kernel: KernelArg = None,
    sda: Optional[SDAWeights] = None,
    soft_scale: float = 1.0,
    multipliers: Sequence[float] = DEFAULT_MULTIPLIERS,
    discrepancy: Callable = mmd2,
) -> AlignmentTerms:
    """Geometric MMD on ``f_l`` and Soft-MMD on unit-normalised ``f_h``, with tap gradients.

    ``kernel=None`` picks median-heuristic bandwidths per tap from the current
    features. Bandwidths and SDA weights are constants for differentiation.
    ``discrepancy`` may be swapped for another alignment loss with the
    signature of :func:`mmd2`.
    """
    ns, nt = len(labels_s), len(labels_t)
    if sda is None:
        sda = SDAWeights.uniform(ns, nt)
    u_s, norm_s = unit_rows(trace_s.f_h)
    u_t, norm_t = unit_rows(trace_t.f_h)
    sem_s = soft_mmd_features(u_s, labels_s, soft_scale, num_classes)
    sem_t = soft_mmd_features(u_t, labels_t, soft_scale, num_classes)
    if kernel is None:
        k_geo = KernelSpec.median_heuristic(trace_s.f_l, trace_t.f_l, multipliers)
        k_sem = KernelSpec.median_heuristic(sem_s, sem_t, multipliers)
    elif isinstance(kernel, KernelSpec):
        k_geo = k_sem = kernel
    else:
        k_geo, k_sem = kernel
    geo, ga_s, ga_t = discrepancy(trace_s.f_l, trace_t.f_l, k_geo, sda.geo)
    sem, gb_s, gb_t = discrepancy(sem_s, sem_t, k_sem, sda.sem)
    d = u_s.shape[1]
    return AlignmentTerms(
        geo, sem, ga_s, ga_t,
        unit_rows_backward(u_s, norm_s, gb_s[:, :d]),
        unit_rows_backward(u_t, norm_t, gb_t[:, :d]),
    )


def _check_breakdown(breakdown: LossBreakdown) -> None:
    for name in ("cls", "ali_geo", "ali_sem", "total"):
        if not np.isfinite(getattr(breakdown, name)):
            raise NumericError(f"loss term {name} is not finite")


def total_loss(
    params: ModelParams,
    trace_s: ForwardTrace,
    trace_t: ForwardTrace,
    labels_s: np.ndarray,
    labels_t: np.ndarray,
    alpha: np.ndarray,
    kernel: KernelArg = None,
    sda: Optional[SDAWeights] = None,
    lam: float = 0.5,
    soft_scale: float = 1.0,
    multipliers: Sequence[float] = DEFAULT_MULTIPLIERS,
    discrepancy: Callable = mmd2,
) -> Tuple[LossBreakdown, np.ndarray]:
    """``L_cls + lam * (MMD_w(f_l) + MMD_w(soft(f_h)))`` and its parameter gradient.

    ``sda=None`` means uniform pair weights. See :func:`alignment_terms` for
    the kernel and discrepancy arguments.
    """
    ns = len(labels_s)
    logits = np.concatenate([trace_s.logits, trace_t.logits])
    labels = np.concatenate([labels_s, labels_t])
    l_cls, g_logits = weighted_ce(logits, labels, alpha)

    g_fl_s = g_fl_t = g_fh_s = g_fh_t = None
    ali_geo = ali_sem = 0.0
    if lam != 0.0:
        terms = alignment_terms(
            trace_s, trace_t, labels_s, labels_t, params.num_classes, kernel, sda, soft_scale, multipliers,
            discrepancy,
        )
        ali_geo, ali_sem = terms.geo, terms.sem
        g_fl_s, g_fl_t = lam * terms.grad_fl_s, lam * terms.grad_fl_t
        g_fh_s, g_fh_t = lam * terms.grad_fh_s, lam * terms.grad_fh_t

    ali = ali_geo + ali_sem
    breakdown = LossBreakdown(l_cls, ali_geo, ali_sem, ali, l_cls + lam * ali, lam)
    _check_breakdown(breakdown)
    grad = backward(params, trace_s, g_logits[:ns], g_fl_s, g_fh_s) + backward(
        params, trace_t, g_logits[ns:], g_fl_t, g_fh_t
    )
    return breakdown, grad
