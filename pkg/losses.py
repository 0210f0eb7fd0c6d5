"""
Loss terms of the objective, built on the autodiff tape.

  rec   Σ_i ||x_i - x̂_i||²                       (masked samples skipped)
  cor   Σ_i || z_i (c_i - mean(c_i))ᵀ ||_1
  dis   discriminator / non-saturating generator cross-entropies
  ent   neighbor cross-entropy over Q with exp-cosine similarity
  J     Σ_v rec_v + α (Σ_v cor_v + Σ_v dis_v) + β ent
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import autodiff as ad
from autodiff import Var
from errors import ConfigError, ContractError, DimensionError, DomainError


PROB_FLOOR = 1e-12
PROB_CEIL = 1.0 - 1e-12

Positives = Sequence[Sequence[int]]


# ---------- RECONSTRUCTION / CORRELATION ----------


def _mask_column(mask: Optional[np.ndarray], n: int) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != n:
        raise DimensionError(f"mask has {mask.shape[0]} entries for {n} samples")
    return mask.astype(np.float64).reshape(n, 1)


def loss_rec(x: Var, x_hat: Var, mask: Optional[np.ndarray] = None) -> Var:
    if x.shape != x_hat.shape:
        raise DimensionError(f"loss_rec: X {x.shape} vs X̂ {x_hat.shape}")
    per_sample = ad.unary("row_l2_squared", ad.subtract(x, x_hat))
    weights = _mask_column(mask, x.shape[0])
    if weights is not None:
        per_sample = ad.multiply(per_sample, x.tape.constant(weights))
    return ad.total(per_sample)


def loss_cor(z: Var, c: Var) -> Var:
    """
    The l1 norm of an outer product factorises: ||z (c-μ)ᵀ||_1 = ||z||_1 · ||c-μ||_1,
    with μ the per-sample mean of c's entries.
    """
    if z.shape[0] != c.shape[0]:
        raise DimensionError(f"loss_cor: Z has {z.shape[0]} rows, C has {c.shape[0]}")
    centered = ad.subtract(c, ad.unary("row_mean", c))
    per_sample = ad.multiply(ad.unary("row_abs_sum", z), ad.unary("row_abs_sum", centered))
    return ad.total(per_sample)


# ---------- ADVERSARIAL ----------


def _check_scores(name: str, scores: Var) -> None:
    if scores.shape[1] != 1:
        raise DimensionError(f"{name}: scores must be a column, got {scores.shape}")


def _weighted_sum(terms: Var, weights: Optional[np.ndarray]) -> Var:
    w = _mask_column(weights, terms.shape[0])
    if w is not None:
        terms = ad.multiply(terms, terms.tape.constant(w))
    return ad.total(terms)


def loss_dis_discriminator(
    scores_real: Var,
    scores_fake: Var,
    real_weights: Optional[np.ndarray] = None,
    fake_weights: Optional[np.ndarray] = None,
) -> Var:
    """
    -Σ log D(z^v) - Σ log(1 - D(z^u)), probabilities clamped to [1e-12, 1-1e-12].
    The optional 0/1 weights drop samples whose view is hidden from the pools.
    """
    _check_scores("loss_dis_discriminator", scores_real)
    _check_scores("loss_dis_discriminator", scores_fake)
    tape = scores_real.tape
    real_term = _weighted_sum(ad.safe_log(scores_real, PROB_FLOOR, PROB_CEIL), real_weights)
    one_minus_fake = ad.add(ad.scale(scores_fake, -1.0), tape.constant([[1.0]]))
    fake_term = _weighted_sum(ad.safe_log(one_minus_fake, PROB_FLOOR, PROB_CEIL), fake_weights)
    return ad.scale(ad.add(real_term, fake_term), -1.0)


def loss_dis_generator(scores_fake: Var, weights: Optional[np.ndarray] = None) -> Var:
    """Non-saturating encoder side: -Σ log D_v(z^u)."""
    _check_scores("loss_dis_generator", scores_fake)
    return ad.scale(_weighted_sum(ad.safe_log(scores_fake, PROB_FLOOR, PROB_CEIL), weights), -1.0)


# ---------- NEIGHBOR CROSS-ENTROPY ----------


def similarity_m(q_a: Any, q_b: Any) -> float:
    a = np.asarray(q_a, dtype=np.float64).reshape(-1)
    b = np.asarray(q_b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"similarity_m: vectors of length {a.size} and {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("similarity_m: zero vector has no direction")
    return float(np.exp(np.dot(a, b) / (na * nb)))


def neighbor_masks(positives: Positives, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """0/1 matrices (row i = anchor) marking positives and negatives (everything else but i)."""
    pos = np.zeros((n, n))
    for i, row in enumerate(positives):
        for j in row:
            if j == i:
                raise ContractError(f"positives of sample {i} contain the sample itself")
            if not 0 <= j < n:
                raise ContractError(f"positive index {j} out of range for {n} samples")
            pos[i, j] = 1.0
    neg = 1.0 - pos
    np.fill_diagonal(neg, 0.0)
    return pos, neg


def loss_ent(q: Var, positives: Positives) -> Var:
    """
    -(1/N) Σ_i Σ_{j∈pos(i)} log[ m(q_j, q_i) / Σ_{k∈neg(i)} m(q_k, q_i) ]
    with m = exp(cosine). log m(q_j, q_i) is the cosine itself.
    """
    n = q.shape[0]
    if len(positives) != n:
        raise DimensionError(f"loss_ent: {len(positives)} positive lists for {n} samples")
    pos, neg = neighbor_masks(positives, n)
    if np.any(neg.sum(axis=1) == 0):
        raise ConfigError(f"loss_ent: no negatives left with N={n} and the given positives")

    tape = q.tape
    cos = ad.forward_primitive(tape, "cosine_rows", [q, q])
    pos_logits = ad.total(ad.multiply(cos, tape.constant(pos)))
    denom = ad.unary("row_sum", ad.multiply(ad.unary("exp", cos), tape.constant(neg)))
    n_pos = pos.sum(axis=1, keepdims=True)
    log_denom = ad.total(ad.multiply(ad.unary("log", denom), tape.constant(n_pos)))
    return ad.scale(ad.subtract(log_denom, pos_logits), 1.0 / n)


# ---------- OBJECTIVE ----------


@dataclass
class LossBreakdown:
    rec: Tuple[float, ...]
    cor: Tuple[float, ...]
    dis_generator: float
    dis_discriminator: float
    ent: float
    total: float

    @property
    def rec_sum(self) -> float:
        return float(sum(self.rec))

    @property
    def cor_sum(self) -> float:
        return float(sum(self.cor))

    def components(self) -> Dict[str, float]:
        return {
            "rec": self.rec_sum,
            "cor": self.cor_sum,
            "dis_generator": self.dis_generator,
            "dis_discriminator": self.dis_discriminator,
            "ent": self.ent,
            "total": self.total,
        }

    def to_record(self) -> Dict[str, Any]:
        return {
            **self.components(),
            "rec_per_view": list(self.rec),
            "cor_per_view": list(self.cor),
        }


def _check_weights(alpha: float, beta: float) -> None:
    if alpha < 0 or beta < 0:
        raise ConfigError(f"alpha and beta must be non-negative (alpha={alpha}, beta={beta})")


def total_objective(
    rec: Union[float, Sequence[float]],
    cor: Union[float, Sequence[float]],
    dis_generator: Union[float, Sequence[float]],
    ent: float,
    alpha: float,
    beta: float,
    dis_discriminator: float = 0.0,
) -> LossBreakdown:
    """J = Σ rec + α (Σ cor + Σ dis_generator) + β ent, on plain numbers."""
    _check_weights(alpha, beta)
    rec_v = tuple(float(r) for r in np.atleast_1d(rec))
    cor_v = tuple(float(c) for c in np.atleast_1d(cor))
    dis = float(np.sum(dis_generator))
    total = sum(rec_v) + alpha * (sum(cor_v) + dis) + beta * float(ent)
    return LossBreakdown(rec_v, cor_v, dis, float(dis_discriminator), float(ent), float(total))


def objective_var(
    rec: List[Var],
    cor: List[Var],
    dis_generator: List[Var],
    ent: Optional[Var],
    alpha: float,
    beta: float,
) -> Var:
    """Differentiable counterpart of total_objective."""
    _check_weights(alpha, beta)
    out = rec[0]
    for term in rec[1:]:
        out = ad.add(out, term)
    for term in list(cor) + list(dis_generator):
        out = ad.add(out, ad.scale(term, alpha))
    if ent is not None:
        out = ad.add(out, ad.scale(ent, beta))
    return out


# ---------- NEIGHBOR MUTUAL INFORMATION ----------
#
# Numpy-level helpers for the identity
#   L_Ent = -N_ω · I(Q, Q_ω) + N_ω · log N
# which holds when m(q_k, q_i) is the density ratio p(q_k | q_i) / p(q_k)
# and the denominator sums over all N samples.


def _pair_counts(labels: np.ndarray, positives: Positives) -> np.ndarray:
    k = int(labels.max()) + 1
    joint = np.zeros((k, k))
    for i, row in enumerate(positives):
        for j in row:
            joint[labels[i], labels[j]] += 1.0
    return joint


def plugin_neighbor_mi(labels: Sequence[int], positives: Positives) -> float:
    """Plug-in MI (nats) between a sample's value and its neighbors' values."""
    labels = np.asarray(labels, dtype=int)
    joint = _pair_counts(labels, positives)
    p = joint / joint.sum()
    p_row = p.sum(axis=1, keepdims=True)
    p_col = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / (p_row @ p_col)[nz])).sum())


def density_ratio_kernel(labels: Sequence[int], positives: Positives) -> np.ndarray:
    """m[k, i] = p̂(value_k | value_i) / p̂(value_k), estimated from the neighbor pairs."""
    labels = np.asarray(labels, dtype=int)
    joint = _pair_counts(labels, positives)
    p = joint / joint.sum()
    p_row = p.sum(axis=1)
    p_col = p.sum(axis=0)
    cond = np.divide(p, p_row[:, None], out=np.zeros_like(p), where=p_row[:, None] > 0)
    ratio = np.divide(cond, p_col[None, :], out=np.zeros_like(p), where=p_col[None, :] > 0)
    # ratio is [anchor value, candidate value]; entry [k, i] takes anchor i, candidate k
    return ratio[labels[None, :], labels[:, None]]


def neighbor_cross_entropy(m: np.ndarray, positives: Positives, denominator: str = "negatives") -> float:
    """
    -(1/N) Σ_i Σ_{j∈pos(i)} log( m[j, i] / Σ_{k∈D(i)} m[k, i] )

    denominator: "negatives" (everything but i and its positives) or
    "all" (every sample, i included).
    """
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    if denominator == "all":
        denom = m.sum(axis=0)
    elif denominator == "negatives":
        _, neg = neighbor_masks(positives, n)
        denom = (m * neg.T).sum(axis=0)
    else:
        raise ConfigError(f"unknown denominator {denominator!r}")
    if np.any(denom <= 0):
        raise DomainError("neighbor_cross_entropy: empty or non-positive denominator")

    acc = 0.0
    for i, row in enumerate(positives):
        for j in row:
            acc += np.log(m[j, i] / denom[i])
    return float(-acc / n)
