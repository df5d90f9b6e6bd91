"""Batch losses over projected embeddings, with analytic gradients.

All losses operate on row matrices of projected vectors. Gradients are
returned for weighted per-anchor sums so the combined objective can scale
each anchor by its positive-count coefficient without re-deriving anything;
weights default to ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rot import PseudoLabelSet


@dataclass
class LossBreakdown:
    l_cwcl: float
    l_iwcl: float
    l_ce: float
    l_total: float


def positive_counts(pseudo: PseudoLabelSet) -> np.ndarray:
    """|P(i)|: same-class clean partners within the batch (0 for noisy anchors)."""
    clean = pseudo.clean
    same = pseudo.hard[:, None] == pseudo.hard[None, :]
    pos = same & clean[:, None] & clean[None, :]
    np.fill_diagonal(pos, False)
    return pos.sum(axis=1)


def _offdiag_softmax(sim, tau):
    """Row softmax of sim/tau excluding the diagonal, plus its log norms."""
    logits = sim / tau
    np.fill_diagonal(logits, -np.inf)
    mx = logits.max(axis=1)
    expd = np.exp(logits - mx[:, None])
    norm = expd.sum(axis=1)
    return expd / norm[:, None], mx + np.log(norm)


def cwcl_loss(z, pseudo: PseudoLabelSet, tau: float, weights=None):
    """Class-wise contrastive loss.

    Clean anchors pull their clean same-class partners together, each pair
    scaled by the product of the two confidences; the denominator ranges over
    every other anchor in the batch. Returns (weighted sum, per-anchor
    values, gradient of the weighted sum w.r.t. z).
    """
    z = np.asarray(z, dtype=np.float64)
    b = z.shape[0]
    if weights is None:
        weights = np.ones(b)
    per_sample = np.zeros(b)
    grad = np.zeros_like(z)
    if b < 2:
        return 0.0, per_sample, grad

    clean = pseudo.clean
    q = pseudo.confidence
    pos = (pseudo.hard[:, None] == pseudo.hard[None, :]) & clean[:, None] & clean[None, :]
    np.fill_diagonal(pos, False)
    w_pair = (q[:, None] * q[None, :]) * pos  # w_ip on positive pairs, else 0
    w_total = w_pair.sum(axis=1)
    active = w_total > 0
    if not active.any():
        return 0.0, per_sample, grad

    sim = z @ z.T
    softmax, log_norm = _offdiag_softmax(sim, tau)
    # L_c(i) = -sum_p w_ip (s_ip / tau - log_norm_i)
    per_sample = -(w_pair * (sim / tau - log_norm[:, None])).sum(axis=1)
    per_sample[~active] = 0.0

    g = (weights[:, None] / tau) * (w_total[:, None] * softmax - w_pair)
    g[~active] = 0.0
    grad = (g + g.T) @ z
    total = float((weights * per_sample).sum())
    return total, per_sample, grad


def iwcl_loss(z, z_aug, tau: float, weights=None):
    """Instance-wise contrastive loss.

    The positive is the anchor's own augmented view; negatives are every other
    base-view anchor, with the positive kept in the denominator. Returns
    (weighted sum, per-anchor values, grad w.r.t. z, grad w.r.t. z_aug).
    """
    z = np.asarray(z, dtype=np.float64)
    z_aug = np.asarray(z_aug, dtype=np.float64)
    b = z.shape[0]
    if weights is None:
        weights = np.ones(b)

    sim = z @ z.T / tau
    np.fill_diagonal(sim, -np.inf)
    pos = (z * z_aug).sum(axis=1) / tau
    stacked = np.concatenate([sim, pos[:, None]], axis=1)
    mx = stacked.max(axis=1)
    expd = np.exp(stacked - mx[:, None])
    norm = expd.sum(axis=1)
    log_norm = mx + np.log(norm)
    per_sample = -(pos - log_norm)

    sigma = expd / norm[:, None]
    sigma_neg = sigma[:, :b]  # softmax mass on the other base anchors
    sigma_pos = sigma[:, b]  # mass on the own augmented view
    g = (weights[:, None] / tau) * sigma_neg
    d = (weights / tau) * (sigma_pos - 1.0)
    grad_z = (g + g.T) @ z + d[:, None] * z_aug
    grad_aug = d[:, None] * z
    total = float((weights * per_sample).sum())
    return total, per_sample, grad_z, grad_aug


def ce_loss(p, pseudo: PseudoLabelSet):
    """Mean cross-entropy over clean anchors; gradient is w.r.t. the logits.

    With no clean anchor in the batch the contribution is zero.
    """
    p = np.asarray(p, dtype=np.float64)
    b, _ = p.shape
    clean = pseudo.clean
    n_clean = int(clean.sum())
    grad_logits = np.zeros_like(p)
    if n_clean == 0:
        return 0.0, grad_logits
    rows = np.flatnonzero(clean)
    picked = p[rows, pseudo.hard[rows]]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    grad_logits[rows] = p[rows]
    grad_logits[rows, pseudo.hard[rows]] -= 1.0
    grad_logits /= n_clean
    return loss, grad_logits


def total_loss(cwcl_values, iwcl_values, pos_counts, ce_value, omega: float) -> LossBreakdown:
    """Combined objective: omega * sum_i (L_c(i)+L_i(i)) / (1+|P(i)|) + (1-omega) * CE."""
    coef = 1.0 / (1.0 + np.asarray(pos_counts, dtype=np.float64))
    l_cwcl = float((coef * np.asarray(cwcl_values)).sum())
    l_iwcl = float((coef * np.asarray(iwcl_values)).sum())
    l_total = omega * (l_cwcl + l_iwcl) + (1.0 - omega) * ce_value
    return LossBreakdown(l_cwcl=l_cwcl, l_iwcl=l_iwcl, l_ce=float(ce_value), l_total=l_total)
