"""Clean/noisy pseudo-label separation.

Two selection rules run side by side: a per-class small-loss budget shaped by
the class prior (distribution-aware), and a global confidence threshold
(quality-aware). A sample is clean if either rule picks it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rot import PseudoLabelSet


@dataclass
class FilterConfig:
    rho: float = 0.7
    tau_g: float = 0.9
    class_prior: np.ndarray | None = None  # length-K simplex; the solver's beta

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ValueError("rho must be in (0, 1]")
        if not 0 <= self.tau_g <= 1:
            raise ValueError("tau_g must be in [0, 1]")
        if self.class_prior is not None:
            prior = np.asarray(self.class_prior, dtype=np.float64)
            if (prior < 0).any() or abs(prior.sum() - 1.0) > 1e-8:
                raise ValueError("class_prior must lie on the simplex")
            self.class_prior = prior


def per_sample_loss(p, pseudo: PseudoLabelSet, prob_floor: float = 1e-8) -> np.ndarray:
    """Cross-entropy of the prediction against the hard pseudo-label."""
    p = np.asarray(p, dtype=np.float64)
    picked = p[np.arange(len(pseudo.hard)), pseudo.hard]
    return -np.log(np.maximum(picked, prob_floor))


def distribution_aware_select(pseudo: PseudoLabelSet, cfg: FilterConfig) -> np.ndarray:
    """Smallest-loss members per class slice, budgeted by ceil(N * rho * r_j)."""
    if pseudo.loss is None:
        raise ValueError("per-sample losses must be populated before selection")
    n = len(pseudo.hard)
    k = pseudo.soft.shape[1]
    prior = cfg.class_prior
    if prior is None:
        prior = np.full(k, 1.0 / k)
    selected = []
    for j in range(k):
        slice_j = np.flatnonzero(pseudo.hard == j)
        if slice_j.size == 0:
            continue
        budget = min(slice_j.size, math.ceil(n * cfg.rho * prior[j]))
        if budget <= 0:
            continue
        # stable sort on loss: equal losses resolve to the lower index
        order = slice_j[np.argsort(pseudo.loss[slice_j], kind="stable")]
        selected.append(order[:budget])
    if not selected:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate(selected))


def quality_aware_select(pseudo: PseudoLabelSet, cfg: FilterConfig) -> np.ndarray:
    """Indices whose confidence strictly exceeds tau_g."""
    return np.flatnonzero(pseudo.confidence > cfg.tau_g)


def clean_union(dr_idx, qr_idx, pseudo: PseudoLabelSet) -> PseudoLabelSet:
    """New pseudo-label set whose clean flags are the union of both selections."""
    out = pseudo.copy()
    out.clean = np.zeros(len(pseudo.hard), dtype=bool)
    out.clean[np.asarray(dr_idx, dtype=np.int64)] = True
    out.clean[np.asarray(qr_idx, dtype=np.int64)] = True
    return out
