"""The four-term client objective: embedding cross-entropy, similarity
log-loss over pairs, a soft-binned calibration penalty, and the KL pull
toward the server prior, combined with weights (gamma, eta, lambda_t).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import markers as mk

SMOOTH_ABS_EPS = 1e-8


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    """gamma: similarity, eta: calibration, lambda0: KL with a schedule."""

    gamma: float = 1.0
    eta: float = 0.5
    lambda0: float = 0.1
    schedule: str = "cosine"  # "constant" | "cosine"
    horizon: int = 100

    def __post_init__(self) -> None:
        if min(self.gamma, self.eta, self.lambda0) < 0:
            raise LossError("loss weights must be nonnegative")
        if self.schedule not in ("constant", "cosine"):
            raise LossError(f"unknown lambda schedule {self.schedule!r}")

    def lambda_at(self, round_t: int) -> float:
        """lambda_t = lambda0 * 0.5*(1 + cos(pi t / T)) under cosine decay."""
        if self.schedule == "constant":
            return self.lambda0
        t = min(max(round_t, 0), self.horizon)
        return self.lambda0 * 0.5 * (1.0 + np.cos(np.pi * t / self.horizon))


def sim_loss_from_scores(l0, l1, u):
    """Cross-entropy given precomputed relation log scores (reusable by the
    runtime, which also needs pi1 = exp(l1 - lse) for the calibration term)."""
    u = np.asarray(ad.value_of(u), dtype=np.float64)
    if u.size == 0:
        raise LossError("similarity loss needs a non-empty pair batch")
    lse = ad.logaddexp(l0, l1)
    return -ad.vsum(u * (l1 - lse) + (1.0 - u) * (l0 - lse))


def sim_loss(s, u, posterior: mk.MarkerPosterior, priors: mk.RelationPriors):
    """Binary cross-entropy of pi1 against relation labels, in log space."""
    l0, l1 = mk.relation_log_scores(s, posterior, priors)
    return sim_loss_from_scores(l0, l1, u)


def smooth_abs(x):
    return ad.sqrt(ad.power(x, 2.0) + SMOOTH_ABS_EPS)


def soft_ece(confidences, labels, n_bins: int = 15, tau: float | None = None):
    """Differentiable calibration gap with Gaussian-kernel bin assignments.

    Assignments a_b(c) are a softmax over bins of -(c - center_b)^2 / tau^2;
    per-bin mass, accuracy and confidence are soft-weighted means and the
    result is sum_b w_b * smooth_abs(acc_b - conf_b).
    """
    if tau is None:
        tau = 0.5 / n_bins
    labels = np.asarray(ad.value_of(labels), dtype=np.float64)
    centers = (np.arange(n_bins) + 0.5) / n_bins
    c_row = ad.reshape(confidences, (1, -1)) if isinstance(confidences, ad.Var) else np.reshape(confidences, (1, -1))
    logits = -ad.power(c_row - centers.reshape(-1, 1), 2.0) / (tau * tau)
    assign = ad.exp(logits - ad.logsumexp(logits, axis=0))  # (B, P), columns sum to 1
    mass = ad.vsum(assign, axis=1)
    weight = mass / labels.size
    denom = mass + 1e-30  # empty-mass bins then contribute exactly 0 via weight
    acc = ad.vsum(assign * labels.reshape(1, -1), axis=1) / denom
    conf = ad.vsum(assign * c_row, axis=1) / denom
    return ad.vsum(weight * smooth_abs(acc - conf))


def total_loss(umap_term, sim_term, cal_term, kl_term, weights: LossWeights, round_t: int):
    """Weighted sum with lambda resolved through the schedule at round_t."""
    terms = {"umap": umap_term, "sim": sim_term, "cal": cal_term, "kl": kl_term}
    for name, term in terms.items():
        if not np.all(np.isfinite(ad.value_of(term))):
            raise LossError(f"non-finite {name} loss term")
    lam = weights.lambda_at(round_t)
    return umap_term + weights.gamma * sim_term + weights.eta * cal_term + lam * kl_term
