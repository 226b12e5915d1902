"""Server-side pooling of client marker statistics.

The default mode is information projection: convert every client posterior
to its expected sufficient statistics (mean parameters), take the weighted
average, and invert back into the conjugate family.  For the Dir-NIG family
the mean parameters are E[log w_c] per mixture component plus, per NIG
component, e1 = E[1/s2], e2 = E[log s2], e3 = E[mu/s2], e4 = E[mu^2/s2].
An alternative "natural-avg" mode averages natural parameters instead; the
two disagree for this family, and both are exposed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import markers as mk
from .special import digamma, trigamma

EULER_GAMMA = 0.5772156649015329

KAPPA_BOUNDS = (1e-4, 1e4)
ALPHA_BOUNDS = (1.0 + 1e-3, 1e4)
CONC_BOUNDS = (1e-3, 1e4)

AGGREGATION_MODES = ("moment-match", "natural-avg")


class AggregationError(ValueError):
    pass


@dataclass
class RelationMoments:
    """Mean parameters for one relation's Dir-NIG block; all fields (K,)."""

    elog_w: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray
    e4: np.ndarray


@dataclass
class GlobalPrior:
    posterior: mk.MarkerPosterior
    round_index: int = 0


def default_prior(n_components: int, round_index: int = 0) -> GlobalPrior:
    """Weak starting prior: all-ones Dirichlet, NIG(m=1, kappa=0.1, a=2, b=2)."""

    def rel() -> mk.RelationPosterior:
        k = n_components
        return mk.RelationPosterior(
            conc=np.ones(k), m=np.full(k, 1.0), kappa=np.full(k, 0.1), alpha=np.full(k, 2.0), beta=np.full(k, 2.0)
        )

    return GlobalPrior(posterior=mk.MarkerPosterior(diff=rel(), same=rel()), round_index=round_index)


# ---------------------------------------------------------------------------
# posterior <-> moments


def relation_to_moments(rel: mk.RelationPosterior) -> RelationMoments:
    conc = np.asarray(rel.conc, dtype=np.float64)
    return RelationMoments(
        elog_w=digamma(conc) - digamma(conc.sum()),
        e1=rel.alpha / rel.beta,
        e2=np.log(rel.beta) - digamma(rel.alpha),
        e3=rel.m * rel.alpha / rel.beta,
        e4=1.0 / rel.kappa + rel.m**2 * rel.alpha / rel.beta,
    )


def posterior_to_moments(posterior: mk.MarkerPosterior) -> tuple[RelationMoments, RelationMoments]:
    return relation_to_moments(posterior.diff), relation_to_moments(posterior.same)


def moments_to_vector(moms: tuple[RelationMoments, RelationMoments]) -> np.ndarray:
    """Flatten to the payload slot layout: [elog_w x K, (e1,e2,e3,e4) x K] x 2."""
    parts = []
    for rel in moms:
        parts.append(rel.elog_w)
        parts.append(np.stack([rel.e1, rel.e2, rel.e3, rel.e4], axis=1).reshape(-1))
    return np.concatenate(parts)


def vector_to_moments(vector: np.ndarray, n_components: int) -> tuple[RelationMoments, RelationMoments]:
    k = n_components
    if vector.shape != (mk.scalars_per_marker(k),):
        raise AggregationError(f"moment vector has shape {vector.shape}, expected ({mk.scalars_per_marker(k)},)")

    def rel(offset: int) -> RelationMoments:
        elog = vector[offset : offset + k]
        comp = vector[offset + k : offset + 5 * k].reshape(k, 4)
        return RelationMoments(elog_w=elog.copy(), e1=comp[:, 0].copy(), e2=comp[:, 1].copy(), e3=comp[:, 2].copy(), e4=comp[:, 3].copy())

    return rel(0), rel(5 * k)


# ---------------------------------------------------------------------------
# scalar inversions


def digamma_inverse(y, n_iter: int = 12, tol: float = 1e-14) -> np.ndarray:
    """Newton inversion of psi with the standard two-regime initializer."""
    y = np.asarray(y, dtype=np.float64)
    x = np.where(y >= -2.22, np.exp(y) + 0.5, -1.0 / (y + EULER_GAMMA))
    for _ in range(n_iter):
        err = digamma(x) - y
        if np.max(np.abs(err)) < tol:
            break
        x = np.maximum(x - err / trigamma(x), 1e-12)
    return x


def solve_log_minus_digamma(target: float, n_iter: int = 60, tol: float = 1e-13) -> float:
    """Solve log(a) - psi(a) = target for a > 0 (strictly decreasing in a).

    Newton in log space; the initializer is the classic gamma-MLE surrogate
    a0 = (3 - t + sqrt((t-3)^2 + 24 t)) / (12 t).
    """
    if target <= 0:
        raise AggregationError(f"log(a) - psi(a) = {target} has no positive solution")
    a = (3.0 - target + np.sqrt((target - 3.0) ** 2 + 24.0 * target)) / (12.0 * target)
    a = min(max(a, 1e-10), 1e12)
    u = np.log(a)
    for _ in range(n_iter):
        a = np.exp(u)
        f = np.log(a) - digamma(a) - target
        if abs(f) < tol * (1.0 + abs(target)):
            break
        df_du = a * (1.0 / a - trigamma(a))  # derivative in u = log a, negative
        step = f / df_du
        u = u - np.clip(step, -5.0, 5.0)
    return float(np.exp(u))


def dirichlet_from_elog(target: np.ndarray, tol: float = 1e-10, max_iter: int = 500):
    """Invert E[log w_c] = psi(a_c) - psi(sum a) by fixed-point iteration,
    with a damped Newton fallback.  Returns (conc, residual, repairs)."""
    target = np.asarray(target, dtype=np.float64)
    k = target.size
    repairs: list[str] = []
    if k == 1:
        # single-component Dirichlet is a point mass; concentration is not
        # identifiable from its (zero) moment, pin it to 1
        return np.ones(1), 0.0, repairs

    def residual(conc):
        return float(np.max(np.abs(digamma(conc) - digamma(conc.sum()) - target)))

    conc = np.clip(np.exp(target - target.mean()), 1e-3, 1e3)  # symmetric-ish start
    best = conc.copy()
    best_res = residual(conc)
    # a few Minka fixed-point sweeps reach the Newton basin cheaply ...
    warmup = min(max_iter, 8)
    for _ in range(warmup):
        conc = digamma_inverse(target + digamma(conc.sum()))
        res = residual(conc)
        if res < best_res:
            best, best_res = conc.copy(), res
        if res < tol:
            return conc, res, repairs
    # ... then damped Newton finishes quadratically
    conc = _dirichlet_newton(target, best, tol, repairs, max_iter=max_iter - warmup)
    res = residual(conc)
    if res < tol:
        return conc, res, repairs
    if res > 1e-6:
        repairs.append(f"dirichlet inversion residual {res:.2e}; clamped")
        conc = np.clip(conc, *CONC_BOUNDS)
        res = residual(conc)
    return conc, res, repairs


def _dirichlet_newton(target, conc0, tol, repairs, max_iter: int = 200):
    """Damped Newton on F(a)_c = psi(a_c) - psi(sum a) - t_c; the Jacobian is
    diag(psi'(a_c)) - psi'(sum a) 11^T, inverted by Sherman-Morrison."""
    conc = conc0.copy()

    def f_of(c):
        return digamma(c) - digamma(c.sum()) - target

    fval = f_of(conc)
    for _ in range(max_iter):
        if np.max(np.abs(fval)) < tol:
            break
        d = trigamma(conc)
        z = trigamma(conc.sum())
        inv_d = 1.0 / d
        denom = 1.0 - z * inv_d.sum()
        if abs(denom) < 1e-14:
            repairs.append("dirichlet newton singular jacobian")
            break
        step = inv_d * fval + inv_d * z * (inv_d * fval).sum() / denom
        scale = 1.0
        for _ in range(30):
            trial = conc - scale * step
            if np.all(trial > 0):
                trial_f = f_of(trial)
                if np.max(np.abs(trial_f)) < np.max(np.abs(fval)):
                    conc, fval = trial, trial_f
                    break
            scale *= 0.5
        else:
            break
    return conc


def nig_from_moments(e1, e2, e3, e4, repairs: list):
    """Invert NIG mean parameters; clamps into the representable region and
    records a repair note when the inputs fall outside it."""
    e1 = float(e1)
    if e1 <= 0:
        repairs.append(f"nig e1={e1:.3e} nonpositive; clamped")
        e1 = 1e-8
    m = float(e3) / e1
    spread = float(e4) - float(e3) ** 2 / e1
    if spread <= 0:
        repairs.append(f"nig precision moment {spread:.3e} nonrepresentable; kappa clamped")
        kappa = KAPPA_BOUNDS[1]
    else:
        kappa = 1.0 / spread
        if not KAPPA_BOUNDS[0] <= kappa <= KAPPA_BOUNDS[1]:
            repairs.append(f"nig kappa {kappa:.3e} out of bounds; clamped")
            kappa = float(np.clip(kappa, *KAPPA_BOUNDS))
    target = float(e2) + np.log(e1)
    if target <= 0:
        repairs.append(f"nig shape target {target:.3e} nonpositive; alpha clamped high")
        alpha = ALPHA_BOUNDS[1]
    else:
        alpha = solve_log_minus_digamma(target)
        if not ALPHA_BOUNDS[0] <= alpha <= ALPHA_BOUNDS[1]:
            repairs.append(f"nig alpha {alpha:.3e} out of bounds; clamped")
            alpha = float(np.clip(alpha, *ALPHA_BOUNDS))
    beta = alpha / e1
    return m, kappa, alpha, beta


def moments_to_relation(moms: RelationMoments) -> tuple[mk.RelationPosterior, list]:
    repairs: list[str] = []
    conc, _, dir_repairs = dirichlet_from_elog(moms.elog_w)
    repairs.extend(dir_repairs)
    k = moms.e1.size
    m = np.empty(k)
    kappa = np.empty(k)
    alpha = np.empty(k)
    beta = np.empty(k)
    for c in range(k):
        m[c], kappa[c], alpha[c], beta[c] = nig_from_moments(moms.e1[c], moms.e2[c], moms.e3[c], moms.e4[c], repairs)
    return mk.RelationPosterior(conc=conc, m=m, kappa=kappa, alpha=alpha, beta=beta), repairs


def moments_to_posterior(moms: tuple[RelationMoments, RelationMoments]) -> tuple[mk.MarkerPosterior, list]:
    diff, r0 = moments_to_relation(moms[0])
    same, r1 = moments_to_relation(moms[1])
    return mk.MarkerPosterior(diff=diff, same=same), r0 + r1


# ---------------------------------------------------------------------------
# natural-parameter coordinates (alternative aggregation mode)


def posterior_to_naturals(posterior: mk.MarkerPosterior) -> np.ndarray:
    """Affine natural coordinates per relation: [conc x K, (kappa, kappa*m,
    alpha, beta + kappa*m^2/2) x K]; averaging these is natural-parameter
    averaging for the Dir-NIG family."""
    parts = []
    for rel in (posterior.diff, posterior.same):
        parts.append(np.asarray(rel.conc, dtype=np.float64))
        comp = np.stack(
            [rel.kappa, rel.kappa * rel.m, rel.alpha, rel.beta + 0.5 * rel.kappa * rel.m**2], axis=1
        ).reshape(-1)
        parts.append(comp)
    return np.concatenate(parts)


def naturals_to_posterior(vector: np.ndarray, n_components: int) -> tuple[mk.MarkerPosterior, list]:
    k = n_components
    repairs: list[str] = []

    def rel(offset: int) -> mk.RelationPosterior:
        conc = vector[offset : offset + k].copy()
        comp = vector[offset + k : offset + 5 * k].reshape(k, 4)
        kappa = comp[:, 0].copy()
        m = comp[:, 1] / np.maximum(kappa, 1e-12)
        alpha = comp[:, 2].copy()
        beta = comp[:, 3] - 0.5 * kappa * m**2
        if np.any(conc <= 0):
            repairs.append("natural-avg conc clamped positive")
            conc = np.clip(conc, *CONC_BOUNDS)
        if np.any(kappa < KAPPA_BOUNDS[0]) or np.any(kappa > KAPPA_BOUNDS[1]):
            repairs.append("natural-avg kappa clamped")
            kappa = np.clip(kappa, *KAPPA_BOUNDS)
        if np.any(alpha < ALPHA_BOUNDS[0]) or np.any(alpha > ALPHA_BOUNDS[1]):
            repairs.append("natural-avg alpha clamped")
            alpha = np.clip(alpha, *ALPHA_BOUNDS)
        if np.any(beta <= 0):
            repairs.append("natural-avg beta clamped positive")
            beta = np.maximum(beta, 1e-8)
        return mk.RelationPosterior(conc=conc, m=m, kappa=kappa, alpha=alpha, beta=beta)

    return mk.MarkerPosterior(diff=rel(0), same=rel(5 * k)), repairs


def aggregation_vector(posterior: mk.MarkerPosterior, mode: str) -> np.ndarray:
    """The linear coordinates a client contributes for the given mode (this
    is what gets weighted, noised and masked under secure aggregation)."""
    if mode == "moment-match":
        return moments_to_vector(posterior_to_moments(posterior))
    if mode == "natural-avg":
        return posterior_to_naturals(posterior)
    raise AggregationError(f"unknown aggregation mode {mode!r}")


def posterior_from_mean_vector(mean_vector: np.ndarray, n_components: int, mode: str):
    if mode == "moment-match":
        return moments_to_posterior(vector_to_moments(mean_vector, n_components))
    if mode == "natural-avg":
        return naturals_to_posterior(mean_vector, n_components)
    raise AggregationError(f"unknown aggregation mode {mode!r}")


# ---------------------------------------------------------------------------
# aggregation entry points


@dataclass
class AggregationResult:
    prior: GlobalPrior
    mode: str
    repairs: list = field(default_factory=list)


def aggregate(payloads, weights=None, mode: str = "moment-match", round_index: int = 0) -> AggregationResult:
    """Pool plaintext stats payloads into the next global prior.

    ``weights`` defaults to the per-payload sample counts n_k; they are
    normalized, so any common rescaling leaves the result unchanged.
    """
    if mode not in AGGREGATION_MODES:
        raise AggregationError(f"unknown aggregation mode {mode!r}")
    if not payloads:
        raise AggregationError("no payloads to aggregate")
    ks = {p.n_components for p in payloads}
    if len(ks) != 1:
        raise AggregationError(f"mixed component counts across payloads: {sorted(ks)}")
    k = ks.pop()
    if any(p.masked for p in payloads):
        raise AggregationError("masked payloads must be summed with unmask_sum first")
    if weights is None:
        weights = np.array([float(p.n_samples) for p in payloads])
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise AggregationError("weights must be nonnegative with positive total")
    w = weights / weights.sum()

    mean_vec = np.zeros(mk.scalars_per_marker(k))
    for wk, payload in zip(w, payloads):
        post = mk.from_sufficient_stats(payload)
        mean_vec += wk * aggregation_vector(post, mode)
    posterior, repairs = posterior_from_mean_vector(mean_vec, k, mode)
    posterior.validate()
    return AggregationResult(prior=GlobalPrior(posterior=posterior, round_index=round_index), mode=mode, repairs=repairs)


def aggregate_weighted_sum(sum_vector: np.ndarray, total_weight: float, n_components: int, mode: str, round_index: int = 0) -> AggregationResult:
    """Aggregation from a secure-aggregated sum of weight-scaled vectors."""
    if total_weight <= 0:
        raise AggregationError("total weight must be positive")
    posterior, repairs = posterior_from_mean_vector(np.asarray(sum_vector) / total_weight, n_components, mode)
    posterior.validate()
    return AggregationResult(prior=GlobalPrior(posterior=posterior, round_index=round_index), mode=mode, repairs=repairs)
