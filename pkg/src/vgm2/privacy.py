"""Privacy stack over the marker payload slots.

Secure aggregation uses pairwise-canceling masks in fixed-point integer
arithmetic (scale 2^40, mod 2^64), so the cohort sum equals the plaintext
sum bit-exactly.  The DP option clips and Gaussian-noises the payload in a
log-transformed coordinate system that keeps positives positive, and a
Renyi-DP accountant composes the (optionally subsampled) Gaussian mechanism
across rounds.  The membership-inference harness trains a small logistic
classifier on released summaries plus per-pair distance features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import markers as mk
from .metrics import roc_auc
from .special import lgamma

FIXED_POINT_SCALE = 2**40
FIXED_POINT_LIMIT = 2**20  # |value| bound per slot so cohort sums stay in int64
RDP_ORDERS = np.arange(2, 65)


class PrivacyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# fixed-point secure aggregation


def fixed_point_encode(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if np.any(np.abs(values) >= FIXED_POINT_LIMIT):
        raise PrivacyError(f"payload magnitude exceeds fixed-point range {FIXED_POINT_LIMIT}")
    scaled = np.round(values * FIXED_POINT_SCALE).astype(np.int64)
    return scaled.view(np.uint64)


def fixed_point_decode(words: np.ndarray) -> np.ndarray:
    return words.view(np.int64).astype(np.float64) / FIXED_POINT_SCALE


def _pair_mask(id_a: int, id_b: int, round_seed: int, n_slots: int) -> np.ndarray:
    lo, hi = sorted((int(id_a), int(id_b)))
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=(round_seed, lo, hi))))
    return gen.integers(0, 2**64, size=n_slots, dtype=np.uint64)


def mask_payload(payload: mk.Payload, client_id: int, cohort_ids, round_seed: int) -> mk.Payload:
    """Add pairwise masks: +mask(k,l) when k < l, -mask(k,l) otherwise.

    Masks are derived from the sorted id pair plus the round seed, so the
    two endpoints generate identical streams and the cohort-wide sum of all
    masks is exactly zero (mod 2^64).
    """
    if payload.masked:
        raise PrivacyError("payload is already masked")
    cohort = sorted(int(c) for c in cohort_ids)
    if client_id not in cohort:
        raise PrivacyError("client_id must be part of the cohort")
    words = fixed_point_encode(payload.vector)
    if len(cohort) < 2:
        import warnings

        warnings.warn("cohort of one: masking is vacuous", stacklevel=2)
    for other in cohort:
        if other == client_id:
            continue
        mask = _pair_mask(client_id, other, round_seed, words.size)
        if client_id < other:
            words = words + mask
        else:
            words = words - mask
    return mk.Payload(
        vector=words,
        n_samples=payload.n_samples,
        n_components=payload.n_components,
        flags=payload.flags | mk.FLAG_MASKED,
    )


def unmask_sum(payloads) -> np.ndarray:
    """Sum masked payloads over the full cohort; masks cancel bit-exactly."""
    if not payloads:
        raise PrivacyError("nothing to sum")
    if not all(p.masked for p in payloads):
        raise PrivacyError("unmask_sum expects masked payloads")
    total = np.zeros_like(payloads[0].vector)
    for p in payloads:
        total = total + p.vector
    return fixed_point_decode(total)


# ---------------------------------------------------------------------------
# differential privacy


@dataclass
class DPConfig:
    noise_multiplier: float = 0.0  # sigma_dp
    clip_norm: float = 10.0  # C
    delta: float = 1e-5
    sampling_rate: float = 1.0  # q: fraction of clients touched per round

    def __post_init__(self) -> None:
        if self.noise_multiplier < 0 or self.clip_norm <= 0:
            raise PrivacyError("need noise_multiplier >= 0 and clip_norm > 0")
        if not 0.0 < self.delta < 1.0:
            raise PrivacyError("delta must lie in (0, 1)")
        if not 0.0 < self.sampling_rate <= 1.0:
            raise PrivacyError("sampling_rate must lie in (0, 1]")

    @property
    def enabled(self) -> bool:
        return self.noise_multiplier > 0


def payload_to_noise_coords(vector: np.ndarray, n_components: int) -> np.ndarray:
    """Transform the stats layout into the coordinates that get noised:
    log(conc), m, log(kappa), log(alpha - 1), log(beta) per relation."""
    k = n_components
    out = np.array(vector, dtype=np.float64, copy=True)
    for offset in (0, 5 * k):
        conc = out[offset : offset + k]
        if np.any(conc <= 0):
            raise PrivacyError("cannot log-transform nonpositive concentrations")
        out[offset : offset + k] = np.log(conc)
        comp = out[offset + k : offset + 5 * k].reshape(k, 4)
        if np.any(comp[:, 1] <= 0) or np.any(comp[:, 2] <= 1.0) or np.any(comp[:, 3] <= 0):
            raise PrivacyError("payload outside the constraint set")
        comp[:, 1] = np.log(comp[:, 1])
        comp[:, 2] = np.log(comp[:, 2] - 1.0)
        comp[:, 3] = np.log(comp[:, 3])
    return out


def noise_coords_to_payload(coords: np.ndarray, n_components: int, repairs=None) -> np.ndarray:
    k = n_components
    out = np.array(coords, dtype=np.float64, copy=True)
    clipped = np.clip(out, -600.0, 600.0)
    if repairs is not None and not np.array_equal(clipped, out):
        repairs.append("dp noise pushed log coordinates out of range; clamped")
    out = clipped
    for offset in (0, 5 * k):
        out[offset : offset + k] = np.exp(out[offset : offset + k])
        comp = out[offset + k : offset + 5 * k].reshape(k, 4)
        comp[:, 1] = np.exp(comp[:, 1])
        comp[:, 2] = 1.0 + np.exp(comp[:, 2])
        comp[:, 3] = np.exp(comp[:, 3])
    return out


def dp_noise(payload: mk.Payload, cfg: DPConfig, rng: np.random.Generator, repairs=None) -> mk.Payload:
    """Clip the transformed payload to L2 norm C and add N(0, (sigma C)^2 I).

    With noise_multiplier = 0 this reduces to clipping alone.
    """
    coords = payload_to_noise_coords(payload.vector, payload.n_components)
    norm = float(np.linalg.norm(coords))
    if norm > cfg.clip_norm:
        coords = coords * (cfg.clip_norm / norm)
    if cfg.enabled:
        coords = coords + rng.normal(0.0, cfg.noise_multiplier * cfg.clip_norm, size=coords.shape)
    vector = noise_coords_to_payload(coords, payload.n_components, repairs)
    return mk.Payload(
        vector=vector,
        n_samples=payload.n_samples,
        n_components=payload.n_components,
        flags=payload.flags | mk.FLAG_DP_NOISED,
    )


def _log_binom(n: int, j: np.ndarray) -> np.ndarray:
    return lgamma(n + 1.0) - lgamma(j + 1.0) - lgamma(n - j + 1.0)


def rdp_per_round(sigma: float, q: float, orders=RDP_ORDERS) -> np.ndarray:
    """Renyi-DP of one (Poisson-subsampled) Gaussian mechanism invocation.

    At q = 1 this is the exact lambda / (2 sigma^2); for q < 1 the standard
    integer-order binomial-expansion bound is used.
    """
    orders = np.asarray(orders, dtype=np.float64)
    if sigma <= 0:
        raise PrivacyError("rdp requires sigma > 0")
    if q >= 1.0:
        return orders / (2.0 * sigma * sigma)
    out = np.empty_like(orders)
    for i, lam in enumerate(orders):
        lam_i = int(lam)
        j = np.arange(lam_i + 1, dtype=np.float64)
        log_terms = (
            _log_binom(lam_i, j)
            + (lam_i - j) * np.log1p(-q)
            + j * np.log(q)
            + j * (j - 1.0) / (2.0 * sigma * sigma)
        )
        peak = log_terms.max()
        out[i] = (peak + np.log(np.sum(np.exp(log_terms - peak)))) / (lam_i - 1.0)
    return out


@dataclass
class AccountantState:
    orders: np.ndarray = field(default_factory=lambda: RDP_ORDERS.astype(float))
    rdp: np.ndarray = field(default_factory=lambda: np.zeros(len(RDP_ORDERS)))
    rounds: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {"orders": self.orders.tolist(), "rdp": self.rdp.tolist(), "rounds": self.rounds}, sort_keys=True
        )

    @classmethod
    def from_json(cls, blob: str) -> "AccountantState":
        data = json.loads(blob)
        return cls(orders=np.array(data["orders"]), rdp=np.array(data["rdp"]), rounds=int(data["rounds"]))


def eps_from_rdp(orders: np.ndarray, rdp: np.ndarray, delta: float) -> float:
    eps = rdp + np.log(1.0 / delta) / (orders - 1.0)
    return float(np.min(eps))


def privacy_accountant(cfg: DPConfig, rounds: int) -> tuple[float, float]:
    """(epsilon, delta) after ``rounds`` compositions of the mechanism."""
    if rounds < 0:
        raise PrivacyError("rounds must be nonnegative")
    if rounds == 0:
        return 0.0, cfg.delta
    if not cfg.enabled:
        return float("inf"), cfg.delta
    per_round = rdp_per_round(cfg.noise_multiplier, cfg.sampling_rate)
    return eps_from_rdp(RDP_ORDERS.astype(float), rounds * per_round, cfg.delta), cfg.delta


def accountant_after(cfg: DPConfig, rounds: int) -> AccountantState:
    state = AccountantState()
    if cfg.enabled and rounds > 0:
        state.rdp = rounds * rdp_per_round(cfg.noise_multiplier, cfg.sampling_rate)
    state.rounds = rounds
    return state


# ---------------------------------------------------------------------------
# membership-inference stress test


@dataclass
class AttackDataset:
    """Balanced member/non-member pair features derived from released summaries."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if len(np.unique(self.labels)) < 2:
            raise PrivacyError("attack targets are degenerate (single class)")


def summary_features(posterior: mk.MarkerPosterior) -> np.ndarray:
    """Released summary statistics: per relation and component the predictive
    mean, predictive variance and mean mixture weight."""
    feats = []
    for rel in (posterior.diff, posterior.same):
        weights = rel.conc / rel.conc.sum()
        scale2 = rel.beta * (rel.kappa + 1.0) / (rel.alpha * rel.kappa)
        # Student-t variance = scale^2 * nu/(nu-2) with nu = 2*alpha
        var = scale2 * (2.0 * rel.alpha) / np.maximum(2.0 * rel.alpha - 2.0, 1e-6)
        feats.extend([rel.m, var, weights])
    return np.concatenate([np.asarray(f, dtype=np.float64) for f in feats])


def pair_features(distances: np.ndarray, posterior: mk.MarkerPosterior, priors: mk.RelationPriors) -> np.ndarray:
    """Per-pair features: the distance, both relation log densities, pi1."""
    distances = np.asarray(distances, dtype=np.float64)
    l0, l1 = mk.relation_log_scores(distances, posterior, priors)
    p1 = mk.pi1(distances, posterior, priors)
    return np.stack([distances, l0, l1, p1], axis=1)


def build_attack_dataset(client_records, surface: str = "client") -> AttackDataset:
    """Assemble the balanced attack set from per-client release records.

    Each record is a dict with keys ``member_s``, ``nonmember_s``,
    ``client_summary`` (payload vector), ``aggregate_summary``, ``k`` and
    ``pi1_prior``; the surface flag picks which summary the attacker sees.
    """
    if surface not in ("client", "aggregate"):
        raise PrivacyError(f"unknown attack surface {surface!r}")
    rows, labels = [], []
    for rec in client_records:
        vec = rec["client_summary"] if surface == "client" else rec["aggregate_summary"]
        posterior = mk.vector_to_posterior(np.asarray(vec), rec["k"])
        priors = mk.RelationPriors(1.0 - rec["pi1_prior"], rec["pi1_prior"])
        summary = summary_features(posterior)
        for s_values, label in ((rec["member_s"], 1.0), (rec["nonmember_s"], 0.0)):
            s_values = np.asarray(s_values, dtype=np.float64)
            n = len(s_values)
            if n == 0:
                continue
            pf = pair_features(s_values, posterior, priors)
            block = np.concatenate([pf, np.tile(summary, (n, 1))], axis=1)
            rows.append(block)
            labels.extend([label] * n)
    if not rows:
        raise PrivacyError("no attack rows could be built")
    return AttackDataset(features=np.concatenate(rows, axis=0), labels=np.array(labels))


def logistic_attack_auc(dataset: AttackDataset, rng: np.random.Generator, steps: int = 400, lr: float = 0.5) -> float:
    """Train a logistic classifier by plain gradient descent (fixed budget)
    on half the targets; report ROC AUC on the held-out half."""
    x = np.array(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.labels, dtype=np.float64)
    mu, sd = x.mean(axis=0), x.std(axis=0)
    x = (x - mu) / np.maximum(sd, 1e-9)
    x = np.concatenate([x, np.ones((len(x), 1))], axis=1)

    order = rng.permutation(len(x))
    half = len(x) // 2
    train, test = order[:half], order[half:]
    if len(np.unique(y[test])) < 2 or len(np.unique(y[train])) < 2:
        raise PrivacyError("attack split is degenerate")

    w = np.zeros(x.shape[1])
    for _ in range(steps):
        z = x[train] @ w
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -35, 35)))
        grad = x[train].T @ (p - y[train]) / len(train)
        w -= lr * grad
    scores = x[test] @ w
    return roc_auc(scores, y[test])


def mi_attack(client_records, rng: np.random.Generator, surface: str = "client", n_rounds_seen: int | None = None) -> float:
    """End-to-end App-style stress test: features from released summaries,
    logistic attacker, held-out AUC.  Requires summaries from >= 2 rounds."""
    if n_rounds_seen is not None and n_rounds_seen < 2:
        raise PrivacyError("attack needs released summaries from at least 2 rounds")
    dataset = build_attack_dataset(client_records, surface=surface)
    return logistic_attack_auc(dataset, rng)
