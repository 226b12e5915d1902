"""Mixture relation markers: a Dirichlet + Normal-Inverse-Gamma variational
state per relation (same-class / different-class) over latent pair distances.

The math here is written against the polymorphic ops in
:mod:`vgm2.autodiff`, so every function works both on plain numpy arrays
(evaluation) and on tape variables (training).  The posterior-predictive of a
NIG component is a Student-t with df = 2*alpha, location m and
scale^2 = beta*(kappa+1)/(alpha*kappa).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

PAYLOAD_MAGIC = b"VGM2"
PAYLOAD_VERSION = 1
HEADER_FORMAT = "<4sHHQ"
HEADER_BYTES = struct.calcsize(HEADER_FORMAT)  # 16

# flag bits carried in the high byte of the header version field
FLAG_MASKED = 1 << 8
FLAG_DP_NOISED = 1 << 9
FLAG_MOMENTS = 1 << 10
FLAG_NATURALS = 1 << 11

# floor offset for the NIG shape: shape = 1 + softplus(raw) keeps the
# Student-t predictive proper (finite mean and normalizable density)
SHAPE_FLOOR = 1.0

# wide training box for constrained marker parameters; keeps expected
# sufficient statistics (and hence uploads) in a bounded numeric range
POSITIVE_BOX = (1e-3, 1e3)
LOCATION_BOX = (-1e3, 1e3)


class MarkerConstraintError(ValueError):
    pass


def scalars_per_marker(n_components: int) -> int:
    """Upload size in scalars for both relations: 2*(K + 4K) = 10K."""
    return 10 * n_components


@dataclass
class RelationPosterior:
    """Dir-NIG state for one relation; all fields are (K,) arrays (or Vars)."""

    conc: np.ndarray
    m: np.ndarray
    kappa: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def n_components(self) -> int:
        return int(np.shape(ad.value_of(self.conc))[0])

    def validate(self) -> "RelationPosterior":
        conc, kappa, alpha, beta = (ad.value_of(x) for x in (self.conc, self.kappa, self.alpha, self.beta))
        if not (np.all(conc > 0) and np.all(kappa > 0) and np.all(beta > 0)):
            raise MarkerConstraintError("concentrations, kappa and beta must be positive")
        if not np.all(alpha > SHAPE_FLOOR):
            raise MarkerConstraintError(f"NIG shape must exceed {SHAPE_FLOOR}")
        return self

    def copy(self) -> "RelationPosterior":
        return RelationPosterior(*(np.array(ad.value_of(f), copy=True) for f in (self.conc, self.m, self.kappa, self.alpha, self.beta)))


@dataclass
class MarkerPosterior:
    """Both relations; relation 0 = different-class, relation 1 = same-class."""

    diff: RelationPosterior
    same: RelationPosterior

    @property
    def n_components(self) -> int:
        return self.diff.n_components

    def validate(self) -> "MarkerPosterior":
        self.diff.validate()
        self.same.validate()
        if self.diff.n_components != self.same.n_components:
            raise MarkerConstraintError("relations must share the component count")
        return self

    def copy(self) -> "MarkerPosterior":
        return MarkerPosterior(self.diff.copy(), self.same.copy())


@dataclass
class RelationPriors:
    """Prior relation probabilities; pi0 + pi1 = 1, each in (0, 1)."""

    pi0: float
    pi1: float

    def __post_init__(self) -> None:
        if not (0.0 < self.pi0 < 1.0 and 0.0 < self.pi1 < 1.0):
            raise MarkerConstraintError("relation priors must lie in (0,1)")
        if abs(self.pi0 + self.pi1 - 1.0) > 1e-12:
            raise MarkerConstraintError("relation priors must sum to 1")

    @classmethod
    def from_counts(cls, n_same: int, n_diff: int, floor: float = 0.02) -> "RelationPriors":
        total = max(n_same + n_diff, 1)
        p1 = min(max(n_same / total, floor), 1.0 - floor)
        return cls(pi0=1.0 - p1, pi1=p1)


# ---------------------------------------------------------------------------
# densities


def student_t_logpdf(s, m, kappa, alpha, beta):
    """Log density of the NIG posterior-predictive Student-t at distance s."""
    scale2 = beta * (kappa + 1.0) / (alpha * kappa)
    nu = 2.0 * alpha
    z2 = ad.power(s - m, 2.0) / (nu * scale2)
    return (
        ad.lgamma(alpha + 0.5)
        - ad.lgamma(alpha)
        - 0.5 * ad.log(np.pi * nu * scale2)
        - (alpha + 0.5) * ad.log(1.0 + z2)
    )


def student_t_pdf(s, m, kappa, alpha, beta):
    for name, v in (("kappa", kappa), ("alpha", alpha), ("beta", beta)):
        if not np.all(ad.value_of(v) > 0):
            raise MarkerConstraintError(f"student_t_pdf requires {name} > 0")
    return ad.exp(student_t_logpdf(s, m, kappa, alpha, beta))


def mixture_weights(conc):
    """Posterior-mean Dirichlet weights E[w_c] = conc_c / sum(conc)."""
    return conc / ad.vsum(conc)


def mixture_log_predictive(s, rel: RelationPosterior):
    """Log of the Dirichlet-mean-weighted Student-t mixture at distances s.

    ``s`` is a flat vector (length P); component parameters are (K,).  The
    result is a length-P vector.
    """
    k = rel.n_components
    log_w = ad.reshape(ad.log(mixture_weights(rel.conc)), (k, 1))
    sv = ad.reshape(s, (1, -1)) if isinstance(s, ad.Var) else np.reshape(np.atleast_1d(ad.value_of(s)), (1, -1))
    comp = student_t_logpdf(
        sv,
        ad.reshape(rel.m, (k, 1)),
        ad.reshape(rel.kappa, (k, 1)),
        ad.reshape(rel.alpha, (k, 1)),
        ad.reshape(rel.beta, (k, 1)),
    )
    return ad.logsumexp(log_w + comp, axis=0)


def mixture_predictive(s, rel: RelationPosterior):
    """Density form of :func:`mixture_log_predictive`."""
    if not isinstance(rel.conc, ad.Var):
        rel.validate()
    return ad.exp(mixture_log_predictive(s, rel))


def relation_log_scores(s, posterior: MarkerPosterior, priors: RelationPriors):
    """Unnormalized log posterior scores (l0, l1) for each distance in s."""
    l0 = np.log(priors.pi0) + mixture_log_predictive(s, posterior.diff)
    l1 = np.log(priors.pi1) + mixture_log_predictive(s, posterior.same)
    return l0, l1


def pi1(s, posterior: MarkerPosterior, priors: RelationPriors, counters=None):
    """Posterior same-class probability for distances s, in log space.

    When both relation densities underflow to exactly zero the prior pi1 is
    returned for that entry and ``counters['pi1_underflow']`` is incremented.
    """
    on_tape = isinstance(s, ad.Var) or isinstance(posterior.same.conc, ad.Var)
    if on_tape:
        l0, l1 = relation_log_scores(s, posterior, priors)
        lse = ad.logaddexp(l0, l1)
        return ad.exp(l1 - lse)
    with np.errstate(over="ignore", invalid="ignore"):
        l0, l1 = relation_log_scores(s, posterior, priors)
        out = np.exp(l1 - np.logaddexp(l0, l1))
    bad = ~np.isfinite(l0) & ~np.isfinite(l1)
    if np.any(bad):
        out = np.where(bad, priors.pi1, out)
        if counters is not None:
            counters["pi1_underflow"] = counters.get("pi1_underflow", 0) + int(np.sum(bad))
    return out


# ---------------------------------------------------------------------------
# KL divergences (closed form, mean-field Dir-NIG)


def kl_dirichlet(q_conc, p_conc):
    qs = ad.vsum(q_conc)
    ps = ad.vsum(p_conc)
    return (
        ad.lgamma(qs)
        - ad.lgamma(ps)
        - ad.vsum(ad.lgamma(q_conc))
        + ad.vsum(ad.lgamma(p_conc))
        + ad.vsum((q_conc - p_conc) * (ad.digamma(q_conc) - ad.digamma(qs)))
    )


def kl_inverse_gamma(a_q, b_q, a_p, b_p):
    return (
        (a_q - a_p) * ad.digamma(a_q)
        - ad.lgamma(a_q)
        + ad.lgamma(a_p)
        + a_p * (ad.log(b_q) - ad.log(b_p))
        + a_q * (b_p - b_q) / b_q
    )


def kl_nig(q, p):
    """KL between NIG(m,kappa,alpha,beta) tuples q and p (componentwise sum).

    Decomposes as the inverse-gamma KL plus the expected conditional normal
    KL: 0.5*(kappa_p/kappa_q - 1 + ln(kappa_q/kappa_p))
    + (kappa_p/2)*(m_q - m_p)^2 * alpha_q/beta_q.
    """
    m_q, k_q, a_q, b_q = q
    m_p, k_p, a_p, b_p = p
    ig = kl_inverse_gamma(a_q, b_q, a_p, b_p)
    normal = 0.5 * (k_p / k_q - 1.0 + ad.log(k_q) - ad.log(k_p)) + 0.5 * k_p * ad.power(m_q - m_p, 2.0) * a_q / b_q
    return ad.vsum(ig + normal)


def kl_relation(q: RelationPosterior, p: RelationPosterior):
    return kl_dirichlet(q.conc, p.conc) + kl_nig(
        (q.m, q.kappa, q.alpha, q.beta), (p.m, p.kappa, p.alpha, p.beta)
    )


def total_kl(q: MarkerPosterior, p: MarkerPosterior):
    """Full mean-field KL(q || p): both relations, Dirichlet plus all NIGs."""
    return kl_relation(q.diff, p.diff) + kl_relation(q.same, p.same)


# ---------------------------------------------------------------------------
# unconstrained reparameterization (for gradient training)


def posterior_to_raw(posterior: MarkerPosterior, prefix: str = "markers") -> dict:
    """Map a constrained posterior to unconstrained raw arrays (bijective)."""
    raw = {}
    for tag, rel in (("diff", posterior.diff), ("same", posterior.same)):
        raw[f"{prefix}.{tag}.conc"] = ad.softplus_inverse(ad.value_of(rel.conc))
        raw[f"{prefix}.{tag}.m"] = np.array(ad.value_of(rel.m), dtype=np.float64, copy=True)
        raw[f"{prefix}.{tag}.kappa"] = ad.softplus_inverse(ad.value_of(rel.kappa))
        raw[f"{prefix}.{tag}.alpha"] = ad.softplus_inverse(ad.value_of(rel.alpha) - SHAPE_FLOOR)
        raw[f"{prefix}.{tag}.beta"] = ad.softplus_inverse(ad.value_of(rel.beta))
    return raw


def raw_to_posterior(raw: dict, prefix: str = "markers") -> MarkerPosterior:
    """Constrain raw parameters; works on numpy arrays and tape Vars alike."""

    def rel(tag: str) -> RelationPosterior:
        return RelationPosterior(
            conc=ad.softplus(raw[f"{prefix}.{tag}.conc"]),
            m=raw[f"{prefix}.{tag}.m"],
            kappa=ad.softplus(raw[f"{prefix}.{tag}.kappa"]),
            alpha=SHAPE_FLOOR + ad.softplus(raw[f"{prefix}.{tag}.alpha"]),
            beta=ad.softplus(raw[f"{prefix}.{tag}.beta"]),
        )

    return MarkerPosterior(diff=rel("diff"), same=rel("same"))


def clamp_raw_params(raw: dict, prefix: str = "markers") -> dict:
    """Project raw marker parameters into the training box (in place).

    The box is wide enough to be inactive during normal training; it exists
    so degenerate batches cannot drive moments outside the fixed-point
    payload range.
    """
    lo = float(ad.softplus_inverse(np.array(POSITIVE_BOX[0])))
    hi = float(ad.softplus_inverse(np.array(POSITIVE_BOX[1])))
    for key, value in raw.items():
        if not key.startswith(f"{prefix}."):
            continue
        if key.endswith(".m"):
            np.clip(value, *LOCATION_BOX, out=value)
        elif key.split(".")[-1] in ("conc", "kappa", "alpha", "beta"):
            np.clip(value, lo, hi, out=value)
    return raw


def init_relation_from_distances(distances: np.ndarray, n_components: int) -> RelationPosterior:
    """Spread components at interior quantiles of observed distances.

    Quantile levels are (c+1)/(K+1), i.e. {25%, 50%, 75%} at K=3.  kappa=1,
    shape=2 and beta chosen so the predictive scale matches the batch
    standard deviation.
    """
    distances = np.asarray(distances, dtype=np.float64)
    k = n_components
    levels = (np.arange(1, k + 1)) / (k + 1.0)
    centers = np.quantile(distances, levels) if distances.size else np.linspace(0.5, 1.5, k)
    std = float(np.std(distances)) if distances.size > 1 else 1.0
    std = max(std, 0.05)
    # predictive scale^2 = beta*(kappa+1)/(alpha*kappa) = beta at kappa=1, alpha=2
    return RelationPosterior(
        conc=np.ones(k),
        m=np.asarray(centers, dtype=np.float64),
        kappa=np.ones(k),
        alpha=np.full(k, 2.0),
        beta=np.full(k, std * std),
    )


# ---------------------------------------------------------------------------
# sufficient-statistics payload (the wire format)


def posterior_to_vector(posterior: MarkerPosterior) -> np.ndarray:
    """Flatten to the documented order:
    [rel0: conc_1..conc_K, (m, kappa, alpha, beta) x K; rel1: same].
    """
    parts = []
    for rel in (posterior.diff, posterior.same):
        parts.append(ad.value_of(rel.conc))
        parts.append(
            np.stack(
                [ad.value_of(rel.m), ad.value_of(rel.kappa), ad.value_of(rel.alpha), ad.value_of(rel.beta)],
                axis=1,
            ).reshape(-1)
        )
    return np.concatenate(parts)


def vector_to_posterior(vector: np.ndarray, n_components: int) -> MarkerPosterior:
    vector = np.asarray(vector, dtype=np.float64)
    k = n_components
    if vector.shape != (scalars_per_marker(k),):
        raise ValueError(f"expected {scalars_per_marker(k)} scalars for K={k}, got shape {vector.shape}")

    def rel(offset: int) -> RelationPosterior:
        conc = vector[offset : offset + k]
        comp = vector[offset + k : offset + 5 * k].reshape(k, 4)
        return RelationPosterior(
            conc=conc.copy(), m=comp[:, 0].copy(), kappa=comp[:, 1].copy(), alpha=comp[:, 2].copy(), beta=comp[:, 3].copy()
        )

    return MarkerPosterior(diff=rel(0), same=rel(5 * k))


@dataclass
class Payload:
    """One client upload: 10K scalars plus a 16-byte header.

    ``vector`` is float64 for plaintext content and uint64 words when the
    masked flag is set.  ``flags`` uses the FLAG_* bits; the low byte of the
    on-wire version field is the format version.
    """

    vector: np.ndarray
    n_samples: int
    n_components: int
    flags: int = 0

    @property
    def masked(self) -> bool:
        return bool(self.flags & FLAG_MASKED)

    @property
    def dp_noised(self) -> bool:
        return bool(self.flags & FLAG_DP_NOISED)

    @property
    def n_scalars(self) -> int:
        return scalars_per_marker(self.n_components)

    @property
    def n_bytes(self) -> int:
        return HEADER_BYTES + 8 * self.n_scalars

    def to_bytes(self) -> bytes:
        if self.vector.shape != (self.n_scalars,):
            raise ValueError("payload vector length does not match K")
        header = struct.pack(
            HEADER_FORMAT, PAYLOAD_MAGIC, PAYLOAD_VERSION | self.flags, self.n_components, self.n_samples
        )
        body = self.vector.astype("<u8" if self.masked else "<f8").tobytes()
        return header + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Payload":
        magic, version_flags, k, n_samples = struct.unpack(HEADER_FORMAT, blob[:HEADER_BYTES])
        if magic != PAYLOAD_MAGIC:
            raise ValueError(f"bad payload magic {magic!r}")
        if version_flags & 0xFF != PAYLOAD_VERSION:
            raise ValueError(f"unsupported payload version {version_flags & 0xFF}")
        flags = version_flags & ~0xFF
        dtype = "<u8" if flags & FLAG_MASKED else "<f8"
        vector = np.frombuffer(blob[HEADER_BYTES:], dtype=dtype).copy()
        if vector.shape != (scalars_per_marker(k),):
            raise ValueError("payload body length inconsistent with header K")
        return cls(vector=vector, n_samples=n_samples, n_components=k, flags=flags)


def to_sufficient_stats(posterior: MarkerPosterior, n_samples: int) -> Payload:
    posterior.validate()
    return Payload(
        vector=posterior_to_vector(posterior), n_samples=int(n_samples), n_components=posterior.n_components
    )


def from_sufficient_stats(payload: Payload) -> MarkerPosterior:
    if payload.masked:
        raise ValueError("cannot decode a masked payload into a posterior")
    return vector_to_posterior(payload.vector, payload.n_components)
