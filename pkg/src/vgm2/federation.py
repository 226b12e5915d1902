"""Round-based federation runtime: label-shard partitioning, the client
local training loop, server aggregation with optional DP noise and secure
aggregation, the two baselines (local-only, prototype sharing), per-round
evaluation and communication accounting, and run persistence.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from . import datasets, geometry, losses
from . import markers as mk
from . import metrics, privacy, server

METHODS = ("vgm2", "local", "prototype")

# secure-agg uploads carry (n_k / WEIGHT_SCALE) * coords; the server divides
# the masked sum by sum(n_k) / WEIGHT_SCALE, so the scale cancels.  Keeping
# the scaled weights near 1 leaves headroom in the fixed-point range.
WEIGHT_SCALE = 256.0

# stream tags for per-(seed, client, round) reproducible RNG; fixed integers
# so seeding is stable across processes
(
    _TAG_PAIRS,
    _TAG_NEG,
    _TAG_INIT,
    _TAG_SAMPLING,
    _TAG_SPLIT,
    _TAG_DP,
    _TAG_EVAL,
    _TAG_ATTACK,
    _TAG_DATA,
    _TAG_PARTITION,
) = range(10)


class ConfigError(ValueError):
    pass


class RuntimeFailure(RuntimeError):
    """Numerical failure during a run; carries the failing round."""

    def __init__(self, round_index: int, cause: Exception) -> None:
        self.round_index = round_index
        super().__init__(f"round {round_index}: {cause}")


@dataclass
class RunConfig:
    method: str = "vgm2"
    dataset: str = "blobs"
    # synthetic blob generator
    blob_classes: int = 6
    blob_modes_per_class: int = 2
    blob_samples_per_class: int = 100
    blob_dim: int = 12
    blob_center_spread: float = 6.0
    blob_mode_spread: float = 3.0
    blob_noise: float = 1.0
    blob_anchor_regions: int = 0
    # file-backed datasets
    csv_path: str = ""
    csv_label_column: str = "label"
    idx_images: str = ""
    idx_labels: str = ""
    # federation
    n_clients: int = 10
    shards_per_client: int = 2
    rounds: int = 30
    clients_per_round: int = 2
    local_epochs: int = 4
    steps_per_epoch: int = 10
    test_fraction: float = 0.2
    # markers
    components: int = 3
    pair_budget: int = 150
    balance_ratio: float = 0.5
    learn_relation_priors: bool = False
    marker_refresh: str = "every"  # "every" | "first": adopt the broadcast
    # prior at every participation (protocol default) or only on first contact
    # geometry
    n_neighbors: int = 15
    min_dist: float = 0.1
    neg_sample_rate: int = 5
    embed_dim: int = 8
    hidden_dims: tuple = (64, 32)
    graph_refresh_epochs: int = 4
    # optimization
    lr: float = 5e-3
    gamma_sim: float = 1.0
    eta_cal: float = 0.5
    lambda0: float = 0.1
    lambda_schedule: str = "cosine"
    calibration_bins: int = 15
    # server
    aggregation_mode: str = "moment-match"
    secure_agg: bool = True
    # privacy
    dp_sigma: float = 0.0
    dp_clip: float = 10.0
    dp_delta: float = 1e-5
    # prototype baseline
    beta_proto: float = 0.1
    # bookkeeping
    seeds: tuple = (0, 1, 2)
    eval_pair_cap: int = 2000
    attack_pair_cap: int = 200

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.clients_per_round > self.n_clients:
            raise ConfigError("clients_per_round cannot exceed n_clients")
        positive = (
            "n_clients shards_per_client rounds clients_per_round local_epochs steps_per_epoch "
            "components pair_budget n_neighbors embed_dim lr"
        ).split()
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.aggregation_mode not in server.AGGREGATION_MODES:
            raise ConfigError(f"aggregation_mode must be one of {server.AGGREGATION_MODES}")
        if self.lambda_schedule not in ("constant", "cosine"):
            raise ConfigError("lambda_schedule must be 'constant' or 'cosine'")
        if self.marker_refresh not in ("every", "first"):
            raise ConfigError("marker_refresh must be 'every' or 'first'")
        return self

    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(
            gamma=self.gamma_sim,
            eta=self.eta_cal,
            lambda0=self.lambda0 if self.method == "vgm2" else 0.0,
            schedule=self.lambda_schedule,
            horizon=max(self.rounds, 1),
        )

    def dp_config(self) -> privacy.DPConfig:
        return privacy.DPConfig(
            noise_multiplier=self.dp_sigma,
            clip_norm=self.dp_clip,
            delta=self.dp_delta,
            sampling_rate=self.clients_per_round / self.n_clients,
        )


_BOOL_STRINGS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_value(raw: str, annotation, key: str):
    raw = raw.strip()
    if annotation is bool:
        if raw.lower() not in _BOOL_STRINGS:
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return _BOOL_STRINGS[raw.lower()]
    if annotation is int:
        return int(raw)
    if annotation is float:
        return float(raw)
    if annotation is tuple:
        if not raw:
            return ()
        return tuple(int(part.strip()) for part in raw.split(","))
    return raw


def load_config(path) -> RunConfig:
    """Parse the documented ``key = value`` config format."""
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    defaults = RunConfig()
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        annotation = type(getattr(defaults, key))
        try:
            values[key] = _parse_value(raw, annotation, key)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    return dataclasses.replace(defaults, **values).validate()


def dump_config(cfg: RunConfig, path, extra: dict | None = None) -> None:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    for key, value in (extra or {}).items():
        lines.append(f"# {key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# data partitioning


@dataclass
class ShardPartition:
    client_indices: list  # per client: np.ndarray of sample indices
    client_shards: list  # per client: list of (classes_in_shard, index_array)

    def classes_of(self, cid: int) -> np.ndarray:
        return np.unique(np.concatenate([np.atleast_1d(c) for c, _ in self.client_shards[cid]]))


def partition_shards(labels: np.ndarray, n_clients: int, shards_per_client: int, rng: np.random.Generator) -> ShardPartition:
    """Sort by label, cut into n_clients * shards_per_client near-equal
    shards, deal shards_per_client to each client without replacement."""
    labels = np.asarray(labels)
    n = len(labels)
    n_shards = n_clients * shards_per_client
    if n < n_shards:
        raise ConfigError(f"need at least {n_shards} samples for {n_clients} clients x {shards_per_client} shards, got {n}")
    order = np.argsort(labels, kind="stable")
    bounds = np.linspace(0, n, n_shards + 1).astype(int)
    shards = [order[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    deal = rng.permutation(n_shards)
    client_indices, client_shards = [], []
    for cid in range(n_clients):
        mine = deal[cid * shards_per_client : (cid + 1) * shards_per_client]
        parts = [(np.unique(labels[shards[s]]), shards[s]) for s in mine]
        client_shards.append(parts)
        client_indices.append(np.concatenate([idx for _, idx in parts]))
    return ShardPartition(client_indices=client_indices, client_shards=client_shards)


# ---------------------------------------------------------------------------
# client state


@dataclass
class ClientState:
    cid: int
    x: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    feat_mean: np.ndarray | None = None
    feat_scale: np.ndarray | None = None
    params: dict = field(default_factory=dict)
    adam: ad.AdamState | None = None
    graph: geometry.NeighborGraph | None = None
    graph_age: int = 0
    markers_ready: bool = False
    pi1_prior: float = 0.5
    trained_pairs: set = field(default_factory=set)
    rounds_seen: int = 0

    def fit_standardizer(self) -> None:
        """Client-local feature standardization from the train split (keeps
        tanh layers out of saturation regardless of raw feature scale)."""
        x_tr = self.x[self.train_idx]
        self.feat_mean = x_tr.mean(axis=0)
        self.feat_scale = np.maximum(x_tr.std(axis=0), 1e-6)

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.feat_mean) / self.feat_scale

    @property
    def x_train(self) -> np.ndarray:
        return self.standardize(self.x[self.train_idx])

    @property
    def y_train(self) -> np.ndarray:
        return self.y[self.train_idx]

    @property
    def n_train(self) -> int:
        return len(self.train_idx)


def load_dataset(cfg: RunConfig, rng: np.random.Generator):
    if cfg.dataset == "blobs":
        return datasets.make_blobs(
            n_per_class=cfg.blob_samples_per_class,
            n_classes=cfg.blob_classes,
            modes_per_class=cfg.blob_modes_per_class,
            dim=cfg.blob_dim,
            center_spread=cfg.blob_center_spread,
            mode_spread=cfg.blob_mode_spread,
            noise=cfg.blob_noise,
            anchor_regions=cfg.blob_anchor_regions,
            rng=rng,
        )
    if cfg.dataset == "csv":
        return datasets.load_csv(cfg.csv_path, cfg.csv_label_column)
    if cfg.dataset == "idx":
        return datasets.load_idx(cfg.idx_images, cfg.idx_labels)
    raise ConfigError(f"unknown dataset {cfg.dataset!r}")


# ---------------------------------------------------------------------------
# the simulation


class Simulation:
    """One seeded run of one method over the configured federation."""

    def __init__(self, cfg: RunConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = int(seed)
        self.weights = cfg.loss_weights()
        self.dp_cfg = cfg.dp_config()
        data_rng = self._rng(_TAG_DATA, 0, 0)
        self.x, self.y = load_dataset(cfg, data_rng)
        self.n_classes = int(len(np.unique(self.y)))
        self.curve_a, self.curve_b = geometry.fit_curve_params(cfg.min_dist)
        self.partition = partition_shards(
            self.y, cfg.n_clients, cfg.shards_per_client, self._rng(_TAG_PARTITION, 0, 0)
        )
        self.clients = [self._build_client(cid) for cid in range(cfg.n_clients)]
        self.prior = server.default_prior(cfg.components)
        self.prototypes = np.full((self.n_classes, cfg.embed_dim), np.nan)
        self.records: list[dict] = []
        self.released: dict[int, np.ndarray] = {}  # latest plaintext stats per client
        self.release_rounds = 0
        self.repair_log: list[str] = []

    # -- rng plumbing ------------------------------------------------------

    def _rng(self, tag: int, cid: int, round_t: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(entropy=(self.seed, tag, cid, round_t)))

    # -- setup -------------------------------------------------------------

    def _build_client(self, cid: int) -> ClientState:
        idx = self.partition.client_indices[cid]
        split_rng = self._rng(_TAG_SPLIT, cid, 0)
        train_parts, test_parts = [], []
        for _, shard_idx in self.partition.client_shards[cid]:
            shard_idx = shard_idx[split_rng.permutation(len(shard_idx))]
            n_test = max(1, int(round(self.cfg.test_fraction * len(shard_idx)))) if len(shard_idx) > 1 else 0
            test_parts.append(shard_idx[:n_test])
            train_parts.append(shard_idx[n_test:])
        train_idx = np.concatenate(train_parts)
        test_idx = np.concatenate(test_parts) if test_parts else np.empty(0, dtype=int)
        client = ClientState(cid=cid, x=self.x, y=self.y, train_idx=train_idx, test_idx=test_idx)
        client.fit_standardizer()
        init_rng = self._rng(_TAG_INIT, cid, 0)
        dims = (self.x.shape[1], *self.cfg.hidden_dims, self.cfg.embed_dim)
        # marker raw params are created on first training contact, once
        # observed distances exist to place the components
        client.params = geometry.init_mlp_params(init_rng, dims)
        client.adam = ad.AdamState.for_params(client.params)
        return client

    # -- marker helpers ----------------------------------------------------

    def _init_markers(self, client: ClientState, batch: geometry.PairBatch, s_values: np.ndarray) -> None:
        """First-contact marker initialization.

        Once the broadcast prior has absorbed at least one aggregation (and
        prior influence is enabled), a newly participating client adopts it
        directly; otherwise components are spread at quantiles of the
        client's first observed distances.  With lambda0 = 0 the prior is
        never consulted, keeping local-only runs fully isolated.
        """
        prior_post = self.prior.posterior
        use_prior = self.weights.lambda0 > 0 and self.release_rounds >= 1
        if use_prior:
            posterior = prior_post.copy()
        else:
            same_s = s_values[batch.u == 1.0]
            diff_s = s_values[batch.u == 0.0]
            same_rel = (
                mk.init_relation_from_distances(same_s, self.cfg.components) if same_s.size else prior_post.same.copy()
            )
            diff_rel = (
                mk.init_relation_from_distances(diff_s, self.cfg.components) if diff_s.size else prior_post.diff.copy()
            )
            posterior = mk.MarkerPosterior(diff=diff_rel, same=same_rel)
        raw = mk.posterior_to_raw(posterior)
        if self.cfg.learn_relation_priors:
            raw["markers.logit_pi1"] = np.array(0.0)
        client.params.update(raw)
        client.adam = ad.AdamState.for_params(client.params)
        client.markers_ready = True

    def client_posterior(self, client: ClientState) -> mk.MarkerPosterior:
        if not client.markers_ready:
            # never trained: score under the current broadcast prior
            return self.prior.posterior.copy()
        raw = {k: v for k, v in client.params.items() if k.startswith("markers.")}
        return mk.raw_to_posterior(raw)

    def client_priors(self, client: ClientState) -> mk.RelationPriors:
        return mk.RelationPriors(1.0 - client.pi1_prior, client.pi1_prior)

    # -- local training ----------------------------------------------------

    def _ensure_graph(self, client: ClientState) -> None:
        refresh = self.cfg.graph_refresh_epochs
        if client.graph is None or client.graph_age >= refresh:
            client.graph = geometry.build_knn_graph(client.x_train, self.cfg.n_neighbors)
            client.graph_age = 0
        client.graph_age += 1

    def _adopt_prior_markers(self, client: ClientState) -> None:
        """Replace the client's marker state with the broadcast prior (the
        protocol's per-round initialization); local epochs personalize it."""
        raw = mk.posterior_to_raw(self.prior.posterior.copy())
        client.params.update(raw)
        for key, value in raw.items():
            client.adam.m[key] = np.zeros_like(value)
            client.adam.v[key] = np.zeros_like(value)

    def train_client(self, client: ClientState, round_t: int) -> dict:
        cfg = self.cfg
        if (
            cfg.method != "prototype"
            and client.markers_ready
            and cfg.marker_refresh == "every"
            and self.weights.lambda0 > 0
            and self.release_rounds >= 1
        ):
            self._adopt_prior_markers(client)
        lam = 0.0 if round_t == 0 else self.weights.lambda_at(round_t)
        prior_post = self.prior.posterior
        loss_totals = {"umap": 0.0, "sim": 0.0, "cal": 0.0, "kl": 0.0, "total": 0.0}
        n_steps = 0
        for epoch in range(cfg.local_epochs):
            self._ensure_graph(client)
            pair_rng = self._rng(_TAG_PAIRS, client.cid, round_t * cfg.local_epochs + epoch)
            neg_rng = self._rng(_TAG_NEG, client.cid, round_t * cfg.local_epochs + epoch)
            for _ in range(cfg.steps_per_epoch):
                budget = min(cfg.pair_budget, client.n_train * (client.n_train - 1) // 2)
                batch = geometry.sample_pairs(client.y_train, budget, cfg.balance_ratio, pair_rng)
                neg = geometry.sample_negative_pairs(client.graph, cfg.neg_sample_rate, neg_rng)
                step_losses = self._train_step(client, batch, neg, lam, round_t)
                for key in loss_totals:
                    loss_totals[key] += step_losses[key]
                n_steps += 1
                if cfg.method != "prototype":
                    for i, j in zip(batch.i.tolist(), batch.j.tolist()):
                        client.trained_pairs.add((i, j))
        client.rounds_seen += 1
        return {key: value / max(n_steps, 1) for key, value in loss_totals.items()}

    def _train_step(self, client: ClientState, batch, neg, lam: float, round_t: int) -> dict:
        cfg = self.cfg
        tape = ad.Tape()
        if cfg.method == "prototype":
            pvars = {k: tape.variable(v) for k, v in client.params.items()}
            z = geometry.mlp_forward(pvars, client.x_train)
            umap_term = geometry.umap_loss(client.graph, z, self.curve_a, self.curve_b, neg_pairs=neg)
            pull = self._prototype_pull(client, z)
            total = umap_term + cfg.beta_proto * pull
            grads = tape.backward(total)
            gmap = {k: tape.grad(grads, v) for k, v in pvars.items()}
            client.params, client.adam = ad.adam_step(client.params, gmap, client.adam, lr=cfg.lr)
            return {
                "umap": float(ad.value_of(umap_term)),
                "sim": 0.0,
                "cal": float(ad.value_of(pull)),
                "kl": 0.0,
                "total": float(ad.value_of(total)),
            }

        if not client.markers_ready:
            z0 = geometry.mlp_forward(client.params, client.x_train)
            s0 = np.asarray(ad.value_of(geometry.pair_distances(z0, batch)))
            self._init_markers(client, batch, s0)
        if not cfg.learn_relation_priors:
            client.pi1_prior = mk.RelationPriors.from_counts(batch.n_same, len(batch) - batch.n_same).pi1

        pvars = {k: tape.variable(v) for k, v in client.params.items()}
        z = geometry.mlp_forward(pvars, client.x_train)
        umap_term = geometry.umap_loss(client.graph, z, self.curve_a, self.curve_b, neg_pairs=neg)
        s = geometry.pair_distances(z, batch)
        posterior = mk.raw_to_posterior({k: v for k, v in pvars.items() if k.startswith("markers.")})

        if cfg.learn_relation_priors:
            logit = pvars["markers.logit_pi1"]
            log_pi1 = -ad.softplus(-logit)
            log_pi0 = -ad.softplus(logit)
            client.pi1_prior = float(1.0 / (1.0 + np.exp(-ad.value_of(logit))))
            l0 = log_pi0 + mk.mixture_log_predictive(s, posterior.diff)
            l1 = log_pi1 + mk.mixture_log_predictive(s, posterior.same)
        else:
            l0, l1 = mk.relation_log_scores(s, posterior, self.client_priors(client))
        sim_term = losses.sim_loss_from_scores(l0, l1, batch.u)
        confidences = ad.exp(l1 - ad.logaddexp(l0, l1))
        cal_term = losses.soft_ece(confidences, batch.u, n_bins=cfg.calibration_bins)
        # with prior influence disabled the client must not touch the shared
        # prior at all (keeps local-only runs strictly isolated)
        kl_term = mk.total_kl(posterior, self.prior.posterior) if self.weights.lambda0 > 0 else 0.0
        weights_now = losses.LossWeights(
            gamma=cfg.gamma_sim, eta=cfg.eta_cal, lambda0=lam, schedule="constant", horizon=1
        )
        total = losses.total_loss(umap_term, sim_term, cal_term, kl_term, weights_now, round_t)
        grads = tape.backward(total)
        gmap = {k: tape.grad(grads, v) for k, v in pvars.items()}
        client.params, client.adam = ad.adam_step(client.params, gmap, client.adam, lr=cfg.lr)
        mk.clamp_raw_params(client.params)
        return {
            "umap": float(ad.value_of(umap_term)),
            "sim": float(ad.value_of(sim_term)),
            "cal": float(ad.value_of(cal_term)),
            "kl": float(ad.value_of(kl_term)),
            "total": float(ad.value_of(total)),
        }

    def _prototype_pull(self, client: ClientState, z):
        """Sum of squared distances from embeddings to their class prototype."""
        available = ~np.isnan(self.prototypes[:, 0])
        mask = available[client.y_train]
        if not np.any(mask):
            return ad.vsum(z * 0.0)
        idx = np.flatnonzero(mask)
        targets = self.prototypes[client.y_train[idx]]
        zi = ad.gather_rows(z, idx)
        return ad.vsum(ad.power(zi - targets, 2.0))

    # -- evaluation --------------------------------------------------------

    def evaluate_client(self, client: ClientState) -> dict:
        cfg = self.cfg
        counters: dict = {}
        z_tr = np.asarray(geometry.mlp_forward(client.params, client.x_train))
        x_test = client.standardize(client.x[client.test_idx])
        y_test = client.y[client.test_idx]
        if len(y_test) == 0:
            return {"f1": 0.0, "ece": 0.0, "skipped": "empty test split"}
        z_te = np.asarray(geometry.mlp_forward(client.params, x_test))
        support_classes = np.unique(client.y_train)

        if cfg.method == "prototype":
            return self._evaluate_prototype(client, z_te, y_test)

        posterior = self.client_posterior(client)
        priors = self.client_priors(client)
        dmat = cdist(z_te, z_tr)
        scores = np.full((len(y_test), len(support_classes)), -np.inf)
        for col, cls in enumerate(support_classes):
            cols = client.y_train == cls
            if not np.any(cols):
                continue
            p1 = mk.pi1(dmat[:, cols].reshape(-1), posterior, priors, counters=counters)
            scores[:, col] = p1.reshape(len(y_test), -1).mean(axis=1)
        predictions = support_classes[np.argmax(scores, axis=1)]
        f1 = metrics.macro_f1(y_test, predictions, classes=np.unique(y_test))

        pair_i, pair_j = np.triu_indices(len(y_test), k=1)
        if len(pair_i) > cfg.eval_pair_cap:
            take = self._rng(_TAG_EVAL, client.cid, 0).choice(len(pair_i), cfg.eval_pair_cap, replace=False)
            pair_i, pair_j = pair_i[take], pair_j[take]
        if len(pair_i):
            s_pairs = np.linalg.norm(z_te[pair_i] - z_te[pair_j], axis=1)
            conf = mk.pi1(s_pairs, posterior, priors, counters=counters)
            u_pairs = (y_test[pair_i] == y_test[pair_j]).astype(float)
            ece = metrics.hard_ece(conf, u_pairs, n_bins=cfg.calibration_bins)
        else:
            conf, u_pairs, ece = np.empty(0), np.empty(0), 0.0
        return {
            "f1": float(f1),
            "ece": float(ece),
            "underflow": counters.get("pi1_underflow", 0),
            "confidences": conf,
            "pair_labels": u_pairs,
        }

    def _evaluate_prototype(self, client: ClientState, z_te: np.ndarray, y_test: np.ndarray) -> dict:
        available = np.flatnonzero(~np.isnan(self.prototypes[:, 0]))
        if len(available) == 0:
            return {"f1": 0.0, "ece": 0.0, "underflow": 0, "confidences": np.empty(0), "pair_labels": np.empty(0)}
        d2 = cdist(z_te, self.prototypes[available]) ** 2
        soft = np.exp(-d2 + d2.min(axis=1, keepdims=True))
        soft /= soft.sum(axis=1, keepdims=True)
        pick = np.argmin(d2, axis=1)
        predictions = available[pick]
        f1 = metrics.macro_f1(y_test, predictions, classes=np.unique(y_test))
        conf = soft[np.arange(len(y_test)), pick]
        correct = (predictions == y_test).astype(float)
        ece = metrics.hard_ece(conf, correct, n_bins=self.cfg.calibration_bins)
        return {"f1": float(f1), "ece": float(ece), "underflow": 0, "confidences": conf, "pair_labels": correct}

    # -- round loop --------------------------------------------------------

    def payload_bytes(self) -> int:
        if self.cfg.method == "prototype":
            return self.n_classes * self.cfg.embed_dim * 8 + mk.HEADER_BYTES
        return mk.scalars_per_marker(self.cfg.components) * 8 + mk.HEADER_BYTES

    def run_round(self, round_t: int) -> dict:
        cfg = self.cfg
        started = time.perf_counter()
        sampler = self._rng(_TAG_SAMPLING, 0, round_t)
        cohort = sorted(sampler.choice(cfg.n_clients, size=cfg.clients_per_round, replace=False).tolist())
        lam = 0.0 if round_t == 0 else self.weights.lambda_at(round_t)
        record: dict = {"round": round_t, "clients": [], "lambda": lam, "per_client": {}, "aggregate": {}}

        uploads = []
        upload_weights = []
        masked_uploads = []
        proto_uploads = []
        for cid in cohort:
            client = self.clients[cid]
            if client.n_train < cfg.n_neighbors + 1:
                record["per_client"][str(cid)] = {"skipped": f"only {client.n_train} training samples"}
                continue
            record["clients"].append(cid)
            loss_avgs = self.train_client(client, round_t)
            evaluation = self.evaluate_client(client)
            entry = {
                "losses": loss_avgs,
                "f1": evaluation["f1"],
                "ece": evaluation["ece"],
                "underflow": evaluation.get("underflow", 0),
                "single_class": bool(len(np.unique(client.y_train)) == 1),
                "bytes_up": 0,
                "bytes_down": self.payload_bytes() if cfg.method != "local" else 0,
                "repairs": 0,
            }

            if cfg.method == "vgm2":
                posterior = self.client_posterior(client)
                payload = mk.to_sufficient_stats(posterior, n_samples=client.n_train)
                repairs: list[str] = []
                if self.dp_cfg.enabled:
                    dp_rng = self._rng(_TAG_DP, cid, round_t)
                    payload = privacy.dp_noise(payload, self.dp_cfg, dp_rng, repairs)
                entry["bytes_up"] = payload.n_bytes
                entry["repairs"] = len(repairs)
                self.repair_log.extend(f"round {round_t} client {cid}: {r}" for r in repairs)
                stats_posterior = mk.from_sufficient_stats(payload)
                self.released[cid] = payload.vector.copy()
                if cfg.secure_agg:
                    coords = server.aggregation_vector(stats_posterior, cfg.aggregation_mode)
                    scaled = coords * (client.n_train / WEIGHT_SCALE)
                    limit = privacy.FIXED_POINT_LIMIT - 1
                    clipped = np.clip(scaled, -limit, limit)
                    if not np.array_equal(clipped, scaled):
                        entry["repairs"] += 1
                        self.repair_log.append(f"round {round_t} client {cid}: upload clipped to fixed-point range")
                    weighted = mk.Payload(
                        vector=clipped,
                        n_samples=client.n_train,
                        n_components=cfg.components,
                        flags=payload.flags
                        | (mk.FLAG_MOMENTS if cfg.aggregation_mode == "moment-match" else mk.FLAG_NATURALS),
                    )
                    masked_uploads.append(privacy.mask_payload(weighted, cid, cohort, round_seed=round_t))
                    upload_weights.append(client.n_train)
                else:
                    uploads.append(payload)
            elif cfg.method == "prototype":
                z_tr = np.asarray(geometry.mlp_forward(client.params, client.x_train))
                proto = np.full((self.n_classes, cfg.embed_dim), np.nan)
                for cls in np.unique(client.y_train):
                    proto[cls] = z_tr[client.y_train == cls].mean(axis=0)
                proto_uploads.append(proto)
                entry["bytes_up"] = self.payload_bytes()
            record["per_client"][str(cid)] = entry

        try:
            self._server_update(record, uploads, masked_uploads, upload_weights, proto_uploads, round_t)
        except (server.AggregationError, mk.MarkerConstraintError) as exc:
            raise RuntimeFailure(round_t, exc) from exc

        record["wall_clock_s"] = time.perf_counter() - started
        self.records.append(record)
        return record

    def _server_update(self, record, uploads, masked_uploads, upload_weights, proto_uploads, round_t: int) -> None:
        cfg = self.cfg
        record["aggregate"] = {"mode": cfg.aggregation_mode, "masked": bool(cfg.secure_agg), "repairs": 0}
        if cfg.method == "local":
            record["aggregate"] = {"mode": "none", "masked": False, "repairs": 0}
            return
        if cfg.method == "prototype":
            if proto_uploads:
                stack = np.stack(proto_uploads)
                present = ~np.isnan(stack[:, :, 0])  # (clients, classes)
                counts = present.sum(axis=0)
                sums = np.where(np.isnan(stack), 0.0, stack).sum(axis=0)
                has_any = counts > 0
                self.prototypes[has_any] = sums[has_any] / counts[has_any, None]
            record["aggregate"] = {"mode": "prototype-average", "masked": False, "repairs": 0}
            return
        if cfg.secure_agg and masked_uploads:
            summed = privacy.unmask_sum(masked_uploads)
            result = server.aggregate_weighted_sum(
                summed,
                float(sum(upload_weights)) / WEIGHT_SCALE,
                cfg.components,
                cfg.aggregation_mode,
                round_index=round_t + 1,
            )
        elif uploads:
            result = server.aggregate(uploads, mode=cfg.aggregation_mode, round_index=round_t + 1)
        else:
            return
        self.prior = result.prior
        self.release_rounds += 1
        record["aggregate"]["repairs"] = len(result.repairs)
        self.repair_log.extend(f"round {round_t} server: {r}" for r in result.repairs)

    # -- full run ----------------------------------------------------------

    def run(self) -> "RunResult":
        for t in range(self.cfg.rounds):
            self.run_round(t)
        final = {}
        for client in self.clients:
            final[client.cid] = self.evaluate_client(client)
        return RunResult(cfg=self.cfg, seed=self.seed, records=self.records, final_eval=final, simulation=self)


# ---------------------------------------------------------------------------
# results, digests, persistence


def _strip_volatile(record: dict) -> dict:
    return {k: v for k, v in record.items() if k != "wall_clock_s"}


def run_digest(records: list[dict]) -> str:
    canon = json.dumps([_strip_volatile(r) for r in records], sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class RunResult:
    cfg: RunConfig
    seed: int
    records: list
    final_eval: dict
    simulation: Simulation

    @property
    def digest(self) -> str:
        return run_digest(self.records)

    def mean_f1(self) -> float:
        return float(np.mean([e["f1"] for e in self.final_eval.values()]))

    def mean_ece(self) -> float:
        return float(np.mean([e["ece"] for e in self.final_eval.values()]))

    def bytes_per_client_round(self) -> float:
        per = [
            entry["bytes_up"]
            for record in self.records
            for entry in record["per_client"].values()
            if "bytes_up" in entry
        ]
        return float(np.mean(per)) if per else 0.0

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump_config(self.cfg, out / "config.txt", extra={"seed": self.seed})
        (out / "seed.txt").write_text(str(self.seed) + "\n")
        with open(out / "records.jsonl", "w") as fh:
            for record in self.records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        (out / "digest.txt").write_text(self.digest + "\n")
        with open(out / "metrics.csv", "w") as fh:
            fh.write("method,dataset,seed,client,f1,ece,bytes_up_per_round\n")
            for cid, ev in sorted(self.final_eval.items()):
                fh.write(
                    f"{self.cfg.method},{self.cfg.dataset},{self.seed},{cid},"
                    f"{ev['f1']:.6f},{ev['ece']:.6f},{self.bytes_per_client_round():.1f}\n"
                )
        conf_arrays = {}
        for cid, ev in self.final_eval.items():
            if "confidences" in ev and len(np.atleast_1d(ev.get("confidences", []))):
                conf_arrays[f"conf_{cid}"] = np.asarray(ev["confidences"])
                conf_arrays[f"labels_{cid}"] = np.asarray(ev["pair_labels"])
        if conf_arrays:
            np.savez(out / "confidences.npz", **conf_arrays)
        state = privacy.accountant_after(self.cfg.dp_config(), self.simulation.release_rounds)
        (out / "accountant.json").write_text(state.to_json() + "\n")
        if self.cfg.method == "vgm2":
            self._save_attack_data(out)
        return out

    def _save_attack_data(self, out: Path) -> None:
        sim = self.simulation
        arrays, meta = {}, []
        agg_vec = mk.posterior_to_vector(sim.prior.posterior)
        for client in sim.clients:
            if client.cid not in sim.released or not client.trained_pairs:
                continue
            rng = sim._rng(_TAG_ATTACK, client.cid, 0)
            z_tr = np.asarray(geometry.mlp_forward(client.params, client.x_train))
            pairs = sorted(client.trained_pairs)
            if len(pairs) > sim.cfg.attack_pair_cap:
                take = rng.choice(len(pairs), sim.cfg.attack_pair_cap, replace=False)
                pairs = [pairs[t] for t in sorted(take)]
            pi = np.array([p[0] for p in pairs])
            pj = np.array([p[1] for p in pairs])
            member_s = np.linalg.norm(z_tr[pi] - z_tr[pj], axis=1)
            y_test = client.y[client.test_idx]
            if len(y_test) < 2:
                continue
            total = len(y_test) * (len(y_test) - 1) // 2
            budget = min(len(member_s), total)
            member_s = member_s[:budget]
            test_batch = geometry.sample_pairs(y_test, budget, sim.cfg.balance_ratio, rng)
            z_te = np.asarray(geometry.mlp_forward(client.params, client.standardize(client.x[client.test_idx])))
            nonmember_s = np.linalg.norm(z_te[test_batch.i] - z_te[test_batch.j], axis=1)
            arrays[f"member_{client.cid}"] = member_s
            arrays[f"nonmember_{client.cid}"] = nonmember_s
            arrays[f"summary_{client.cid}"] = sim.released[client.cid]
            meta.append((client.cid, client.pi1_prior))
        if not meta:
            return
        arrays["aggregate_summary"] = agg_vec
        arrays["meta_cids"] = np.array([m[0] for m in meta])
        arrays["meta_pi1"] = np.array([m[1] for m in meta])
        arrays["k"] = np.array(self.cfg.components)
        arrays["release_rounds"] = np.array(sim.release_rounds)
        np.savez(out / "attack_data.npz", **arrays)


def execute_run(cfg: RunConfig, seed: int, out_dir=None) -> RunResult:
    result = Simulation(cfg, seed).run()
    if out_dir is not None:
        result.save(out_dir)
    return result


def load_attack_records(run_dir) -> tuple[list, int]:
    """Reconstruct the attack dataset inputs persisted by a vgm2 run."""
    path = Path(run_dir) / "attack_data.npz"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; was this a vgm2 run?")
    data = np.load(path)
    k = int(data["k"])
    records = []
    for cid, pi1_prior in zip(data["meta_cids"], data["meta_pi1"]):
        cid = int(cid)
        records.append(
            {
                "member_s": data[f"member_{cid}"],
                "nonmember_s": data[f"nonmember_{cid}"],
                "client_summary": data[f"summary_{cid}"],
                "aggregate_summary": data["aggregate_summary"],
                "k": k,
                "pi1_prior": float(pi1_prior),
            }
        )
    return records, int(data["release_rounds"])


# ---------------------------------------------------------------------------
# accounting


def communication_report(records: list[dict], cfg: RunConfig, n_classes: int | None = None) -> dict:
    """Per-run upload accounting plus the quoted small-payload figure.

    ``paper_figure_bytes`` reproduces the published arithmetic (10K scalars
    per relation at 32-bit width, both relations): 80K bytes, i.e. 240 at
    K=3.  With 64-bit floats the actual payload body is 8 * 10K bytes, which
    lands on the same number.
    """
    if not records:
        raise ConfigError("communication report needs at least one round record")
    k = cfg.components
    scalars = mk.scalars_per_marker(k)
    uploads = [
        entry["bytes_up"]
        for record in records
        for entry in record["per_client"].values()
        if "bytes_up" in entry
    ]
    total = float(np.sum(uploads)) if uploads else 0.0
    mean = float(np.mean(uploads)) if uploads else 0.0
    report = {
        "method": cfg.method,
        "scalars_per_client_round": scalars if cfg.method == "vgm2" else None,
        "bytes_per_client_round_mean": mean,
        "bytes_total": total,
        "paper_figure_bytes": 2 * scalars * 4,
        "payload_body_bytes": scalars * 8,
        "header_bytes": mk.HEADER_BYTES,
    }
    if cfg.method == "prototype" and n_classes is not None:
        report["scalars_per_client_round"] = n_classes * cfg.embed_dim
    return report
