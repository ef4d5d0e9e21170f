"""Round-based federated simulation: FedWCA, its baselines and ablations.

A :class:`Federation` owns the immutable context of one run (method
configuration, client datasets, source model) and advances a
:class:`RoundState` one communication round at a time.  All client work of
a round reads only the state left by the previous server step, so clients
can run in any order or concurrently; every client draws from its own
random stream keyed by ``(seed, client, round)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .aggregation import (
    GlobalCoefficients,
    WeightBundle,
    alpha_weights,
    beta_weights,
    cluster_average,
    combine,
    compose_initial_model,
    expand_weights,
    make_soft_models,
    server_estimate_AB,
    snd,
)
from .clustering import ClusterAssignment, cluster_clients
from .data import ClientDataset
from .errors import ConfigurationError, ProtocolError
from .model import Batch, Model, average
from .optim import LossReport, OptimizerState, accuracy, train_epoch
from .pseudo_label import PseudoDataset, build_pseudo_dataset

METHODS = (
    "source_only",
    "local",
    "fedavg",
    "one_hot",
    "equal",
    "one_equal",
    "one_equal_a",
    "fedwca_l",
    "fedwca",
    "fedwca_revised",
)
CLUSTERED_METHODS = frozenset(METHODS[3:])
FLOAT_BYTES = 4

# purpose tags for per-client random streams
_ADAPT, _SND = 0, 1


@dataclass(frozen=True)
class MethodConfig:
    method: str = "fedwca"
    rounds: int = 20
    local_epochs: int = 5
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_size: int = 64
    lam: float = 0.3
    mu: float = 0.55
    temp_alpha: float = 0.01
    temp_beta: float = 0.05
    temp_snd: float = 0.05
    snd_cap: int = 512
    one_equal_p: float = 0.8
    period: int | None = 5
    seed: int = 0
    cluster_layers: str = "first"
    recluster: bool = False
    weighted_average: bool = False
    prototype_labels: bool = True
    fixed_labels: bool = True
    two_model_labels: bool = True
    use_mixup: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ConfigurationError("rounds and local_epochs must be non-negative")
        if not 0.0 < self.one_equal_p < 1.0:
            raise ConfigurationError("one_equal_p must lie in (0, 1)")
        if self.period is not None and self.period < 1:
            raise ConfigurationError("period U must be >= 1 (or None for never)")
        if min(self.temp_alpha, self.temp_beta, self.temp_snd) <= 0:
            raise ConfigurationError("temperatures must be positive")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigurationError("mu must lie in [0, 1]")
        if self.lr < 0 or self.batch_size < 1 or self.snd_cap < 2:
            raise ConfigurationError("lr >= 0, batch_size >= 1 and snd_cap >= 2 required")
        if self.cluster_layers not in ("first", "all"):
            raise ConfigurationError("cluster_layers must be 'first' or 'all'")

    @property
    def effective_rounds(self) -> int:
        return 0 if self.method == "source_only" else self.rounds


def client_rng(seed: int, client_id: int, round_index: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, client_id, round_index, purpose])


def payload_bytes(payload) -> int:
    """float32 wire size: trainable tensors of a model, or every entry of an array."""
    if isinstance(payload, Model):
        return FLOAT_BYTES * payload.num_parameters(payload.trainable_names())
    return FLOAT_BYTES * int(np.size(payload))


class Channel:
    """Simulated links that count bytes and reject payload kinds the protocol forbids."""

    def __init__(self, num_clients: int, uplink_kinds: frozenset[str]):
        self.uplink_kinds = uplink_kinds
        self.uplink = np.zeros(num_clients, dtype=np.int64)
        self.downlink = np.zeros(num_clients, dtype=np.int64)
        self.log: list[tuple[str, int, str, int]] = []

    def upload(self, client_id: int, kind: str, payload):
        if kind not in self.uplink_kinds:
            raise ProtocolError(f"client payload {kind!r} may not be sent to the server")
        n = payload_bytes(payload)
        self.uplink[client_id] += n
        self.log.append(("up", client_id, kind, n))
        return payload

    def download(self, client_id: int, kind: str, payload):
        n = payload_bytes(payload)
        self.downlink[client_id] += n
        self.log.append(("down", client_id, kind, n))
        return payload


@dataclass
class RoundState:
    """Everything the simulation carries between rounds.

    ``round`` is the index of the next round to run.  Byte counters are
    cumulative; ``last_uplink``/``last_downlink`` hold the last round's traffic.
    """

    round: int
    local_models: list[Model]
    assignment: ClusterAssignment | None = None
    hard: list[Model] | None = None
    soft: list[Model] | None = None
    coeffs: GlobalCoefficients | None = None
    global_model: Model | None = None
    bundles: list[WeightBundle] = field(default_factory=list)
    stored_v: dict[int, np.ndarray] = field(default_factory=dict)
    losses: list[LossReport | None] = field(default_factory=list)
    pseudo: list[PseudoDataset | None] = field(default_factory=list)
    uplink_bytes: np.ndarray | None = None
    downlink_bytes: np.ndarray | None = None
    last_uplink: np.ndarray | None = None
    last_downlink: np.ndarray | None = None


@dataclass
class ClientUpdate:
    model: Model
    loss: LossReport | None
    bundle: WeightBundle | None
    pseudo: PseudoDataset | None
    server_init: bool = False


def client_local_adaptation(
    round_index: int,
    data: Batch,
    f_init: Model,
    f_cluster: Model | None,
    cfg: MethodConfig,
    rng: np.random.Generator,
) -> tuple[Model, LossReport | None, PseudoDataset | None]:
    """Freeze pseudo-labels for the round, then run E epochs of IM + lambda * CE."""
    if len(data) == 0:
        raise ProtocolError("client has no data")
    if cfg.local_epochs == 0:
        return f_init, None, None
    cluster = f_cluster if cfg.two_model_labels else None
    opt = OptimizerState.for_model(f_init, cfg.lr, cfg.momentum, cfg.weight_decay)

    def label(model: Model) -> PseudoDataset:
        return build_pseudo_dataset(
            round_index, model, cluster, data, cfg.mu, rng,
            prototypes=cfg.prototype_labels, use_mixup=cfg.use_mixup,
        )

    pseudo = label(f_init)
    model, report = f_init, None
    for epoch in range(cfg.local_epochs):
        if epoch > 0 and not cfg.fixed_labels:
            pseudo = label(model)
        model, report = train_epoch(
            model, data, pseudo.training_batch(data), cfg.lam, opt, rng, cfg.batch_size
        )
    return model, report, pseudo


def one_equal_weights(num_clusters: int, own: int, p: float) -> np.ndarray:
    if num_clusters == 1:
        return np.ones(1)
    v = np.full(num_clusters, (1.0 - p) / (num_clusters - 1))
    v[own] = p
    return v


def is_weight_round(round_index: int, period: int | None) -> bool:
    """Whether clients compute fresh cluster weights in this round (revised schedule)."""
    if period is None:
        return round_index == 1
    return (round_index - 1) % period == 0


class Federation:
    def __init__(
        self,
        cfg: MethodConfig,
        clients: Sequence[ClientDataset],
        source: Model,
        workers: int = 1,
    ):
        if not source.classifier.frozen:
            raise ProtocolError("the source classifier must be frozen before federation")
        self.cfg = cfg
        self.clients = list(clients)
        self.source = source
        self.workers = workers
        kinds = {"model", "alpha", "beta"}
        if cfg.weighted_average:
            kinds.add("num_samples")
        self.uplink_kinds = frozenset(kinds)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def initial_state(self) -> RoundState:
        k = self.num_clients
        zeros = lambda: np.zeros(k, dtype=np.int64)  # noqa: E731
        return RoundState(
            round=0,
            local_models=[self.source] * k,
            losses=[None] * k,
            uplink_bytes=zeros(),
            downlink_bytes=zeros(),
            last_uplink=zeros(),
            last_downlink=zeros(),
        )

    # ------------------------------------------------------------ clients

    def _map(self, fn: Callable[[int], ClientUpdate]) -> list[ClientUpdate]:
        ids = range(self.num_clients)
        if self.workers <= 1:
            return [fn(k) for k in ids]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, ids))

    def _snd(self, model: Model, data: Batch, rng: np.random.Generator) -> float:
        return snd(model, data, self.cfg.temp_snd, self.cfg.snd_cap, rng)

    def _client_init(self, state: RoundState, k: int) -> tuple[Model, Model | None, WeightBundle | None, bool]:
        """Initial model, cluster model and weights for client ``k`` in a round >= 1."""
        cfg, r = self.cfg, state.round
        data = self.clients[k].train
        method = cfg.method
        if method == "local":
            return state.local_models[k], None, None, False
        if method == "fedavg":
            return state.global_model, None, None, False
        c_k = state.assignment.assignment[k]
        hard = state.hard
        n_clusters = len(hard)
        own = hard[c_k]
        onehot = np.eye(n_clusters)[c_k]
        uniform = np.full(n_clusters, 1.0 / n_clusters)
        if method == "one_hot":
            return own, own, WeightBundle(k, None, None, onehot), True
        if method == "equal":
            return combine(hard, uniform), own, WeightBundle(k, None, None, uniform), True
        if method == "one_equal":
            v = one_equal_weights(n_clusters, c_k, cfg.one_equal_p)
            return combine(hard, v), own, WeightBundle(k, None, None, v), True
        snd_rng = client_rng(cfg.seed, k, r, _SND)
        W = self.source.classifier.weight
        if method == "one_equal_a":
            equal = combine(hard, uniform)
            beta = beta_weights(self._snd(own, data, snd_rng), self._snd(equal, data, snd_rng), cfg.temp_beta)
            v = beta[0] * onehot + beta[1] * uniform
            return combine([own, equal], beta), own, WeightBundle(k, None, beta, v), False
        if method == "fedwca_l":
            alpha = alpha_weights(data, hard, W, cfg.temp_alpha)
            blend = combine(hard, alpha)
            beta = beta_weights(self._snd(own, data, snd_rng), self._snd(blend, data, snd_rng), cfg.temp_beta)
            v = beta[0] * onehot + beta[1] * alpha
            return combine([own, blend], beta), own, WeightBundle(k, alpha, beta, v), False
        # fedwca and fedwca_revised
        if method == "fedwca_revised" and not is_weight_round(r, cfg.period):
            v = state.stored_v[k]
            return combine(hard, v), own, WeightBundle(k, None, None, v), True
        soft = state.soft
        alpha = alpha_weights(data, soft, W, cfg.temp_alpha)
        blend = combine(soft, alpha)
        beta = beta_weights(self._snd(own, data, snd_rng), self._snd(blend, data, snd_rng), cfg.temp_beta)
        v = expand_weights(alpha, beta, state.coeffs, c_k)
        return compose_initial_model(own, soft, alpha, beta), own, WeightBundle(k, alpha, beta, v), False

    def _client_round(self, state: RoundState, k: int) -> ClientUpdate:
        cfg, r = self.cfg, state.round
        data = self.clients[k].train
        if r == 0:
            f_init, f_cluster, bundle, server_init = self.source, None, None, False
        else:
            f_init, f_cluster, bundle, server_init = self._client_init(state, k)
        rng = client_rng(cfg.seed, k, r, _ADAPT)
        model, loss, pseudo = client_local_adaptation(r, data, f_init, f_cluster, cfg, rng)
        return ClientUpdate(model, loss, bundle, pseudo, server_init)

    # ------------------------------------------------------------- server

    def _downlink_models(self, state: RoundState, next_round: int) -> int:
        """Models each client receives at the end of a round."""
        method = self.cfg.method
        if method == "local":
            return 0
        if method in ("fedavg", "one_hot"):
            return 1
        n_clusters = state.assignment.num_clusters
        if method in ("equal", "one_equal", "one_equal_a"):
            return 2
        if method == "fedwca_l":
            return n_clusters
        if method == "fedwca_revised" and not is_weight_round(next_round, self.cfg.period):
            return 2
        return n_clusters + 1

    def run_round(self, state: RoundState) -> RoundState:
        cfg = self.cfg
        if cfg.method == "source_only":
            raise ProtocolError("source_only performs no rounds")
        r = state.round
        updates = self._map(lambda k: self._client_round(state, k))
        channel = Channel(self.num_clients, self.uplink_kinds)
        local_models = [u.model for u in updates]
        new = replace(
            state,
            round=r + 1,
            local_models=local_models,
            losses=[u.loss for u in updates],
            pseudo=[u.pseudo for u in updates],
            bundles=[u.bundle for u in updates if u.bundle is not None],
            stored_v=dict(state.stored_v),
        )
        if cfg.method != "local":
            for k, u in enumerate(updates):
                channel.upload(k, "model", u.model)
                if cfg.weighted_average:
                    channel.upload(k, "num_samples", np.array([len(self.clients[k].train)]))
                b = u.bundle
                if b is not None and not u.server_init and cfg.method in ("fedwca", "fedwca_revised"):
                    channel.upload(k, "alpha", b.alpha)
                    channel.upload(k, "beta", b.beta)
        counts = (
            [len(c.train) for c in self.clients] if cfg.weighted_average else None
        )
        if cfg.method == "fedavg":
            new.global_model = average(local_models, counts)
        elif cfg.method in CLUSTERED_METHODS:
            self._server_clustered(new, r, updates, counts)
        if cfg.method != "local":
            # every model on the wire has the source model's trainable layout
            n_models = self._downlink_models(new, r + 1)
            for k in range(self.num_clients):
                for _ in range(n_models):
                    channel.download(k, "model", self.source)
        new.last_uplink = channel.uplink
        new.last_downlink = channel.downlink
        new.uplink_bytes = state.uplink_bytes + channel.uplink
        new.downlink_bytes = state.downlink_bytes + channel.downlink
        return new

    def _server_clustered(self, new: RoundState, r: int, updates: list[ClientUpdate], counts) -> None:
        cfg = self.cfg
        if r == 0 or cfg.recluster:
            assignment = cluster_clients(new.local_models, cfg.cluster_layers)
            if new.assignment is None or assignment.num_clusters != new.assignment.num_clusters:
                new.coeffs = GlobalCoefficients.identity(assignment.num_clusters)
            new.assignment = assignment
        new.hard = cluster_average(new.local_models, new.assignment, counts)
        if cfg.method in ("fedwca", "fedwca_revised"):
            fresh = [u.bundle for u in updates if u.bundle is not None and not u.server_init]
            if r >= 1 and fresh:
                new.coeffs = server_estimate_AB(fresh, new.assignment)
                for u in updates:
                    if u.bundle is not None and not u.server_init:
                        new.stored_v[u.bundle.client_id] = u.bundle.v
            new.soft = make_soft_models(new.hard, new.coeffs)
        else:
            new.soft = list(new.hard)

    # --------------------------------------------------------- evaluation

    def personalized_models(self, state: RoundState) -> list[Model]:
        method = self.cfg.method
        if method == "source_only" or state.round == 0:
            return [self.source] * self.num_clients
        if method == "local":
            return list(state.local_models)
        if method == "fedavg":
            return [state.global_model] * self.num_clients
        return [state.hard[c] for c in state.assignment.assignment]

    def evaluate(self, state: RoundState) -> list[dict]:
        """Per-client accuracy of the model each client would deploy after ``state``."""
        rows = []
        models = self.personalized_models(state)
        for k, (client, model) in enumerate(zip(self.clients, models)):
            cluster = state.assignment.assignment[k] if state.assignment is not None else -1
            for split, batch in (
                ("val", Batch(client.val.inputs, client.hidden_val_labels)),
                ("test", client.test),
            ):
                rows.append(
                    dict(client_id=client.client_id, domain_id=client.domain_id,
                         cluster_id=cluster, split=split, accuracy=accuracy(model, batch))
                )
        return rows

    def run(self, on_round: Callable[[RoundState], None] | None = None) -> RoundState:
        state = self.initial_state()
        for _ in range(self.cfg.effective_rounds):
            state = self.run_round(state)
            if on_round is not None:
                on_round(state)
        return state


def mean_test_accuracy(rows: Sequence[dict]) -> float:
    accs = [row["accuracy"] for row in rows if row["split"] == "test"]
    return float(np.mean(accs)) if accs else math.nan
