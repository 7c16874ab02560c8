"""Synchronous streaming federated learning rounds.

Each round every client receives a batch from its stream, updates its cache,
runs ``E`` full-batch gradient steps from the global model and uploads the
accumulated update. The server averages the updates and applies
``w <- w + eta * eta_L * mean(delta)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .cache import Batch, CacheConfig, LabeledCache, cached_distribution, full_cache_counts, policy_update
from .config import ExperimentConfig
from .distributions import StreamProfile, StreamState, advance_stream, build_stream_profile, start_stream
from .learner import ModelParams, SyntheticTask, evaluate, forward_loss, local_train, sample_items
from .metrics import per_slot_discrepancy, policy_bound
from .rng import SERVER, substream

TEST_PROTOCOL = "uniform over the union of client-supported classes"
CSV_COLUMNS = ("round", "policy", "psi_t", "loss", "accuracy", "bound")


@dataclass
class RoundRecord:
    round: int
    policy: str
    psi_t: float
    loss: float
    accuracy: float
    bound: float
    v: np.ndarray = field(repr=False)

    def row(self) -> list[str]:
        return [str(self.round), self.policy] + [fmt(x) for x in (self.psi_t, self.loss, self.accuracy, self.bound)]


def fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class ClientState:
    profile: StreamProfile
    stream: StreamState
    cache: LabeledCache
    feature_rng: np.random.Generator


@dataclass
class FederationState:
    global_params: ModelParams
    clients: list[ClientState]
    task: SyntheticTask
    round: int = 0

    @property
    def long_term(self) -> np.ndarray:
        return np.stack([c.profile.pi for c in self.clients])


@dataclass
class RunLog:
    records: list[RoundRecord]
    manifest: dict


def client_support(k: int, n_classes: int, per_client: int) -> np.ndarray:
    """Round-robin window of ``per_client`` classes starting at ``k * per_client``."""
    start = (k * per_client) % n_classes
    return (start + np.arange(per_client)) % n_classes


def build_client_profiles(config: ExperimentConfig) -> list[StreamProfile]:
    if config.C > config.R:
        raise ValueError(f"C={config.C} exceeds R={config.R}")
    s = config.stream
    return [
        build_stream_profile(
            config.seed,
            k,
            config.R,
            client_support(k, config.R, config.C),
            n_regimes=s.n_regimes,
            concentration=s.concentration,
            beta=s.beta,
            batch_size=config.batch_size,
            calibration_rounds=s.calibration_rounds,
            tau_max=s.tau_max,
            sampling=s.sampling,
        )
        for k in range(config.K)
    ]


def system_distribution(profiles: list[StreamProfile]) -> np.ndarray:
    """Network-wide long-term law: the plain average of client laws."""
    return np.mean([p.pi for p in profiles], axis=0)


def build_full_cache(
    rng: np.random.Generator, task: SyntheticTask, pi, capacity: int, immutable: bool = True
) -> LabeledCache:
    """Cache whose label counts apportion ``capacity * pi``."""
    counts = full_cache_counts(pi, capacity)
    labels = np.repeat(np.arange(task.n_classes), counts)
    cache = LabeledCache(task.n_classes, task.feature_dim, capacity)
    cache.append(Batch(sample_items(rng, task, labels), labels, 0))
    cache.ideal_counts = counts.astype(np.float64)
    cache.immutable = immutable
    return cache


def init_state(config: ExperimentConfig, profiles: list[StreamProfile] | None = None) -> FederationState:
    if profiles is None:
        profiles = build_client_profiles(config)
    supported = np.unique(np.concatenate([p.support for p in profiles]))
    m = config.model
    task = SyntheticTask.build(
        substream(config.seed, SERVER, "test"),
        config.R,
        feature_dim=m.feature_dim,
        noise_sigma=m.noise_sigma,
        test_size=m.test_size,
        test_classes=supported,
    )
    params = ModelParams.init(substream(config.seed, SERVER, "init"), (m.feature_dim, m.hidden, config.R))
    clients = []
    for k, profile in enumerate(profiles):
        if config.policy == "FULL":
            cache = build_full_cache(
                substream(config.seed, k, "full"), task, profile.pi, config.capacity, immutable=not config.full_refresh
            )
        else:
            cache = LabeledCache(config.R, m.feature_dim, config.capacity)
        stream = start_stream(profile.regime_set, substream(config.seed, k, "stream"))
        clients.append(ClientState(profile, stream, cache, substream(config.seed, k, "features")))
    return FederationState(params, clients, task)


def run_round(state: FederationState, config: ExperimentConfig) -> RoundRecord:
    if state.round >= config.T:
        raise ValueError(f"experiment already ran its {config.T} rounds")
    t = state.round + 1
    policy = config.policy_config
    cache_cfg: CacheConfig = config.cache
    deltas = []
    for k, client in enumerate(state.clients):
        try:
            client.stream, _, counts = advance_stream(
                client.stream, client.profile.regime_set, config.batch_size, config.stream.sampling
            )
            labels = np.repeat(np.arange(config.R), counts)
            batch = Batch(sample_items(client.feature_rng, state.task, labels), labels, t)
            policy_update(policy, client.cache, batch, t, cache_cfg, rng=substream(config.seed, k, "replace", t))
            _, delta = local_train(state.global_params, client.cache.features, client.cache.labels, config.E, config.eta_L)
        except Exception as exc:
            raise RuntimeError(f"round {t}, client {k}: {exc}") from exc
        deltas.append(delta)
    mean_delta = np.mean(deltas, axis=0)
    state.global_params = state.global_params.replace_flat(
        state.global_params.flat + config.eta * config.eta_L * mean_delta
    )
    state.round = t

    v = np.stack([cached_distribution(c.cache) for c in state.clients])
    psi_t = per_slot_discrepancy(v, state.long_term)
    loss = float(np.mean([forward_loss(state.global_params, c.cache.features, c.cache.labels) for c in state.clients]))
    accuracy = math.nan
    if t % config.model.eval_interval == 0 or t == config.T:
        accuracy = evaluate(state.global_params, *state.task.test_set)
    bound = max(
        policy_bound(policy, cache_cfg, t, c.profile.correlation, float(c.profile.pi.max() ** 2))
        for c in state.clients
    )
    return RoundRecord(t, policy.kind, psi_t, loss, accuracy, bound, v)


def manifest_for(config: ExperimentConfig, profiles: list[StreamProfile]) -> dict:
    return {
        "config": config.to_dict(),
        "config_sha256": config.digest(),
        "seed": config.seed,
        "version": __version__,
        "test_protocol": TEST_PROTOCOL,
        "clients": [
            {
                "support": p.support.tolist(),
                "long_term": p.pi.tolist(),
                "gamma": p.correlation.gamma,
                "delta_sq": p.correlation.delta_sq,
            }
            for p in profiles
        ],
    }


def run_experiment(config: ExperimentConfig, profiles: list[StreamProfile] | None = None) -> RunLog:
    """Run ``config.T`` rounds from a fresh state; deterministic in ``config.seed``."""
    if profiles is None:
        profiles = build_client_profiles(config)
    state = init_state(config, profiles)
    records = [run_round(state, config) for _ in range(config.T)]
    return RunLog(records, manifest_for(config, profiles))


def write_rounds_csv(path, records: list[RoundRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())
