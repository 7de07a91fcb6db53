"""
Federated training simulation for FedDAE.

One round:
  1. sample n_s clients (optionally excluding last round's participants)
  2. each client copies the global encoder/decoder, trains E local epochs,
     accumulates the global-parameter gradients and updates its private
     local encoder and gate
  3. optional Gaussian noise on the uploaded gradients
  4. the server averages the uploads in client-id order and steps phi, theta

Only ClientUpload objects cross from client to server; they carry
gradients for the shared networks, scores and the loss trace, never a local
encoder or gate tensor.

Every random draw comes from a named substream of the run seed, so
sequential and threaded client execution give identical results.
"""

import logging
import math
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from client_store import ClientState, ClientStore, open_client_store
from dae_model import (
    BetaSchedule,
    GateParams,
    ModelBundle,
    backward_elbo,
    dense_row,
    elbo,
    init_global_nets,
    init_local_encoder,
    predict_scores,
)
from data_pipeline import SplitDataset
from errors import ConfigurationError, PoisonedUpdateError
from eval_metrics import RankResult, hr_at_k, ndcg_at_k, rank_heldout
from nn_core import AdamState, DenseNet, Parametric, adam_step, sgd_step
from rng_streams import CLIENT, NOISE, SAMPLING, SHUFFLE, derive_rng
from run_config import RunConfig
from tqdm import tqdm

logger = logging.getLogger(f"feddae.{__name__}")

UpdateRule = Literal["adam", "plain-sgd"]
AggregationMode = Literal["plain-sgd", "server-adam"]
ClientWeighting = Literal["uniform", "interactions"]

# Share of all optimizer steps over which beta climbs to its cap when
# anneal_steps is not configured.
DEFAULT_ANNEAL_FRACTION = 0.4


# === State Classes ===


@dataclass
class ServerState:
    global_encoder: DenseNet
    decoder: DenseNet
    encoder_adam: AdamState = field(default_factory=AdamState)
    decoder_adam: AdamState = field(default_factory=AdamState)
    round: int = 0
    previous_participants: frozenset[int] = frozenset()
    # Last r_hat uploaded by each client
    predictions: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class ClientUpload:
    client_id: int
    grad_global_encoder: dict[str, np.ndarray]
    grad_decoder: dict[str, np.ndarray]
    scores: np.ndarray
    elbo_trace: list[float]
    n_interactions: int

    def payload(self) -> dict[str, np.ndarray]:
        """Every tensor that is sent to the server, by name."""
        tensors = {f"grad.global_encoder.{k}": v for k, v in self.grad_global_encoder.items()}
        tensors.update({f"grad.decoder.{k}": v for k, v in self.grad_decoder.items()})
        tensors["scores"] = self.scores
        return tensors


@dataclass(frozen=True)
class NoiseConfig:
    variance: float = 0.0

    def __post_init__(self) -> None:
        if not self.variance >= 0.0:
            raise ConfigurationError("noise_variance", f"must be >= 0, got {self.variance}")


@dataclass(frozen=True)
class LocalTrainingOptions:
    """Client-side knobs that are not part of the update signature."""

    update_rule: UpdateRule = "adam"
    dropout_rate: float = 0.0
    fixed_weight: float | None = None
    loss_mode: Literal["full", "masked"] = "full"
    resample_negatives: bool = False
    negatives_per_positive: int = 4

    @classmethod
    def from_config(cls, config: RunConfig) -> "LocalTrainingOptions":
        return cls(
            update_rule=config.update_rule,
            dropout_rate=config.dropout_rate,
            fixed_weight=config.fixed_weight,
            loss_mode=config.loss_mode,
            resample_negatives=config.resample_negatives,
            negatives_per_positive=config.negatives_per_positive,
        )


@dataclass
class RoundReport:
    round: int
    elbo_mean: float | None
    participants: list[int]
    failed: list[int]
    hr: float | None = None
    ndcg: float | None = None
    top_k: int = 20
    wall_time: float = 0.0

    def to_record(self) -> dict:
        return {
            "t": self.round,
            "elbo_mean": self.elbo_mean,
            "hr": self.hr,
            "ndcg": self.ndcg,
            "k": self.top_k,
            "participants": self.participants,
            "failed": self.failed,
            "wall_time": round(self.wall_time, 3),
        }


@dataclass
class TrainingResult:
    server: ServerState
    clients: ClientStore
    reports: list[RoundReport]


CheckpointHook = Callable[[int, ServerState, ClientStore], None]
ReportHook = Callable[[RoundReport], None]


# === Client Side ===


def sample_clients(
    n_clients: int, n_selected: int, previous: frozenset[int] | set[int], rng: np.random.Generator
) -> frozenset[int]:
    """Uniform draw of n_selected ids from range(n_clients) minus previous, without replacement."""
    pool = np.array(sorted(set(range(n_clients)) - set(previous)), dtype=np.int64)
    if not 1 <= n_selected <= pool.size:
        raise ConfigurationError(
            "clients_per_round",
            f"cannot select {n_selected} clients: needs 1 <= n_s <= n - |previous| = {n_clients} - {len(previous)}",
        )
    return frozenset(int(u) for u in rng.choice(pool, size=n_selected, replace=False))


def _round_inputs(
    client: ClientState, options: LocalTrainingOptions, rng: np.random.Generator, n_items: int, latent_dim: int
) -> tuple[np.ndarray, np.ndarray | None]:
    """eps for the round, then the masked-loss candidate set; draws happen in that order."""
    noise = rng.standard_normal(latent_dim)
    if options.loss_mode != "masked":
        return noise, None
    negatives = client.negatives
    if options.resample_negatives:
        excluded = np.zeros(n_items, dtype=bool)
        excluded[client.train_row] = True
        pool = np.flatnonzero(~excluded)
        size = options.negatives_per_positive * client.train_row.size
        negatives = rng.choice(pool, size=size, replace=True) if pool.size else np.empty(0, dtype=np.int64)
    return noise, np.union1d(client.train_row, negatives)


def _step(net: Parametric, state: AdamState, rule: UpdateRule, lr: float) -> None:
    if rule == "adam":
        adam_step(net, state, lr=lr)
    else:
        sgd_step(net, lr=lr)


def client_update(
    client: ClientState,
    global_encoder: DenseNet,
    decoder: DenseNet,
    schedule: BetaSchedule,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    options: LocalTrainingOptions | None = None,
) -> ClientUpload:
    """
    E local epochs on working copies of phi/theta plus the private phi_u/psi_u.

    eps is drawn once per round and reused every epoch; dropout masks are
    drawn per epoch. Private parameters are only committed back to client
    when all epochs finish, so a PoisonedUpdateError leaves them untouched.
    """
    options = options or LocalTrainingOptions()
    if epochs < 1:
        raise ConfigurationError("local_epochs", f"must be >= 1, got {epochs}")

    work_encoder = global_encoder.copy()
    work_decoder = decoder.copy()
    local_encoder = client.local_encoder.copy()
    gate = client.gate.copy()
    local_adam = _copy_adam(client.local_encoder_adam)
    gate_adam = _copy_adam(client.gate_adam)
    work_encoder_adam, work_decoder_adam = AdamState(), AdamState()

    bundle = ModelBundle(work_encoder, local_encoder, gate, work_decoder, options.fixed_weight)
    r = dense_row(client.train_row, bundle.n_items)
    noise, candidates = _round_inputs(client, options, rng, bundle.n_items, bundle.latent_dim)

    acc_encoder = {k: np.zeros_like(v) for k, v in work_encoder.named_parameters().items()}
    acc_decoder = {k: np.zeros_like(v) for k, v in work_decoder.named_parameters().items()}
    trace = []
    for e in range(epochs):
        bundle.zero_grads()
        loss, tape = elbo(
            bundle,
            r,
            schedule.beta(e),
            train_mode=True,
            rng=rng,
            dropout_rate=options.dropout_rate,
            noise=noise,
            candidates=candidates,
        )
        backward_elbo(bundle, tape)
        for key, grad in work_encoder.named_grads().items():
            acc_encoder[key] += grad
        for key, grad in work_decoder.named_grads().items():
            acc_decoder[key] += grad

        _step(work_encoder, work_encoder_adam, options.update_rule, lr)
        _step(work_decoder, work_decoder_adam, options.update_rule, lr)
        _step(local_encoder, local_adam, options.update_rule, lr)
        if options.fixed_weight is None:
            _step(gate, gate_adam, options.update_rule, lr)
        trace.append(loss)

    scores = predict_scores(bundle, r)
    client.local_encoder = local_encoder
    client.gate = gate
    client.local_encoder_adam = local_adam
    client.gate_adam = gate_adam
    return ClientUpload(client.client_id, acc_encoder, acc_decoder, scores, trace, client.n_interactions)


def _copy_adam(state: AdamState) -> AdamState:
    return AdamState(
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        step=state.step,
        first_moment={k: v.copy() for k, v in state.first_moment.items()},
        second_moment={k: v.copy() for k, v in state.second_moment.items()},
    )


def add_gradient_noise(upload: ClientUpload, cfg: NoiseConfig, rng: np.random.Generator) -> ClientUpload:
    """Element-wise N(0, variance) on both gradient maps; scores pass through. Variance 0 returns upload."""
    if cfg.variance == 0.0:
        return upload
    sd = math.sqrt(cfg.variance)

    def noisy(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {k: g + sd * rng.standard_normal(g.shape) for k, g in sorted(grads.items())}

    return ClientUpload(
        client_id=upload.client_id,
        grad_global_encoder=noisy(upload.grad_global_encoder),
        grad_decoder=noisy(upload.grad_decoder),
        scores=upload.scores,
        elbo_trace=upload.elbo_trace,
        n_interactions=upload.n_interactions,
    )


# === Server Side ===


def _weighted_mean(uploads: list[ClientUpload], attr: str, weighting: ClientWeighting) -> dict[str, np.ndarray]:
    first = getattr(uploads[0], attr)
    total = {k: np.zeros_like(v) for k, v in first.items()}
    if weighting == "interactions":
        counts = np.array([up.n_interactions for up in uploads], dtype=np.float64)
        if counts.sum() <= 0:
            raise ConfigurationError("client_weighting", "participants have no interactions to weight by")
        weights = counts / counts.sum()
        for up, w in zip(uploads, weights):
            for k, g in getattr(up, attr).items():
                total[k] += w * g
        return total
    for up in uploads:
        for k, g in getattr(up, attr).items():
            total[k] += g
    return {k: v / len(uploads) for k, v in total.items()}


def aggregate(
    server: ServerState,
    uploads: list[ClientUpload],
    lr: float,
    mode: AggregationMode = "server-adam",
    weighting: ClientWeighting = "uniform",
) -> ServerState:
    """
    Average the uploaded gradients (reduced in client-id order) and step phi, theta.

    plain-sgd: phi <- phi - lr * mean; server-adam feeds the mean to the server's Adam.
    """
    if not uploads:
        logger.warning("Round %d has no successful uploads; server update skipped", server.round)
        return server
    ordered = sorted(uploads, key=lambda up: up.client_id)
    mean_encoder = _weighted_mean(ordered, "grad_global_encoder", weighting)
    mean_decoder = _weighted_mean(ordered, "grad_decoder", weighting)
    if mode == "plain-sgd":
        sgd_step(server.global_encoder, mean_encoder, lr=lr)
        sgd_step(server.decoder, mean_decoder, lr=lr)
    elif mode == "server-adam":
        adam_step(server.global_encoder, server.encoder_adam, mean_encoder, lr=lr)
        adam_step(server.decoder, server.decoder_adam, mean_decoder, lr=lr)
    else:
        raise ConfigurationError("update_rule", f"unknown aggregation mode {mode!r}")
    return server


def evaluate_clients(
    global_encoder: DenseNet,
    decoder: DenseNet,
    clients: ClientStore,
    split: SplitDataset,
    fixed_weight: float | None = None,
) -> list[RankResult]:
    """Rank every user's held-out item with the global nets and that user's private parameters."""
    results = []
    for u in clients.ids():
        client = clients.load(u)
        bundle = ModelBundle(global_encoder, client.local_encoder, client.gate, decoder, fixed_weight)
        scores = predict_scores(bundle, dense_row(client.train_row, bundle.n_items))
        results.append(rank_heldout(scores, int(split.test_items[u]), client.train_row, user=u))
    return results


# === Drivers ===


def _aggregation_mode(rule: UpdateRule) -> AggregationMode:
    return "plain-sgd" if rule == "plain-sgd" else "server-adam"


def _anneal_steps(config: RunConfig, steps_per_round: int) -> int:
    if config.anneal_steps is not None:
        return config.anneal_steps
    return int(DEFAULT_ANNEAL_FRACTION * config.rounds * steps_per_round)


def init_server(config: RunConfig, n_items: int) -> ServerState:
    encoder, decoder = init_global_nets(n_items, config.latent_dim, config.hidden_dim, config.n_layers, config.seed)
    return ServerState(encoder, decoder)


def init_clients(config: RunConfig, split: SplitDataset, output_dir: Path | None = None) -> ClientStore:
    n_items = split.train.n_items

    def fresh(u: int) -> ClientState:
        negatives = split.negatives[u] if split.negatives else np.empty(0, dtype=np.int64)
        return ClientState(
            client_id=u,
            local_encoder=init_local_encoder(
                n_items, config.latent_dim, config.hidden_dim, config.n_layers, config.seed, u
            ),
            gate=GateParams.zeros(n_items),
            train_row=split.train.rows[u].copy(),
            negatives=negatives,
        )

    return open_client_store(config.client_store, split.train.n_users, fresh, output_dir)


def _is_due(t: int, interval: int, rounds: int) -> bool:
    return (t + 1) % interval == 0 or t == rounds - 1


def _evaluate_round(
    server: ServerState, clients: ClientStore, split: SplitDataset, config: RunConfig
) -> tuple[float, float]:
    results = evaluate_clients(server.global_encoder, server.decoder, clients, split, config.fixed_weight)
    return hr_at_k(results, config.top_k), ndcg_at_k(results, config.top_k)


def _train_client(
    u: int,
    t: int,
    server: ServerState,
    clients: ClientStore,
    schedule: BetaSchedule,
    config: RunConfig,
    options: LocalTrainingOptions,
) -> ClientUpload | None:
    client = clients.load(u)
    try:
        upload = client_update(
            client,
            server.global_encoder,
            server.decoder,
            schedule,
            config.local_epochs,
            config.lr,
            derive_rng(config.seed, CLIENT, t, u),
            options,
        )
    except PoisonedUpdateError as e:
        logger.warning("Client %d failed in round %d and is excluded: %s", u, t, e)
        return None
    clients.save(client)
    return upload


def run_federated(
    config: RunConfig,
    split: SplitDataset,
    output_dir: Path | None = None,
    on_report: ReportHook | None = None,
    on_checkpoint: CheckpointHook | None = None,
    progress: bool = False,
) -> TrainingResult:
    """T rounds of sample -> local update -> noise -> aggregate, evaluated every eval_interval rounds."""
    n_clients = split.train.n_users
    n_selected = config.participants_per_round(n_clients)
    options = LocalTrainingOptions.from_config(config)
    noise = NoiseConfig(config.noise_variance)
    mode = _aggregation_mode(config.update_rule)

    server = init_server(config, split.train.n_items)
    clients = init_clients(config, split, output_dir)
    anneal = _anneal_steps(config, config.local_epochs)
    reports: list[RoundReport] = []
    logger.info(
        "Federated run: n=%d clients, n_s=%d per round, m=%d items, T=%d, E=%d, rule=%s",
        n_clients,
        n_selected,
        split.train.n_items,
        config.rounds,
        config.local_epochs,
        config.update_rule,
    )

    rounds = tqdm(range(config.rounds), desc="rounds", disable=not progress)
    for t in rounds:
        started = time.perf_counter()
        previous = server.previous_participants if config.exclusive_rounds else frozenset()
        participants = sorted(sample_clients(n_clients, n_selected, previous, derive_rng(config.seed, SAMPLING, t)))
        schedule = BetaSchedule(anneal, config.beta_cap, current_step=t * config.local_epochs)

        def train(u: int, t: int = t, schedule: BetaSchedule = schedule) -> ClientUpload | None:
            return _train_client(u, t, server, clients, schedule, config, options)

        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                outcomes = list(pool.map(train, participants))
        else:
            outcomes = [train(u) for u in participants]

        uploads = [up for up in outcomes if up is not None]
        failed = [u for u, up in zip(participants, outcomes) if up is None]
        noisy = [add_gradient_noise(up, noise, derive_rng(config.seed, NOISE, t, up.client_id)) for up in uploads]
        aggregate(server, noisy, config.lr, mode, config.client_weighting)
        for up in uploads:
            server.predictions[up.client_id] = up.scores
        server.round += 1
        server.previous_participants = frozenset(participants)

        losses = [loss for up in uploads for loss in up.elbo_trace]
        report = RoundReport(
            round=t,
            elbo_mean=float(np.mean(losses)) if losses else None,
            participants=participants,
            failed=failed,
            top_k=config.top_k,
        )
        if _is_due(t, config.eval_interval, config.rounds):
            report.hr, report.ndcg = _evaluate_round(server, clients, split, config)
        report.wall_time = time.perf_counter() - started
        _publish(report, reports, on_report)
        if on_checkpoint and config.checkpoint_interval and (t + 1) % config.checkpoint_interval == 0:
            on_checkpoint(t + 1, server, clients)

    return TrainingResult(server, clients, reports)


def run_central(
    config: RunConfig,
    split: SplitDataset,
    output_dir: Path | None = None,
    on_report: ReportHook | None = None,
    on_checkpoint: CheckpointHook | None = None,
    progress: bool = False,
) -> TrainingResult:
    """
    Same model trained in one process: every round is an epoch over user
    minibatches. Shared nets step on the batch-mean gradient; each user's
    local encoder and gate step right after that user's pass.
    """
    n_clients = split.train.n_users
    batch_size = config.batch_size
    if batch_size > n_clients:
        logger.warning("Batch size %d exceeds %d users; clamped to %d", batch_size, n_clients, n_clients)
        batch_size = n_clients
    options = LocalTrainingOptions.from_config(config)

    server = init_server(config, split.train.n_items)
    clients = init_clients(config, split, output_dir)
    steps_per_round = math.ceil(n_clients / batch_size)
    anneal = _anneal_steps(config, steps_per_round)
    reports: list[RoundReport] = []
    logger.info(
        "Central run: n=%d users, batch=%d, m=%d items, T=%d, rule=%s",
        n_clients,
        batch_size,
        split.train.n_items,
        config.rounds,
        config.update_rule,
    )

    rounds = tqdm(range(config.rounds), desc="epochs", disable=not progress)
    for t in rounds:
        started = time.perf_counter()
        order = derive_rng(config.seed, SHUFFLE, t).permutation(n_clients)
        losses, failed = [], []
        for b, start in enumerate(range(0, n_clients, batch_size)):
            users = sorted(int(u) for u in order[start : start + batch_size])
            beta = BetaSchedule(anneal, config.beta_cap, current_step=t * steps_per_round + b).beta()
            acc_encoder = {k: np.zeros_like(v) for k, v in server.global_encoder.named_parameters().items()}
            acc_decoder = {k: np.zeros_like(v) for k, v in server.decoder.named_parameters().items()}
            done = 0
            for u in users:
                loss = _central_user_step(u, t, beta, server, clients, config, options)
                if loss is None:
                    failed.append(u)
                    continue
                for key, grad in server.global_encoder.named_grads().items():
                    acc_encoder[key] += grad
                for key, grad in server.decoder.named_grads().items():
                    acc_decoder[key] += grad
                losses.append(loss)
                done += 1
            if not done:
                logger.warning("Batch %d of epoch %d had no successful users; shared update skipped", b, t)
                continue
            mean_encoder = {k: g / done for k, g in acc_encoder.items()}
            mean_decoder = {k: g / done for k, g in acc_decoder.items()}
            if config.update_rule == "adam":
                adam_step(server.global_encoder, server.encoder_adam, mean_encoder, lr=config.lr)
                adam_step(server.decoder, server.decoder_adam, mean_decoder, lr=config.lr)
            else:
                sgd_step(server.global_encoder, mean_encoder, lr=config.lr)
                sgd_step(server.decoder, mean_decoder, lr=config.lr)
        server.round += 1

        report = RoundReport(
            round=t,
            elbo_mean=float(np.mean(losses)) if losses else None,
            participants=list(range(n_clients)),
            failed=sorted(failed),
            top_k=config.top_k,
        )
        if _is_due(t, config.eval_interval, config.rounds):
            report.hr, report.ndcg = _evaluate_round(server, clients, split, config)
        report.wall_time = time.perf_counter() - started
        _publish(report, reports, on_report)
        if on_checkpoint and config.checkpoint_interval and (t + 1) % config.checkpoint_interval == 0:
            on_checkpoint(t + 1, server, clients)

    return TrainingResult(server, clients, reports)


def _central_user_step(
    u: int,
    t: int,
    beta: float,
    server: ServerState,
    clients: ClientStore,
    config: RunConfig,
    options: LocalTrainingOptions,
) -> float | None:
    """
    One user's pass. Leaves that user's shared-net gradients in the server
    grad buffers and steps the private parameters; None when the pass failed.
    """
    client = clients.load(u)
    rng = derive_rng(config.seed, CLIENT, t, u)
    local_encoder = client.local_encoder.copy()
    gate = client.gate.copy()
    local_adam = _copy_adam(client.local_encoder_adam)
    gate_adam = _copy_adam(client.gate_adam)

    bundle = ModelBundle(server.global_encoder, local_encoder, gate, server.decoder, options.fixed_weight)
    bundle.zero_grads()
    r = dense_row(client.train_row, bundle.n_items)
    noise, candidates = _round_inputs(client, options, rng, bundle.n_items, bundle.latent_dim)
    try:
        loss, tape = elbo(
            bundle,
            r,
            beta,
            train_mode=True,
            rng=rng,
            dropout_rate=options.dropout_rate,
            noise=noise,
            candidates=candidates,
        )
        backward_elbo(bundle, tape)
        for key, grad in {**server.global_encoder.named_grads(), **server.decoder.named_grads()}.items():
            if not np.all(np.isfinite(grad)):
                raise PoisonedUpdateError(key)
        _step(local_encoder, local_adam, options.update_rule, config.lr)
        if options.fixed_weight is None:
            _step(gate, gate_adam, options.update_rule, config.lr)
    except PoisonedUpdateError as e:
        logger.warning("User %d failed in epoch %d and is excluded: %s", u, t, e)
        return None

    client.local_encoder = local_encoder
    client.gate = gate
    client.local_encoder_adam = local_adam
    client.gate_adam = gate_adam
    clients.save(client)
    return loss


def _publish(report: RoundReport, reports: list[RoundReport], on_report: ReportHook | None) -> None:
    reports.append(report)
    logger.info(
        "Round %d: elbo_mean=%s hr@%d=%s ndcg@%d=%s failed=%d",
        report.round,
        "n/a" if report.elbo_mean is None else f"{report.elbo_mean:.4f}",
        report.top_k,
        "n/a" if report.hr is None else f"{report.hr:.4f}",
        report.top_k,
        "n/a" if report.ndcg is None else f"{report.ndcg:.4f}",
        len(report.failed),
    )
    if on_report is not None:
        on_report(report)


def run_training(
    config: RunConfig,
    split: SplitDataset,
    output_dir: Path | None = None,
    on_report: ReportHook | None = None,
    on_checkpoint: CheckpointHook | None = None,
    progress: bool = False,
) -> TrainingResult:
    """Dispatch on config.mode."""
    runner = run_central if config.mode == "central" else run_federated
    return runner(config, split, output_dir, on_report, on_checkpoint, progress)
