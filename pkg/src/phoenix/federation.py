"""Federated orchestration: warmup, local training, aggregation, filtering.

One server round broadcasts the global base parameters, trains every
participating client locally, optionally evaluates precision/recall and
advances the filtering state machine, then aggregates the surviving
updates by sample-count-weighted averaging. Personal-flagged parameters
never leave their client: they are stored in the client state and excluded
from every update.

All randomness is derived from (seed, domain, round, epoch, ...) keys, so
results do not depend on worker scheduling; aggregation iterates clients in
id order.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import diffusion
from .datasets import Dataset
from .filtering import ACTIVE, DISCONNECTED, DropPolicy, FilterState, filter_step
from .formats import write_checkpoint
from .metrics import MetricsContext, knn_precision_recall
from .optim import AdamState, adam_step, sgd_step
from .partition import PartitionPlan, SharingPlan
from .schedule import NoiseSchedule
from .seeding import (
    DOMAIN_EVAL,
    DOMAIN_SHUFFLE,
    DOMAIN_TRAIN_NOISE,
    DOMAIN_WARMUP,
    derive_rng,
    derive_seed,
)
from .unet import DenoiserConfig, DenoiserModel, build_unet, merge_parameters

log = logging.getLogger(__name__)

OPTIMIZER_ADAM = "adam"
OPTIMIZER_SGD = "sgd"

STATUS_FAULTED = "faulted"
STATUS_SKIPPED = "skipped"


class FederationError(RuntimeError):
    """The run cannot continue (e.g. no trainable clients left)."""


@dataclass
class FederationConfig:
    client_count: int
    server_rounds: int
    local_epochs: int
    batch_size: int
    learning_rate: float
    schedule: NoiseSchedule
    warmup_epochs: int = 5
    optimizer: str = OPTIMIZER_ADAM
    personalization: bool = False
    threshold_filtering: bool = False
    drop_policy: DropPolicy = field(default_factory=DropPolicy)
    eval_sample_count: int = 1000
    eval_start_round: int = 5
    min_active_clients: int = 2

    def validate(self) -> None:
        if self.server_rounds < 1 or self.local_epochs < 1:
            raise ValueError("server_rounds and local_epochs must be at least 1")
        if self.client_count < 1 or self.batch_size < 1:
            raise ValueError("client_count and batch_size must be at least 1")
        if self.threshold_filtering and self.client_count < 2:
            raise ValueError("threshold filtering needs at least 2 clients")
        if not 1 <= self.eval_start_round <= self.server_rounds:
            raise ValueError(
                f"eval_start_round {self.eval_start_round} outside "
                f"[1, {self.server_rounds}]"
            )
        if self.optimizer not in (OPTIMIZER_ADAM, OPTIMIZER_SGD):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")
        self.drop_policy.validate()


@dataclass
class ClientState:
    id: int
    data_indices: list[int]
    personal_params: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_state: AdamState | None = None


@dataclass
class ClientUpdate:
    client_id: int
    params: dict[str, np.ndarray]
    sample_count: int
    train_loss: float


@dataclass
class RunRow:
    round: int
    client_id: int
    status: str
    samples: int
    train_loss: float | None
    precision: float | None
    recall: float | None
    bytes_up: int
    bytes_down: int
    wall_ms: int


RUNLOG_COLUMNS = [
    "round", "client_id", "status", "samples", "train_loss",
    "precision", "recall", "bytes_up", "bytes_down", "wall_ms",
]


@dataclass
class RunLog:
    rows: list[RunRow] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        def fmt(v, spec="{:.6f}"):
            return "" if v is None else spec.format(v)

        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(RUNLOG_COLUMNS)
            for r in self.rows:
                writer.writerow([
                    r.round, r.client_id, r.status, r.samples,
                    fmt(r.train_loss), fmt(r.precision), fmt(r.recall),
                    r.bytes_up, r.bytes_down, r.wall_ms,
                ])


def _batched(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def _draw_batch_noise(
    seed: int, noise_key: tuple[int, ...], epoch: int, indices: np.ndarray,
    steps: int, image_shape: tuple[int, ...],
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample step indices and noise, keyed by the global sample index.

    Keying on the sample rather than client or batch position makes the
    draws identical however samples are grouped, which is what lets
    federated full-batch SGD match a centralized step exactly.
    """
    t = np.empty(len(indices), dtype=np.int64)
    noise = np.empty((len(indices),) + image_shape, dtype=np.float32)
    for j, gi in enumerate(indices):
        rng = derive_rng(seed, *noise_key, epoch, int(gi))
        t[j] = int(rng.integers(1, steps + 1))
        noise[j] = rng.standard_normal(image_shape, dtype=np.float32)
    return t, noise


def _train_epochs(
    model: DenoiserModel,
    params: dict[str, np.ndarray],
    dataset: Dataset,
    indices: list[int],
    config: FederationConfig,
    seed: int,
    shuffle_key: tuple[int, ...],
    noise_key: tuple[int, ...],
    epochs: int,
    optimizer_state: AdamState | None,
) -> tuple[dict[str, np.ndarray], float]:
    """Run seeded mini-batch epochs over ``indices``; returns (params, mean loss)."""
    image_shape = dataset.images.shape[1:]
    idx = np.asarray(indices, dtype=np.int64)
    losses: list[float] = []
    for epoch in range(epochs):
        order = idx[derive_rng(seed, *shuffle_key, epoch).permutation(len(idx))]
        for batch in _batched(order, config.batch_size):
            t, noise = _draw_batch_noise(
                seed, noise_key, epoch, batch, config.schedule.steps, image_shape
            )
            working = model.with_params(params)
            loss, leaves = diffusion.training_loss(
                working, config.schedule, dataset.images[batch], t, noise
            )
            ad.backward(loss)
            grads = {name: leaf.grad for name, leaf in leaves.items()}
            if config.optimizer == OPTIMIZER_ADAM:
                params = adam_step(params, grads, optimizer_state)
            else:
                params = sgd_step(params, grads, config.learning_rate)
            losses.append(loss.item())
    return params, float(np.mean(losses)) if losses else float("nan")


def warmup_train(
    shared: Dataset,
    model_config: DenoiserConfig,
    config: FederationConfig,
    seed: int,
) -> tuple[DenoiserModel, list[float]]:
    """Train a fresh model centrally on the shared pool.

    Returns the warmup model (the initial global model for federated
    training) and the per-epoch mean loss curve. With warmup_epochs = 0 the
    seeded initial model comes back untouched.
    """
    if len(shared) == 0:
        raise ValueError("warmup needs a non-empty shared pool")
    model = build_unet(model_config, seed)
    params = dict(model.params)
    state = AdamState(learning_rate=config.learning_rate)
    curve: list[float] = []
    for epoch in range(config.warmup_epochs):
        params, mean_loss = _train_epochs(
            model, params, shared, list(range(len(shared))), config, seed,
            shuffle_key=(DOMAIN_WARMUP, 0, epoch),
            noise_key=(DOMAIN_WARMUP, 1),
            epochs=1,
            optimizer_state=state,
        )
        curve.append(mean_loss)
    return model.with_params(params), curve


def _assemble_params(
    model: DenoiserModel, client: ClientState, config: FederationConfig
) -> dict[str, np.ndarray]:
    """Global base plus the client's stored personal layers (if any)."""
    if not config.personalization or not client.personal_params:
        return dict(model.params)
    base = {k: v for k, v in model.params.items() if k not in model.personal_names}
    return merge_parameters(model, base, client.personal_params)


def local_train(
    client: ClientState,
    global_model: DenoiserModel,
    dataset: Dataset,
    config: FederationConfig,
    round_no: int,
    seed: int,
) -> ClientUpdate | None:
    """One client's local epochs; returns its update, or None when skipped.

    The trained personal layers are stored back into the client state and
    stripped from the update when personalization is on. A non-finite loss
    marks the client faulted for the round: the exception propagates after
    the client state is left untouched by the failed attempt.
    """
    if not client.data_indices:
        log.warning("client %d has no data; skipping round %d", client.id, round_no)
        return None
    params = _assemble_params(global_model, client, config)
    if config.optimizer == OPTIMIZER_ADAM and client.optimizer_state is None:
        client.optimizer_state = AdamState(learning_rate=config.learning_rate)
    params, mean_loss = _train_epochs(
        global_model, params, dataset, client.data_indices, config, seed,
        shuffle_key=(DOMAIN_SHUFFLE, client.id, round_no),
        noise_key=(DOMAIN_TRAIN_NOISE, round_no),
        epochs=config.local_epochs,
        optimizer_state=client.optimizer_state,
    )
    if config.personalization:
        client.personal_params = {
            k: params[k] for k in global_model.personal_names
        }
        update_params = {
            k: v for k, v in params.items() if k not in global_model.personal_names
        }
    else:
        update_params = params
    return ClientUpdate(client.id, update_params, len(client.data_indices), mean_loss)


def fedavg(updates: list[ClientUpdate]) -> dict[str, np.ndarray]:
    """Sample-count-weighted average of the updates' parameter tables."""
    if not updates:
        raise ValueError("fedavg needs at least one update")
    names = list(updates[0].params)
    name_set = set(names)
    for u in updates[1:]:
        if set(u.params) != name_set:
            diff = sorted(set(u.params) ^ name_set)
            raise ValueError(
                f"update from client {u.client_id} has mismatched parameters: {diff}"
            )
    total = sum(u.sample_count for u in updates)
    if total <= 0:
        raise ValueError("total sample count is zero")
    ordered = sorted(updates, key=lambda u: u.client_id)
    out: dict[str, np.ndarray] = {}
    for name in names:
        acc = np.zeros(updates[0].params[name].shape, dtype=np.float64)
        for u in ordered:
            acc += (u.sample_count / total) * u.params[name].astype(np.float64)
        out[name] = acc.astype(np.float32)
    return out


def evaluate_client(
    client: ClientState,
    model: DenoiserModel,
    metrics_ctx: MetricsContext,
    config: FederationConfig,
    round_no: int,
    seed: int,
) -> tuple[float, float]:
    """Generate from the client's assembled model and score it by k-NN P/R."""
    if metrics_ctx is None:
        raise ValueError("client evaluation needs a metrics context")
    gen_seed = derive_seed(seed, DOMAIN_EVAL, round_no, client.id)
    samples = diffusion.generate(
        model, config.schedule, config.eval_sample_count, gen_seed
    )
    features = metrics_ctx.extract(samples)
    return knn_precision_recall(
        metrics_ctx.reference_features, features, metrics_ctx.knn_k
    )


def _param_bytes(params: Mapping[str, np.ndarray]) -> int:
    return 4 * sum(v.size for v in params.values())


def run_federation(
    initial_model: DenoiserModel,
    plan: PartitionPlan | SharingPlan,
    config: FederationConfig,
    dataset: Dataset,
    seed: int,
    metrics_ctx: MetricsContext | None = None,
    workers: int = 1,
    out_dir: str | Path | None = None,
) -> tuple[DenoiserModel, RunLog]:
    """Execute the configured number of server rounds and return the result.

    Writes per-round global checkpoints, per-client personal checkpoints,
    and the run log CSV under ``out_dir`` when given.
    """
    config.validate()
    if plan.client_count != config.client_count:
        raise ValueError(
            f"plan has {plan.client_count} clients, config expects {config.client_count}"
        )
    if config.threshold_filtering and metrics_ctx is None:
        raise ValueError("threshold filtering needs a metrics context")
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    clients = [
        ClientState(id=i, data_indices=list(plan.client_indices(i)))
        for i in range(config.client_count)
    ]
    global_model = initial_model.clone()
    filter_state = FilterState.fresh(
        [c.id for c in clients], config.drop_policy, config.min_active_clients
    ) if config.threshold_filtering else None
    runlog = RunLog()

    def train_one(client: ClientState, round_no: int):
        saved_personal = {k: v.copy() for k, v in client.personal_params.items()}
        saved_opt = client.optimizer_state
        start = time.perf_counter()
        try:
            update = local_train(client, global_model, dataset, config, round_no, seed)
            status = STATUS_SKIPPED if update is None else ACTIVE
        except ad.NumericError:
            log.warning("client %d faulted in round %d (non-finite loss)", client.id, round_no)
            client.personal_params = saved_personal
            client.optimizer_state = saved_opt
            update, status = None, STATUS_FAULTED
        wall_ms = int((time.perf_counter() - start) * 1000)
        return update, status, wall_ms

    for round_no in range(1, config.server_rounds + 1):
        participating = (
            filter_state.participating() if filter_state is not None
            else [c.id for c in clients]
        )
        if not participating:
            raise FederationError(f"round {round_no}: no participating clients remain")
        broadcast_bytes = _param_bytes(
            global_model.params if (round_no == 1 or not config.personalization)
            else {k: v for k, v in global_model.params.items()
                  if k not in global_model.personal_names}
        )
        jobs = [clients[cid] for cid in participating]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = dict(zip(
                    participating,
                    pool.map(lambda c: train_one(c, round_no), jobs),
                ))
        else:
            results = {c.id: train_one(c, round_no) for c in jobs}

        evaluated: dict[int, tuple[float, float]] = {}
        disconnected_now: list[int] = []
        if (
            config.threshold_filtering
            and round_no >= config.eval_start_round
        ):
            faulted = {cid for cid, (_, status, _) in results.items()
                       if status == STATUS_FAULTED}
            for cid in participating:
                if cid in faulted:
                    continue
                # score the freshly trained model; skipped clients fall back
                # to the broadcast model plus their stored personal layers
                update = results[cid][0]
                if update is None:
                    params = _assemble_params(global_model, clients[cid], config)
                elif config.personalization:
                    params = merge_parameters(global_model, update.params,
                                              clients[cid].personal_params)
                else:
                    params = dict(update.params)
                evaluated[cid] = evaluate_client(
                    clients[cid], global_model.with_params(params),
                    metrics_ctx, config, round_no, seed,
                )
            filter_state, disconnected_now, _ = filter_step(
                filter_state, evaluated, round_no, exempt=faulted
            )

        updates = [
            upd for cid, (upd, status, _) in sorted(results.items())
            if upd is not None and cid not in disconnected_now
        ]
        if not updates:
            raise FederationError(
                f"round {round_no}: no usable client updates (all faulted, "
                f"skipped, or disconnected)"
            )
        new_base = fedavg(updates)
        merged = dict(global_model.params)
        for name, arr in new_base.items():
            merged[name] = arr
        global_model = global_model.with_params(merged)

        for client in clients:
            cid = client.id
            if cid in results:
                update, status, wall_ms = results[cid]
                if filter_state is not None and status == ACTIVE:
                    status = filter_state.status[cid]
                pr = evaluated.get(cid)
                runlog.rows.append(RunRow(
                    round=round_no, client_id=cid, status=status,
                    samples=update.sample_count if update else 0,
                    train_loss=update.train_loss if update else None,
                    precision=pr[0] if pr else None,
                    recall=pr[1] if pr else None,
                    bytes_up=_param_bytes(update.params) if update else 0,
                    bytes_down=broadcast_bytes,
                    wall_ms=wall_ms,
                ))
            else:
                runlog.rows.append(RunRow(
                    round=round_no, client_id=cid, status=DISCONNECTED,
                    samples=0, train_loss=None, precision=None, recall=None,
                    bytes_up=0, bytes_down=0, wall_ms=0,
                ))

        if out_path is not None:
            write_checkpoint(
                out_path / f"round_{round_no}.phxc",
                global_model.params, set(global_model.personal_names),
            )
            for client in clients:
                if client.personal_params:
                    write_checkpoint(
                        out_path / f"client_{client.id}_personal.phxc",
                        client.personal_params, set(client.personal_params),
                    )

    if out_path is not None:
        runlog.write_csv(out_path / "runlog.csv")
    return global_model, runlog
