"""Round-based federated training.

Each round the server samples a batch of users, generates and delivers their
models, every sampled device computes a gradient on a batch of its own
training ratings and uploads it, and the server maps the uploads back onto
its parameters, averages them, adds the L2 term and takes one Adam step.

All traffic goes through ``InProcessTransport`` as encoded bytes. Uploads are
reduced in ascending user order so a run is bit-reproducible.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import EpochSampler, UserShard
from .device import DeviceState, evaluate_local, local_gradient
from .exceptions import DatasetError, ProtocolError, RoundFailedError
from .metanet import MetaParams, ModelDims, backprop_to_theta, generate_model, init_params
from .numkernel import AdamState, adam_step, derive_seed
from .protocol import DeliverModel, GradientUpload, InProcessTransport, decode, encode

logger = logging.getLogger(__name__)

STREAM_INIT = 0
STREAM_USERS = 2
STREAM_RATINGS = 3

LOG_COLUMNS = ("round", "loss", "mae_valid", "mse_valid", "bytes_down", "bytes_up")


@dataclass(frozen=True)
class TrainConfig:
    users_per_round: int = 64
    ratings_per_user: int = 32
    learning_rate: float = 1e-4
    reg_lambda: float = 1e-3
    max_rounds: int = 20000
    patience: int = 10
    eval_every: int = 50
    variant: str = "full"
    seed: int = 0
    n_workers: int = 1

    def __post_init__(self):
        for name in ("users_per_round", "ratings_per_user", "patience", "eval_every", "n_workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")
        if self.reg_lambda < 0 or self.learning_rate < 0:
            raise ValueError("learning_rate and reg_lambda must be >= 0")


@dataclass
class ServerState:
    theta: MetaParams
    adam: dict
    config: TrainConfig
    user_sampler: EpochSampler | None = None
    round: int = 0

    @property
    def dims(self) -> ModelDims:
        return self.theta.dims


@dataclass
class TrainLog:
    """Append-only record of rounds and evaluations."""

    rows: list = field(default_factory=list)
    best_round: int | None = None
    best_valid: tuple | None = None

    def append(self, row: dict) -> None:
        self.rows.append(row)

    @property
    def evals(self) -> list[dict]:
        return [r for r in self.rows if r.get("mse_valid") is not None]

    def write_csv(self, path) -> None:
        """Deterministic columns only; wall-clock time goes to ``write_timing_csv``."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for row in self.rows:
                w.writerow(["" if row.get(c) is None else repr(row[c]) for c in LOG_COLUMNS])

    def write_timing_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("round", "seconds"))
            for row in self.rows:
                w.writerow((row["round"], f"{row['seconds']:.6f}"))


class Device:
    """A simulated phone: its shard, its rating sampler and the last model it received."""

    def __init__(self, shard: UserShard, ratings_per_user: int, seed: int):
        self.shard = shard
        self.user_index = shard.user_index
        n_train = len(shard.train[0])
        self.sampler = EpochSampler(np.arange(n_train), min(ratings_per_user, n_train),
                                    derive_seed(seed, STREAM_RATINGS, shard.user_index))
        self.phi = None
        self.round = None

    def receive(self, payload: bytes) -> None:
        msg = decode(payload)
        if not isinstance(msg, DeliverModel) or msg.user_index != self.user_index:
            raise ProtocolError(f"device {self.user_index} got an unexpected message")
        self.phi, self.round = msg.phi, msg.round

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self.sampler.next_indices()
        return self.shard.train[0][idx], self.shard.train[1][idx]

    def compute_upload(self) -> bytes:
        if self.phi is None:
            raise ProtocolError(f"device {self.user_index} has no model")
        grad = local_gradient(DeviceState(self.user_index, self.phi, self.shard), self.next_batch())
        return encode(GradientUpload(self.user_index, grad, self.round))

    def evaluate(self, phi, chunk: str):
        return evaluate_local(DeviceState(self.user_index, phi, self.shard), chunk)


def make_devices(shards, config: TrainConfig) -> dict[int, Device]:
    return {s.user_index: Device(s, config.ratings_per_user, config.seed) for s in shards}


def init_server(dims: ModelDims, config: TrainConfig, devices=None, seed: int | None = None) -> ServerState:
    """Fresh server with Xavier-initialised parameters and zeroed Adam moments.

    ``dims.variant`` is overridden by ``config.variant``. When ``devices`` is
    given, the user sampler is created over their user indices, which must
    lie inside ``dims.num_users``.
    """
    seed = config.seed if seed is None else seed
    if dims.variant != config.variant:
        dims = dataclasses.replace(dims, variant=config.variant)
    theta = init_params(dims, derive_seed(seed, STREAM_INIT))
    adam = {k: AdamState.zeros_like(v, config.learning_rate) for k, v in theta.items()}
    server = ServerState(theta, adam, config)
    if devices is not None:
        attach_devices(server, devices, seed)
    return server


def attach_devices(server: ServerState, devices, seed: int | None = None) -> None:
    users = sorted(devices)
    if not users:
        raise DatasetError("no users to train on")
    if users[-1] >= server.dims.num_users:
        raise DatasetError(f"user index {users[-1]} outside a model sized for {server.dims.num_users} users")
    seed = server.config.seed if seed is None else seed
    server.user_sampler = EpochSampler(np.asarray(users), min(server.config.users_per_round, len(users)),
                                       derive_seed(seed, STREAM_USERS))


def _check_upload(msg, server: ServerState, expected_users) -> None:
    if not isinstance(msg, GradientUpload):
        raise ProtocolError("server received a non-upload message")
    if msg.round != server.round:
        raise ProtocolError(f"upload tagged round {msg.round}, current round is {server.round}")
    if msg.user_index not in expected_users:
        raise ProtocolError(f"unexpected upload from user {msg.user_index}")
    idx = msg.grad.item_indices
    if len(idx) and (idx.min() < 0 or idx.max() >= server.dims.num_items):
        raise ProtocolError("upload references items outside the model")


def run_round(server: ServerState, devices, transport: InProcessTransport | None = None) -> dict:
    """One training round; returns the log row. Parameters change only on success."""
    if server.user_sampler is None:
        attach_devices(server, devices)
    transport = transport or InProcessTransport()
    transport.reset_counters()
    cfg = server.config
    start = time.perf_counter()
    users = sorted(int(u) for u in server.user_sampler.next_batch())
    theta = server.theta

    tapes = {}
    for u in users:
        phi, tapes[u] = generate_model(theta, u)
        transport.send_to_device(u, encode(DeliverModel(u, phi, server.round)))

    def work(u):
        dev = devices[u]
        dev.receive(transport.receive_on_device(u))
        return dev.compute_upload()

    try:
        if cfg.n_workers > 1:
            with ThreadPoolExecutor(cfg.n_workers) as pool:
                payloads = list(pool.map(work, users))
        else:
            payloads = [work(u) for u in users]
        for p in payloads:
            transport.send_to_server(p)
        uploads = [decode(p) for p in transport.drain_uploads()]
        for msg in uploads:
            _check_upload(msg, server, tapes)
        if sorted(m.user_index for m in uploads) != users:
            raise ProtocolError("missing or duplicate uploads")
        uploads.sort(key=lambda m: m.user_index)
        acc = theta.zeros_like()
        loss = 0.0
        for msg in uploads:
            backprop_to_theta(theta, tapes[msg.user_index], msg.user_index, msg.grad, out=acc)
            loss += msg.grad.loss
    except Exception as exc:
        raise RoundFailedError(f"round {server.round} aborted: {exc}") from exc

    count = len(uploads)
    for name in theta:
        grad = acc[name] / count + cfg.reg_lambda * theta[name]
        theta[name], _ = adam_step(theta[name], grad, server.adam[name])
    server.round += 1
    down, up = transport.reset_counters()
    return {"round": server.round, "loss": loss / count, "mae_valid": None, "mse_valid": None,
            "bytes_down": down, "bytes_up": up, "seconds": time.perf_counter() - start}


def global_evaluate(server: ServerState, devices, chunk: str = "test",
                    theta: MetaParams | None = None) -> tuple[float, float]:
    """Global MAE and MSE over ``chunk``, pooled across every device's ratings."""
    theta = theta or server.theta
    abs_sum = sq_sum = 0.0
    count = 0
    for u in sorted(devices):
        dev = devices[u]
        if len(dev.shard.chunk(chunk)[0]) == 0:
            continue
        phi, _ = generate_model(theta, u)
        a, s, c = dev.evaluate(phi, chunk)
        abs_sum += a
        sq_sum += s
        count += c
    if count == 0:
        raise DatasetError(f"no ratings in chunk {chunk!r}")
    return abs_sum / count, sq_sum / count


def train(server: ServerState, devices, log: TrainLog | None = None,
          transport: InProcessTransport | None = None) -> tuple[ServerState, TrainLog]:
    """Run rounds until ``max_rounds`` or until validation MSE stops improving.

    Validation runs every ``eval_every`` rounds and after the last round. The
    parameters with the best validation MSE are restored before returning.
    Without any validation ratings the run simply lasts ``max_rounds``.
    """
    cfg = server.config
    log = log or TrainLog()
    best_mse = np.inf
    best_theta = None
    stale = 0
    has_valid = any(len(d.shard.valid[0]) for d in devices.values())
    while server.round < cfg.max_rounds:
        row = run_round(server, devices, transport)
        if has_valid and (server.round % cfg.eval_every == 0 or server.round == cfg.max_rounds):
            mae, mse = global_evaluate(server, devices, "valid")
            row["mae_valid"], row["mse_valid"] = mae, mse
            logger.info("round %d loss %.4f valid mae %.4f mse %.4f", server.round, row["loss"], mae, mse)
            if mse < best_mse:
                best_mse, best_theta, stale = mse, server.theta.copy(), 0
                log.best_round, log.best_valid = server.round, (mae, mse)
            else:
                stale += 1
        log.append(row)
        if stale >= cfg.patience:
            logger.info("no validation improvement in %d evaluations, stopping", stale)
            break
    if best_theta is not None:
        server.theta = best_theta
    return server, log
