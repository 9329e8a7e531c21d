"""Federated rounds: client sampling, local SGD, server aggregation, evaluation."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .calibration import CalibratedHead, client_stats, payload_nbytes, server_solve
from .data import Dataset, Partition
from .errors import DivergenceError, HyperFedError, ParameterError, ProtocolError
from .model import (
    LOSSES,
    ClassifierHead,
    MlpExtractor,
    assign,
    backward,
    batch_loss,
    flatten,
    forward,
    lr_schedule,
    sgd_step,
    trainable_params,
)
from .numerics import Rng

STRATEGIES = ("fedavg", "fedprox", "fednova", "fedopt")
HEAD_KINDS = ("trainable", "fixed-random", "fixed-orthonormal")
CALIBRATION_MODES = ("off", "once", "every")

# child-stream tags under the run seed
STREAM_INIT = 10
STREAM_HEAD = 11
STREAM_SAMPLE = 12
STREAM_TRAIN = 13


@dataclass
class FedConfig:
    strategy: str = "fedavg"
    rounds: int = 40
    local_epochs: int = 5
    batch_size: int = 64
    lr: float = 0.1
    schedule: str = "cosine"
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    loss: str = "ce"
    mu: float = 0.0
    server_lr: float = 1.0
    server_momentum: float = 0.0
    participation: float = 1.0
    calibration: str = "off"
    calibrate_every: int = 0
    lam: float = 0.0
    bytes_per_param: int = metrics.BYTES_PER_PARAM
    threads: int = 1

    def validate(self, num_clients: int | None = None) -> None:
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"strategy must be one of {STRATEGIES}")
        if self.loss not in LOSSES:
            raise ParameterError(f"loss must be one of {LOSSES}")
        if self.rounds < 0 or self.local_epochs < 0 or self.batch_size < 1:
            raise ParameterError("rounds/local_epochs must be >= 0 and batch_size >= 1")
        if self.mu < 0:
            raise ParameterError("mu must be nonnegative")
        if not 0 < self.participation <= 1:
            raise ParameterError("participation must lie in (0, 1]")
        if not 0 <= self.momentum < 1 or not 0 <= self.server_momentum < 1:
            raise ParameterError("momentum coefficients must lie in [0, 1)")
        if self.calibration not in CALIBRATION_MODES:
            raise ParameterError(f"calibration must be one of {CALIBRATION_MODES}")
        if self.calibration == "every" and self.calibrate_every < 1:
            raise ParameterError("calibrate_every must be >= 1 for periodic calibration")
        if self.lam < 0:
            raise ParameterError("lambda must be nonnegative")


@dataclass
class HeadSpec:
    kind: str = "trainable"
    init: str = "qr"
    normalize_features: bool = False
    tau: float = 1.0

    def build(self, c: int, l: int, rng: Rng) -> ClassifierHead:
        if self.kind == "fixed-orthonormal":
            return ClassifierHead.hyperspherical(c, l, rng, method=self.init, tau=self.tau)
        if self.kind == "fixed-random":
            return ClassifierHead.random(c, l, rng, fixed=True, normalize_features=self.normalize_features, tau=self.tau)
        if self.kind == "trainable":
            return ClassifierHead.random(c, l, rng, fixed=False, normalize_features=self.normalize_features, tau=self.tau)
        raise ParameterError(f"head kind must be one of {HEAD_KINDS}")


@dataclass
class ClientUpdate:
    client: int
    params: np.ndarray
    n: int
    steps: int
    loss_sum: float
    seen: int
    head: np.ndarray


@dataclass
class RoundReport:
    round: int
    lr: float
    test_accuracy: float
    train_loss: float
    cosine: float | None
    norm_diff: float | None
    clients: list[int]
    comm_bytes: int
    client_flops: int
    server_flops: float
    calibrated: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    reports: list[RoundReport]
    extractor: MlpExtractor
    head: ClassifierHead
    trained_head: ClassifierHead
    accuracy_before: float
    accuracy_after: float | None
    ledger: metrics.CostLedger
    calibrations: list[dict] = field(default_factory=list)


def local_train(extractor: MlpExtractor, head: ClassifierHead, features, labels, cfg: FedConfig,
                lr: float, rng: Rng, client: int = 0) -> ClientUpdate:
    """Local epochs of mini-batch SGD on copies of the global model.

    Momentum restarts from zero each round. FedProx adds ``mu * (p - p_global)``
    to every gradient.
    """
    ext = extractor.copy()
    hd = head.copy()
    params = trainable_params(ext, hd)
    anchors = [p.copy() for p in params] if cfg.strategy == "fedprox" and cfg.mu > 0 else None
    labels = np.asarray(labels)
    n = len(labels)
    state = None
    steps, loss_sum, seen = 0, 0.0, 0
    for epoch in range(cfg.local_epochs):
        order = rng.child(epoch).generator().permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            trace = forward(ext, hd, features[idx])
            loss = batch_loss(trace.logits, labels[idx], cfg.loss)
            if not np.isfinite(loss):
                raise DivergenceError(f"local loss became {loss} at epoch {epoch}; lower the learning rate")
            loss_sum += loss * len(idx)
            seen += len(idx)
            grads = backward(trace, ext, hd, labels[idx], cfg.loss).as_list()
            if anchors is not None:
                grads = [g + cfg.mu * (p - a) for g, p, a in zip(grads, params, anchors)]
            state = sgd_step(params, grads, lr, cfg.momentum, cfg.weight_decay, state)
            steps += 1
    return ClientUpdate(client, flatten(params), n, steps, loss_sum, seen, hd.weights)


def effective_steps(steps: int, momentum: float) -> float:
    """Length of the local momentum-SGD update in units of plain steps."""
    if momentum == 0:
        return float(steps)
    return (steps - momentum * (1.0 - momentum**steps) / (1.0 - momentum)) / (1.0 - momentum)


@dataclass
class ServerState:
    velocity: np.ndarray | None = None


def weighted_mean(vectors, weights) -> np.ndarray:
    out = np.zeros_like(vectors[0])
    for v, w in zip(vectors, weights):
        out += w * v
    return out


def aggregate(updates: list[ClientUpdate], global_params: np.ndarray, cfg: FedConfig,
              server: ServerState | None = None) -> np.ndarray:
    """New global parameter vector; updates are reduced in ascending client order."""
    if not updates:
        raise ProtocolError("no client updates to aggregate")
    updates = sorted(updates, key=lambda u: u.client)
    for u in updates:
        if u.params.shape != global_params.shape:
            raise ProtocolError(f"client {u.client} sent {u.params.shape}, expected {global_params.shape}")
    total = float(sum(u.n for u in updates))
    p = [u.n / total for u in updates]
    vecs = [u.params for u in updates]

    if cfg.strategy in ("fedavg", "fedprox"):
        return weighted_mean(vecs, p)
    if cfg.strategy == "fednova":
        taus = [effective_steps(u.steps, cfg.momentum) for u in updates]
        dirs = [(global_params - v) / t if t > 0 else np.zeros_like(v) for v, t in zip(vecs, taus)]
        tau_eff = sum(pk * t for pk, t in zip(p, taus))
        return global_params - tau_eff * weighted_mean(dirs, p)
    if cfg.strategy == "fedopt":
        server = server if server is not None else ServerState()
        delta = weighted_mean(vecs, p) - global_params
        if server.velocity is None:
            server.velocity = np.zeros_like(global_params)
        server.velocity = cfg.server_momentum * server.velocity + delta
        return global_params + cfg.server_lr * server.velocity
    raise ParameterError(f"unknown strategy {cfg.strategy!r}")


def sample_clients(num_clients: int, rate: float, rng: Rng) -> list[int]:
    m = max(1, math.ceil(rate * num_clients - 1e-12))
    if m >= num_clients:
        return list(range(num_clients))
    return sorted(int(k) for k in rng.generator().choice(num_clients, size=m, replace=False))


def federated_calibration(extractor: MlpExtractor, train: Dataset, partition: Partition, lam: float,
                          ledger: metrics.CostLedger | None = None, bytes_per_param: int = 4) -> CalibratedHead:
    """Every client uploads its statistics; the server solves for the head."""
    stats = []
    for k, idx in enumerate(partition.assignments):
        s = client_stats(extractor, train.features[idx], train.labels[idx], train.num_classes)
        stats.append(s)
        if ledger is not None:
            l, c = s.feature_dim, s.num_classes
            nbytes = payload_nbytes(s) // 8 * bytes_per_param
            ledger.add_client(k, nbytes, metrics.cost_ffc_flops(l, c, [s.count])[0])
    cal = server_solve(stats, lam)
    if ledger is not None:
        ledger.add_server(metrics.cost_ffc_flops(cal.weights.shape[1], cal.weights.shape[0], [])[1])
    return cal


def _evaluate(extractor, head, test: Dataset) -> float:
    return metrics.accuracy(extractor, head, test.features, test.labels)


def run(train: Dataset, test: Dataset, partition: Partition, cfg: FedConfig, head_spec: HeadSpec,
        dims, rng: Rng) -> RunResult:
    """Run ``cfg.rounds`` federated rounds, then optionally calibrate the head."""
    cfg.validate()
    partition.check(len(train))
    dims = list(dims)
    if dims[0] != train.dim:
        raise ParameterError(f"extractor input dim {dims[0]} does not match data dim {train.dim}")
    if cfg.calibration == "every" and head_spec.kind == "trainable":
        raise ParameterError("periodic calibration needs a fixed head")
    c = train.num_classes
    extractor = MlpExtractor.init(dims, rng.child(STREAM_INIT))
    head = head_spec.build(c, dims[-1], rng.child(STREAM_HEAD))
    ledger = metrics.CostLedger("ffc" if head.fixed else "fedavg", cfg.bytes_per_param)
    server = ServerState()
    k_total = partition.num_clients
    reports: list[RoundReport] = []
    calibrations: list[dict] = []

    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for r in range(cfg.rounds):
            lr = lr_schedule(cfg.schedule, r, cfg.rounds, cfg.lr, cfg.milestones, cfg.gamma)
            chosen = sample_clients(k_total, cfg.participation, rng.child(STREAM_SAMPLE, r))
            before = ledger.totals()

            def job(k):
                idx = partition.assignments[k]
                try:
                    return local_train(extractor, head, train.features[idx], train.labels[idx], cfg, lr,
                                       rng.child(STREAM_TRAIN, r, k), client=k)
                except HyperFedError as exc:
                    raise type(exc)(f"round {r}, client {k}: {exc}") from exc

            updates = list(pool.map(job, chosen)) if pool else [job(k) for k in chosen]

            align = None
            if len(updates) >= 2:
                align = metrics.classifier_alignment([u.head for u in updates])

            global_vec = flatten(trainable_params(extractor, head))
            assign(trainable_params(extractor, head), aggregate(updates, global_vec, cfg, server))

            l = dims[-1]
            for u in updates:
                if head.fixed:
                    ledger.add_client(u.client, 0, 0)
                else:
                    ledger.add_client(u.client, metrics.cost_classifier_comm("fedavg", l, c, 1, cfg.bytes_per_param),
                                      metrics.cost_head_training_flops(l, c, u.seen, u.steps))
            if not head.fixed:
                ledger.add_server(2 * len(updates) * l * c)

            calibrated = False
            if cfg.calibration == "every" and (r + 1) % cfg.calibrate_every == 0 and r + 1 < cfg.rounds:
                cal = federated_calibration(extractor, train, partition, cfg.lam, ledger, cfg.bytes_per_param)
                head = cal.to_head()
                calibrated = True
                calibrations.append({"round": r, "lambda": cal.lam, "regularized": cal.regularized})

            after = ledger.totals()
            seen = sum(u.seen for u in updates)
            reports.append(RoundReport(
                round=r,
                lr=lr,
                test_accuracy=_evaluate(extractor, head, test),
                train_loss=sum(u.loss_sum for u in updates) / seen if seen else float("nan"),
                cosine=None if align is None else align.cosine,
                norm_diff=None if align is None else align.norm_diff,
                clients=chosen,
                comm_bytes=after["comm_bytes"] - before["comm_bytes"],
                client_flops=after["client_flops"] - before["client_flops"],
                server_flops=after["server_flops"] - before["server_flops"],
                calibrated=calibrated,
            ))
    finally:
        if pool:
            pool.shutdown()

    trained_head = head
    acc_before = _evaluate(extractor, head, test)
    acc_after = None
    if cfg.calibration != "off":
        cal = federated_calibration(extractor, train, partition, cfg.lam, ledger, cfg.bytes_per_param)
        head = cal.to_head()
        acc_after = _evaluate(extractor, head, test)
        calibrations.append({"round": cfg.rounds, "lambda": cal.lam, "regularized": cal.regularized})
    return RunResult(reports, extractor, head, trained_head, acc_before, acc_after, ledger, calibrations)


def train_centralized(train: Dataset, cfg: FedConfig, head_spec: HeadSpec, dims, rng: Rng):
    """Plain SGD on the pooled data, round by round, with the same seeding as ``run``.

    Equivalent to a one-client federated run; used to check the federated plumbing.
    """
    extractor = MlpExtractor.init(dims, rng.child(STREAM_INIT))
    head = head_spec.build(train.num_classes, dims[-1], rng.child(STREAM_HEAD))
    last = None
    for r in range(cfg.rounds):
        lr = lr_schedule(cfg.schedule, r, cfg.rounds, cfg.lr, cfg.milestones, cfg.gamma)
        last = local_train(extractor, head, train.features, train.labels, cfg, lr, rng.child(STREAM_TRAIN, r, 0))
        assign(trainable_params(extractor, head), last.params)
    return extractor, head, (last.loss_sum / last.seen if last and last.seen else float("nan"))
