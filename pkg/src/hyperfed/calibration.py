"""Closed-form head calibration from per-client second-moment statistics.

Each client reduces its normalized features ``z`` to ``V = sum z z^T`` (l x l)
and ``U = sum z one_hot(y)^T`` (l x C). The server solves
``(sum V + lam I) X = sum U`` and deploys ``W* = X^T``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError, ShapeError, SingularityError
from .model import ClassifierHead, MlpExtractor, lr_schedule, normalize_rows, sgd_step
from .numerics import Rng, outer_accumulate, solve_spd

LAMBDA_GRID = (0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0)


@dataclass
class CalibStats:
    V: np.ndarray
    U: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, l: int, c: int) -> "CalibStats":
        return cls(np.zeros((l, l)), np.zeros((l, c)), 0)

    @property
    def feature_dim(self) -> int:
        return self.V.shape[0]

    @property
    def num_classes(self) -> int:
        return self.U.shape[1]


@dataclass
class CalibratedHead:
    weights: np.ndarray  # C x l
    lam: float
    regularized: bool = False

    def to_head(self) -> ClassifierHead:
        return ClassifierHead(self.weights.copy(), fixed=True, normalize_features=True, tau=1.0)


def accumulate_stats(z_normalized: np.ndarray, labels, num_classes: int) -> CalibStats:
    """Sum outer products row by row, in the order given."""
    z = np.atleast_2d(np.asarray(z_normalized, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(z):
        raise ShapeError("one label per feature row")
    stats = CalibStats.zeros(z.shape[1], num_classes)
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeError(f"labels must lie in [0, {num_classes})")
    onehot = np.zeros(num_classes)
    for zi, yi in zip(z, labels):
        outer_accumulate(stats.V, zi, zi)
        onehot[yi] = 1.0
        outer_accumulate(stats.U, zi, onehot)
        onehot[yi] = 0.0
    stats.count = len(labels)
    return stats


def client_stats(extractor: MlpExtractor, features, labels, num_classes: int) -> CalibStats:
    """Statistics of one client's data under the frozen extractor."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return CalibStats.zeros(extractor.feature_dim, num_classes)
    z = normalize_rows(extractor.features(features))
    return accumulate_stats(z, labels, num_classes)


def sum_stats(stats) -> CalibStats:
    stats = list(stats)
    if not stats:
        raise ParameterError("no statistics received")
    l, c = stats[0].feature_dim, stats[0].num_classes
    total = CalibStats.zeros(l, c)
    for s in stats:
        if s.V.shape != (l, l) or s.U.shape != (l, c):
            raise ShapeError("clients disagree on statistic shapes")
        total.V += s.V
        total.U += s.U
        total.count += s.count
    return total


def server_solve(stats, lam: float = 0.0, allow_jitter: bool = True) -> CalibratedHead:
    """Closed-form ridge head from statistics summed in the order received."""
    if lam < 0:
        raise ParameterError("lambda must be nonnegative")
    total = sum_stats(stats)
    if total.count < 1:
        raise ParameterError("calibration needs at least one sample")
    a = total.V + lam * np.eye(total.feature_dim)
    # V is symmetric in exact arithmetic; the two triangles agree bit for bit
    # since every outer product z z^T is formed elementwise.
    try:
        sol = solve_spd(a, total.U)
    except SingularityError as exc:
        raise SingularityError(f"feature Gram matrix is singular; use lambda > 0 ({exc})", exc.pivot) from None
    if sol.regularized and not allow_jitter:
        raise SingularityError("feature Gram matrix is rank deficient; use lambda > 0")
    return CalibratedHead(sol.x.T.copy(), lam, sol.regularized)


def local_calibrate(extractor: MlpExtractor, features, labels, num_classes: int, lam: float = 0.0) -> CalibratedHead:
    """Personalized head from one client's own data.

    A client whose Gram matrix is rank deficient gets an error instead of a
    jitter-determined head: it must ask for ``lam > 0`` explicitly.
    """
    if len(labels) == 0:
        raise ParameterError("client has no data")
    return server_solve([client_stats(extractor, features, labels, num_classes)], lam, allow_jitter=False)


def calibration_loss(weights: np.ndarray, z_normalized: np.ndarray, labels) -> float:
    """Mean over samples of (1/C) ||W z - one_hot(y)||^2."""
    z = np.atleast_2d(z_normalized)
    c = weights.shape[0]
    out = z @ weights.T
    out[np.arange(len(z)), np.asarray(labels)] -= 1.0
    return float(np.mean((out**2).sum(axis=1) / c))


def oracle_finetune(extractor: MlpExtractor, features, labels, init_weights: np.ndarray, epochs: int,
                    lr: float, rng: Rng, batch_size: int = 64, momentum: float = 0.9) -> np.ndarray:
    """Fit the head by mini-batch SGD on pooled data with the extractor frozen.

    The step size follows a cosine decay over the epochs so the iterate settles.

    Not a federated procedure: it needs every client's raw data and exists only
    as a reference point for the closed-form head.
    """
    labels = np.asarray(labels, dtype=np.int64)
    z = normalize_rows(extractor.features(features))
    w = np.array(init_weights, dtype=np.float64)
    c = w.shape[0]
    n = len(labels)
    state = None
    for epoch in range(epochs):
        step = lr_schedule("cosine", epoch, epochs, lr)
        order = rng.child(epoch).generator().permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            resid = z[idx] @ w.T
            resid[np.arange(len(idx)), labels[idx]] -= 1.0
            grad = (2.0 / c) * resid.T @ z[idx] / len(idx)
            state = sgd_step([w], [grad], step, momentum, 0.0, state)
    return w


# Upload payload, little endian:
#   4s magic "HFCS" | u32 version | u32 l | u32 C | u64 count | f64 V[l][l] | f64 U[l][C]
STATS_MAGIC = b"HFCS"
STATS_VERSION = 1
STATS_HEADER = struct.Struct("<4sIIIQ")


def serialize_stats(stats: CalibStats) -> bytes:
    head = STATS_HEADER.pack(STATS_MAGIC, STATS_VERSION, stats.feature_dim, stats.num_classes, stats.count)
    return head + stats.V.astype("<f8").tobytes() + stats.U.astype("<f8").tobytes()


def payload_nbytes(stats: CalibStats) -> int:
    """Bytes of matrix data in the upload, excluding the fixed-size header."""
    return len(serialize_stats(stats)) - STATS_HEADER.size


def deserialize_stats(raw: bytes) -> CalibStats:
    if len(raw) < STATS_HEADER.size:
        raise FormatError("calibration payload shorter than its header", offset=len(raw))
    magic, version, l, c, count = STATS_HEADER.unpack_from(raw, 0)
    if magic != STATS_MAGIC:
        raise FormatError("bad calibration payload magic", offset=0)
    if version != STATS_VERSION:
        raise FormatError(f"unsupported calibration payload version {version}", offset=4)
    need = STATS_HEADER.size + 8 * l * (l + c)
    if len(raw) != need:
        raise FormatError(f"calibration payload should be {need} bytes, got {len(raw)}", offset=min(len(raw), need))
    body = np.frombuffer(raw, dtype="<f8", offset=STATS_HEADER.size).astype(np.float64)
    return CalibStats(body[: l * l].reshape(l, l).copy(), body[l * l :].reshape(l, c).copy(), int(count))


def periodic_calibration(train, test, partition, cfg, head_spec, dims, rng: Rng, every: int):
    """Federated run that swaps in the closed-form head every ``every`` rounds and at the end."""
    from dataclasses import replace

    from .engine import run

    if every < 1:
        raise ParameterError("calibration interval must be >= 1")
    return run(train, test, partition, replace(cfg, calibration="every", calibrate_every=every), head_spec, dims, rng)
