"""Classifier-disparity diagnostics, accuracy and the analytic cost ledger."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import ParameterError, ShapeError
from .model import ClassifierHead, MlpExtractor, forward, normalize_rows, predict

BYTES_PER_PARAM = 4

TRAINABLE = "fedavg"
FFC = "ffc"


@dataclass
class AlignmentStats:
    cosine: float
    norm_diff: float
    per_class_cosine: np.ndarray
    per_class_norm_diff: np.ndarray
    skipped: int = 0


def classifier_alignment(heads) -> AlignmentStats:
    """Mean same-class cosine and mean |norm difference| over unordered client pairs.

    Pairs with a zero-norm row are left out of the cosine mean and counted in
    ``skipped``; they still enter the norm difference.
    """
    w = np.stack([np.asarray(h, dtype=np.float64) for h in heads])
    if w.ndim != 3:
        raise ShapeError("expected K matrices of identical C x l shape")
    k, c, _ = w.shape
    if k < 2:
        raise ParameterError("alignment needs at least two clients")
    norms = np.sqrt((w * w).sum(axis=2))  # K x C
    i, j = np.triu_indices(k, 1)
    dots = (w[i] * w[j]).sum(axis=2)  # pairs x C
    denom = norms[i] * norms[j]
    valid = denom > 0
    cos = np.clip(np.divide(dots, denom, out=np.zeros_like(dots), where=valid), -1.0, 1.0)
    diff = np.abs(norms[i] - norms[j])
    # class-major sequential sums, the same order as the reference loop
    cos_cm, valid_cm, diff_cm = cos.T, valid.T, diff.T
    n_valid = int(valid.sum())
    per_class_cos = np.array(
        [cos_cm[ci][valid_cm[ci]].mean() if valid_cm[ci].any() else np.nan for ci in range(c)]
    )
    return AlignmentStats(
        cosine=float(np.cumsum(cos_cm[valid_cm])[-1] / n_valid) if n_valid else float("nan"),
        norm_diff=float(np.cumsum(diff_cm.ravel())[-1] / diff.size),
        per_class_cosine=per_class_cos,
        per_class_norm_diff=diff.mean(axis=0),
        skipped=int((~valid).sum()),
    )


def classifier_alignment_reference(heads) -> tuple[float, float, int]:
    """Plain double loop over (class, client pair); used as a test oracle."""
    heads = [np.asarray(h, dtype=np.float64) for h in heads]
    cos_sum, cos_n, diff_sum, diff_n, skipped = 0.0, 0, 0.0, 0, 0
    for c in range(heads[0].shape[0]):
        for a, b in combinations(range(len(heads)), 2):
            wa, wb = heads[a][c], heads[b][c]
            na, nb = float(np.sqrt(np.sum(wa * wa))), float(np.sqrt(np.sum(wb * wb)))
            diff_sum += abs(na - nb)
            diff_n += 1
            if na == 0 or nb == 0:
                skipped += 1
                continue
            cos_sum += min(1.0, max(-1.0, float(np.sum(wa * wb)) / (na * nb)))
            cos_n += 1
    return cos_sum / cos_n, diff_sum / diff_n, skipped


def accuracy(model: MlpExtractor, head: ClassifierHead, features, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ParameterError("accuracy needs a nonempty evaluation set")
    preds = predict(forward(model, head, features).logits)
    return float(np.mean(preds == labels))


def cost_classifier_comm(strategy: str, l: int, c: int, rounds: int = 1, bytes_per_param: int = BYTES_PER_PARAM) -> int:
    """Classifier-related bytes exchanged by one client.

    A trainable head moves ``l*C`` parameters down and up every round; the
    calibration path uploads ``l*(l+C)`` parameters once and nothing else,
    because a fixed head never needs to be exchanged.
    """
    if l < 1 or c < 1 or rounds < 0:
        raise ParameterError("dimensions must be positive and rounds nonnegative")
    if strategy == TRAINABLE:
        return l * c * bytes_per_param * 2 * rounds
    if strategy == FFC:
        return l * (l + c) * bytes_per_param
    raise ParameterError(f"unknown cost strategy {strategy!r}")


def cost_ffc_flops(l: int, c: int, dataset_sizes) -> tuple[int, float]:
    """(client FLOPs summed over clients, server solve FLOPs)."""
    sizes = [int(s) for s in dataset_sizes]
    if l < 1 or c < 1 or any(s < 0 for s in sizes):
        raise ParameterError("dimensions must be positive and sizes nonnegative")
    client = sum(2 * l * s * (l + c) for s in sizes)
    server = 2.0 / 3.0 * l**3 + 2.0 * l * l * c
    return client, server


def cost_head_training_flops(l: int, c: int, samples: int, steps: int) -> int:
    """Trainable-head training FLOPs on one client, forward excluded.

    Counts the weight-gradient outer products (2*l*C per sample) and the
    momentum SGD update (4*l*C per step: two multiply-adds).
    """
    return 2 * l * c * samples + 4 * l * c * steps


@dataclass
class CostLedger:
    strategy: str
    bytes_per_param: int = BYTES_PER_PARAM
    client_bytes: dict[int, int] = field(default_factory=dict)
    client_flops: dict[int, int] = field(default_factory=dict)
    server_flops: float = 0.0

    def add_client(self, client: int, nbytes: int = 0, flops: int = 0) -> None:
        if nbytes < 0 or flops < 0:
            raise ParameterError("ledger counters only grow")
        self.client_bytes[client] = self.client_bytes.get(client, 0) + int(nbytes)
        self.client_flops[client] = self.client_flops.get(client, 0) + int(flops)

    def add_server(self, flops: float) -> None:
        if flops < 0:
            raise ParameterError("ledger counters only grow")
        self.server_flops += float(flops)

    def totals(self) -> dict:
        return {
            "strategy": self.strategy,
            "comm_bytes": int(sum(self.client_bytes.values())),
            "comm_bytes_max_client": int(max(self.client_bytes.values(), default=0)),
            "client_flops": int(sum(self.client_flops.values())),
            "server_flops": self.server_flops,
        }


# Feature dump. Text: header "l C K", then "client label f_1 ... f_l" per row,
# floats in repr form so they read back exactly. Binary (little endian):
# 4s "HFFD" | u32 l | u32 C | u32 K | u32 N | N x (u32 client, u32 label, f64[l]).
DUMP_MAGIC = b"HFFD"


def dump_features(model: MlpExtractor, features, labels, clients, path, num_classes: int,
                  num_clients: int, binary: bool = False) -> np.ndarray:
    """Write normalized features with their labels and client ids; returns the matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    clients = np.asarray(clients, dtype=np.int64)
    if len(labels) == 0:
        raise ParameterError("nothing to dump")
    zt = normalize_rows(model.features(features))
    l = zt.shape[1]
    path = Path(path)
    try:
        if binary:
            rec = np.zeros(len(labels), dtype=[("client", "<u4"), ("label", "<u4"), ("z", "<f8", (l,))])
            rec["client"], rec["label"], rec["z"] = clients, labels, zt
            path.write_bytes(DUMP_MAGIC + struct.pack("<IIII", l, num_classes, num_clients, len(labels)) + rec.tobytes())
        else:
            with path.open("w") as fh:
                fh.write(f"{l} {num_classes} {num_clients}\n")
                for k, y, row in zip(clients, labels, zt):
                    fh.write(f"{k} {y} " + " ".join(repr(float(v)) for v in row) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write feature dump to {path}: {exc}") from exc
    return zt


def read_features(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple[int, int, int]]:
    """Inverse of ``dump_features``: (features, labels, clients, (l, C, K))."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == DUMP_MAGIC:
        l, c, k, n = struct.unpack_from("<IIII", raw, 4)
        rec = np.frombuffer(raw, dtype=[("client", "<u4"), ("label", "<u4"), ("z", "<f8", (l,))], count=n, offset=20)
        return rec["z"].astype(np.float64), rec["label"].astype(np.int64), rec["client"].astype(np.int64), (l, c, k)
    lines = raw.decode().splitlines()
    l, c, k = (int(t) for t in lines[0].split())
    rows = [ln.split() for ln in lines[1:]]
    clients = np.array([int(r[0]) for r in rows])
    labels = np.array([int(r[1]) for r in rows])
    z = np.array([[float(t) for t in r[2:]] for r in rows]).reshape(len(rows), l)
    return z, labels, clients, (l, c, k)
