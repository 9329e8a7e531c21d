"""Experiment drivers behind the CLI: run, sweep and post-hoc calibrate."""

from __future__ import annotations

import csv
import json
import logging
import statistics
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np
import yaml

from . import metrics
from .calibration import client_stats, server_solve
from .config import RunConfig, parse_config, preset_overrides
from .data import Dataset, Partition, load_idx, make_synthetic, partition_dirichlet, stratified_split
from .engine import RunResult, federated_calibration, run
from .errors import CheckpointError, HyperFedError
from .model import load_checkpoint, save_checkpoint
from .numerics import Rng

log = logging.getLogger(__name__)

STREAM_DATA = 1
STREAM_TEST_SPLIT = 2
STREAM_PARTITION = 3
STREAM_RUN = 4
STREAM_VALIDATION = 5

VALIDATION_FRACTION = 0.15

SUMMARY_FIELDS = [
    "seed", "strategy", "alpha", "head", "loss", "accuracy_before", "accuracy_after",
    "cosine_final", "norm_diff_final", "comm_bytes", "client_flops", "server_flops",
]


@dataclass
class Workload:
    train: Dataset
    test: Dataset
    validation: Dataset | None
    partition: Partition


def build_workload(cfg: RunConfig) -> Workload:
    """Data, splits and partition; depends only on the seed and data/partition sections."""
    rng = Rng(cfg.seed)
    d = cfg.data
    if d.source == "synthetic":
        full = make_synthetic(d.classes, d.dim, d.per_class, d.spread, rng.child(STREAM_DATA))
        train, test = stratified_split(full, d.test_fraction, rng.child(STREAM_TEST_SPLIT))
    else:
        train = load_idx(d.train_images, d.train_labels, d.num_classes)
        test = load_idx(d.test_images, d.test_labels, d.num_classes)
    validation = None
    if d.validation:
        train, validation = stratified_split(train, VALIDATION_FRACTION, rng.child(STREAM_VALIDATION))
    partition = partition_dirichlet(train, cfg.partition.clients, cfg.partition.alpha, rng.child(STREAM_PARTITION))
    return Workload(train, test, validation, partition)


def model_dims(cfg: RunConfig, wl: Workload) -> list[int]:
    return [wl.train.dim, *cfg.model.hidden, cfg.model.feature_dim]


class RunLog:
    """Append-only JSON-lines log, one record per line, no timestamps."""

    def __init__(self, path: Path):
        self.path = path
        self.path.write_text("")

    def write(self, kind: str, payload: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps({"kind": kind, **payload}, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def summarize(cfg: RunConfig, result: RunResult) -> dict:
    finals = [r for r in result.reports if r.cosine is not None]
    totals = result.ledger.totals()
    return {
        "seed": cfg.seed,
        "strategy": cfg.train.strategy,
        "alpha": cfg.partition.alpha,
        "head": cfg.head.kind,
        "loss": cfg.train.loss,
        "accuracy_before": result.accuracy_before,
        "accuracy_after": result.accuracy_after,
        "cosine_final": finals[-1].cosine if finals else None,
        "norm_diff_final": finals[-1].norm_diff if finals else None,
        "comm_bytes": totals["comm_bytes"],
        "client_flops": totals["client_flops"],
        "server_flops": totals["server_flops"],
    }


def execute(cfg: RunConfig, out_dir=None) -> tuple[dict, RunResult]:
    """Run one configured experiment and write its artifacts."""
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    for w in cfg.warnings:
        log.warning(w)
    runlog = RunLog(out / "run.jsonl")
    runlog.write("config", {"config": cfg.to_dict(), "warnings": list(cfg.warnings)})

    wl = build_workload(cfg)
    dims = model_dims(cfg, wl)
    result = run(wl.train, wl.test, wl.partition, cfg.fed_config(), cfg.head_spec(), dims,
                 Rng(cfg.seed).child(STREAM_RUN))
    for rep in result.reports:
        runlog.write("round", rep.to_dict())
    for cal in result.calibrations:
        runlog.write("calibration", {"source": "run", **cal})

    save_checkpoint(out / "final.ckpt", result.extractor, result.trained_head)
    if result.accuracy_after is not None:
        save_checkpoint(out / "calibrated.ckpt", result.extractor, result.head)

    for lam in cfg.calibration.lambdas:
        cal = federated_calibration(result.extractor, wl.train, wl.partition, lam)
        acc = metrics.accuracy(result.extractor, cal.to_head(), wl.test.features, wl.test.labels)
        runlog.write("calibration", {"source": "lambda_grid", "lambda": lam, "regularized": cal.regularized,
                                     "test_accuracy": acc})

    if cfg.output.dump_features:
        clients = np.empty(len(wl.train), dtype=np.int64)
        for k, idx in enumerate(wl.partition.assignments):
            clients[idx] = k
        name = "features.bin" if cfg.output.dump_binary else "features.txt"
        metrics.dump_features(result.extractor, wl.train.features, wl.train.labels, clients, out / name,
                              wl.train.num_classes, wl.partition.num_clients, binary=cfg.output.dump_binary)

    summary = summarize(cfg, result)
    final = {**summary, "ledger": result.ledger.totals()}
    if wl.validation is not None:
        final["validation_accuracy"] = metrics.accuracy(result.extractor, result.head, wl.validation.features,
                                                        wl.validation.labels)
    runlog.write("final", final)
    with (out / "summary.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        writer.writerow(summary)
    return summary, result


def calibrate_checkpoint(ckpt, cfg: RunConfig, lambdas, out_dir=None) -> list[dict]:
    """Closed-form recalibration of a saved model on the configured clients' data."""
    extractor, head = load_checkpoint(ckpt)
    wl = build_workload(cfg)
    if extractor.in_dim != wl.train.dim:
        raise CheckpointError(f"checkpoint expects inputs of dim {extractor.in_dim}, data has {wl.train.dim}")
    if head.num_classes != wl.train.num_classes:
        raise CheckpointError(f"checkpoint head has {head.num_classes} classes, data has {wl.train.num_classes}")
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    before = metrics.accuracy(extractor, head, wl.test.features, wl.test.labels)
    stats = [client_stats(extractor, wl.train.features[idx], wl.train.labels[idx], wl.train.num_classes)
             for idx in wl.partition.assignments]
    rows = []
    runlog = RunLog(out / "calibrate.jsonl")
    runlog.write("config", {"checkpoint": str(ckpt), "lambdas": list(lambdas), "config": cfg.to_dict()})
    for lam in lambdas:
        cal = server_solve(stats, lam)
        new_head = cal.to_head()
        after = metrics.accuracy(extractor, new_head, wl.test.features, wl.test.labels)
        name = "calibrated.ckpt" if len(lambdas) == 1 else f"calibrated_lambda_{lam:g}.ckpt"
        save_checkpoint(out / name, extractor, new_head)
        row = {"lambda": lam, "accuracy_before": before, "accuracy_after": after,
               "delta": after - before, "regularized": cal.regularized, "checkpoint": name}
        runlog.write("calibration", row)
        rows.append(row)
    return rows


AXIS_KEYS = {"alpha": "partition.alpha", "seed": "seed", "strategy": "train.strategy"}


def parse_axis(spec: str) -> tuple[str, list]:
    """``name=v1,v2`` -> (name, [values]) with YAML scalar parsing of each value."""
    if "=" not in spec:
        raise ValueError(f"axis must look like name=v1,v2 (got {spec!r})")
    name, values = spec.split("=", 1)
    return name.strip(), [yaml.safe_load(v.strip()) for v in values.split(",") if v.strip()]


def sweep(raw: dict, axes: list[tuple[str, list]], out_dir) -> tuple[list[dict], list[dict]]:
    """Run the cross product of axis values; failed cells are recorded and skipped.

    Returns (per-run rows, per-cell comparison rows). The comparison averages
    over the ``seed`` axis and reports each cell's delta to the base cell, the
    one taking every axis's first value.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [n for n, _ in axes]
    rows = []
    for values in product(*[v for _, v in axes]):
        cell = dict(zip(names, values))
        tag = "_".join(f"{n}-{v}" for n, v in cell.items())
        row = {**{f"axis_{n}": v for n, v in cell.items()}, "status": "ok"}
        try:
            overrides = {}
            base_cfg = parse_config(raw)
            for n, v in cell.items():
                if n == "method":
                    overrides.update(preset_overrides(base_cfg, str(v)))
                else:
                    overrides[AXIS_KEYS.get(n, n)] = v
            cfg = parse_config(raw, overrides)
            summary, _ = execute(cfg, out / tag)
            row.update(summary)
        except HyperFedError as exc:
            log.error("sweep cell %s failed: %s", tag, exc)
            row.update(status="failed", error=str(exc))
        rows.append(row)

    cell_axes = [n for n in names if n != "seed"]
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[f"axis_{n}"] for n in cell_axes), []).append(row)
    comparison = []
    for key, members in groups.items():
        ok = [m for m in members if m["status"] == "ok"]
        final_acc = [m["accuracy_after"] if m["accuracy_after"] is not None else m["accuracy_before"] for m in ok]
        comparison.append({
            **{f"axis_{n}": v for n, v in zip(cell_axes, key)},
            "runs": len(members),
            "failed": len(members) - len(ok),
            "accuracy_mean": statistics.fmean(final_acc) if final_acc else None,
            "accuracy_std": statistics.stdev(final_acc) if len(final_acc) > 1 else 0.0 if final_acc else None,
        })
    base = comparison[0]["accuracy_mean"] if comparison else None
    for row in comparison:
        if base is None or row["accuracy_mean"] is None:
            row["delta_vs_base"] = None
        else:
            delta = row["accuracy_mean"] - base
            row["delta_vs_base"] = f"{'↑' if delta > 0 else '↓' if delta < 0 else '='} {abs(delta):.4f}"

    _write_csv(out / "runs.csv", rows)
    _write_csv(out / "comparison.csv", comparison)
    return rows, comparison


def _write_csv(path: Path, rows: list[dict]) -> None:
    fields: list[str] = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
