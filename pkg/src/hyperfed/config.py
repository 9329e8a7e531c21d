"""Run configuration: YAML schema, strict validation and defaults.

Every section is a dataclass; unknown keys anywhere are rejected so a typo
cannot silently fall back to a default.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .data import IID
from .engine import CALIBRATION_MODES, HEAD_KINDS, STRATEGIES, FedConfig, HeadSpec
from .errors import ConfigError
from .model import LOSSES


@dataclass
class DataConfig:
    source: str = "synthetic"
    classes: int = 10
    dim: int = 64
    per_class: int = 500
    spread: float = 1.0
    test_fraction: float = 0.2
    validation: bool = False
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    num_classes: int = 10


@dataclass
class PartitionConfig:
    clients: int = 10
    alpha: float | str = 0.1


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [64])
    feature_dim: int = 32


@dataclass
class HeadConfig:
    kind: str = "trainable"
    init: str = "qr"
    normalize_features: bool | None = None
    tau: float | None = None


@dataclass
class TrainConfig:
    strategy: str = "fedavg"
    rounds: int = 40
    local_epochs: int = 5
    batch_size: int = 64
    lr: float = 0.05
    schedule: str = "cosine"
    milestones: list[int] = field(default_factory=list)
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    loss: str = "ce"
    mu: float = 0.0
    server_lr: float = 1.0
    server_momentum: float = 0.0
    participation: float = 1.0


@dataclass
class CalibrationConfig:
    mode: str = "off"
    every: int = 10
    lam: float = 0.0
    lambdas: list[float] = field(default_factory=list)


@dataclass
class OutputConfig:
    dir: str = "runs/default"
    dump_features: bool = False
    dump_binary: bool = False
    threads: int = 1
    bytes_per_param: int = 4


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    presets: dict[str, dict] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        """The resolved config as a mapping ``parse_config`` accepts back."""
        out = dataclasses.asdict(self)
        del out["warnings"]
        return out

    def fed_config(self) -> FedConfig:
        t, c = self.train, self.calibration
        return FedConfig(
            strategy=t.strategy, rounds=t.rounds, local_epochs=t.local_epochs, batch_size=t.batch_size,
            lr=t.lr, schedule=t.schedule, milestones=tuple(t.milestones), gamma=t.gamma,
            momentum=t.momentum, weight_decay=t.weight_decay, loss=t.loss, mu=t.mu,
            server_lr=t.server_lr, server_momentum=t.server_momentum, participation=t.participation,
            calibration=c.mode, calibrate_every=c.every if c.mode == "every" else 0, lam=c.lam,
            bytes_per_param=self.output.bytes_per_param, threads=self.output.threads,
        )

    def head_spec(self) -> HeadSpec:
        return HeadSpec(self.head.kind, self.head.init, bool(self.head.normalize_features), float(self.head.tau))


# Built-in method bundles for sweeps; a config's ``presets`` section overrides them.
DEFAULT_PRESETS = {
    "baseline": {
        "head": {"kind": "trainable", "normalize_features": False, "tau": 1.0},
        "train": {"loss": "ce", "lr": 0.05},
        "calibration": {"mode": "off"},
    },
    "hypersphere": {
        "head": {"kind": "fixed-orthonormal", "init": "qr", "normalize_features": True, "tau": 1.0},
        "train": {"loss": "mse", "lr": 1.0},
        "calibration": {"mode": "once"},
    },
}

SECTIONS = {
    "data": DataConfig,
    "partition": PartitionConfig,
    "model": ModelConfig,
    "head": HeadConfig,
    "train": TrainConfig,
    "calibration": CalibrationConfig,
    "output": OutputConfig,
}

KEY_ALIASES = {"calibration.lambda": "calibration.lam"}


def _build(cls, raw: Any, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("expected a mapping", key=where)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        name = KEY_ALIASES.get(f"{where}.{key}", f"{where}.{key}").split(".")[-1]
        if name not in names:
            raise ConfigError(f"unknown key (allowed: {sorted(names)})", key=f"{where}.{key}")
        kwargs[name] = value
    return cls(**kwargs)


def parse_config(raw: dict, overrides: dict | None = None) -> RunConfig:
    """Build and validate a RunConfig from a parsed YAML mapping."""
    raw = copy.deepcopy(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", key="<root>")
    for dotted, value in (overrides or {}).items():
        set_dotted(raw, dotted, value)
    allowed = set(SECTIONS) | {"seed", "presets"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key (allowed: {sorted(allowed)})", key=key)
    cfg = RunConfig(seed=raw.get("seed", 0), presets=raw.get("presets") or {})
    for name, cls in SECTIONS.items():
        setattr(cfg, name, _build(cls, raw.get(name), name))
    validate(cfg)
    return cfg


def set_dotted(raw: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError("cannot override inside a scalar", key=dotted)
    node[parts[-1]] = value


def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(message, key=key)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(cfg: RunConfig) -> None:
    """Check types and cross-field constraints; fill derived defaults in place."""
    _check(_is_int(cfg.seed) and cfg.seed >= 0, "seed", "must be a nonnegative integer")
    d = cfg.data
    _check(d.source in ("synthetic", "idx"), "data.source", "must be 'synthetic' or 'idx'")
    if d.source == "synthetic":
        _check(_is_int(d.classes) and d.classes >= 2, "data.classes", "must be an integer >= 2")
        _check(_is_int(d.dim) and d.dim >= d.classes, "data.dim", "must be an integer >= data.classes")
        _check(_is_int(d.per_class) and d.per_class >= 2, "data.per_class", "must be an integer >= 2")
        _check(_is_num(d.spread) and d.spread >= 0, "data.spread", "must be >= 0")
        _check(_is_num(d.test_fraction) and 0 < d.test_fraction < 1, "data.test_fraction", "must be in (0, 1)")
    else:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            _check(isinstance(getattr(d, key), str), f"data.{key}", "path required for idx data")
        _check(_is_int(d.num_classes) and d.num_classes >= 2, "data.num_classes", "must be an integer >= 2")

    p = cfg.partition
    _check(_is_int(p.clients) and p.clients >= 1, "partition.clients", "must be an integer >= 1")
    if isinstance(p.alpha, str):
        _check(p.alpha.lower() == IID, "partition.alpha", f"must be positive or {IID!r}")
        p.alpha = IID
    else:
        _check(_is_num(p.alpha) and p.alpha > 0, "partition.alpha", f"must be positive or {IID!r}")
        p.alpha = float(p.alpha)

    m = cfg.model
    _check(isinstance(m.hidden, list) and all(_is_int(h) and h >= 1 for h in m.hidden), "model.hidden",
           "must be a list of positive integers")
    _check(_is_int(m.feature_dim) and m.feature_dim >= 1, "model.feature_dim", "must be a positive integer")

    h, t = cfg.head, cfg.train
    _check(h.kind in HEAD_KINDS, "head.kind", f"must be one of {HEAD_KINDS}")
    _check(h.init in ("qr", "tammes"), "head.init", "must be 'qr' or 'tammes'")
    _check(t.loss in LOSSES, "train.loss", f"must be one of {LOSSES}")
    num_classes = d.classes if d.source == "synthetic" else d.num_classes
    if h.kind == "fixed-orthonormal":
        _check(num_classes <= m.feature_dim, "model.feature_dim",
               f"an orthonormal head needs feature_dim >= number of classes ({num_classes})")
        _check(h.normalize_features in (None, True), "head.normalize_features",
               "a hyperspherical head always normalizes features")
        h.normalize_features = True
    elif h.normalize_features is None:
        h.normalize_features = False
    if h.tau is None:
        if t.loss == "ce" and h.kind == "fixed-orthonormal":
            cfg.warnings.append("head.tau unset with CE on a hyperspherical head; using tau=1 (CE is sensitive to it)")
        h.tau = 1.0
    _check(_is_num(h.tau) and h.tau > 0, "head.tau", "must be positive")
    h.tau = float(h.tau)
    if t.loss == "mse" and h.tau != 1.0:
        cfg.warnings.append("tau != 1 with MSE: the calibrated head always uses tau=1")

    _check(t.strategy in STRATEGIES, "train.strategy", f"must be one of {STRATEGIES}")
    _check(t.schedule in ("cosine", "multistep", "constant"), "train.schedule", "must be cosine, multistep or constant")
    for key in ("rounds", "local_epochs"):
        _check(_is_int(getattr(t, key)) and getattr(t, key) >= 0, f"train.{key}", "must be a nonnegative integer")
    _check(_is_int(t.batch_size) and t.batch_size >= 1, "train.batch_size", "must be a positive integer")
    for key in ("lr", "gamma", "weight_decay", "mu", "server_lr"):
        _check(_is_num(getattr(t, key)) and getattr(t, key) >= 0, f"train.{key}", "must be a nonnegative number")
    for key in ("momentum", "server_momentum"):
        _check(_is_num(getattr(t, key)) and 0 <= getattr(t, key) < 1, f"train.{key}", "must lie in [0, 1)")
    _check(_is_num(t.participation) and 0 < t.participation <= 1, "train.participation", "must lie in (0, 1]")
    _check(isinstance(t.milestones, list) and all(_is_int(x) for x in t.milestones), "train.milestones",
           "must be a list of integers")

    c = cfg.calibration
    _check(c.mode in CALIBRATION_MODES, "calibration.mode", f"must be one of {CALIBRATION_MODES}")
    _check(_is_int(c.every) and c.every >= 1, "calibration.every", "must be a positive integer")
    _check(_is_num(c.lam) and c.lam >= 0, "calibration.lambda", "must be nonnegative")
    c.lam = float(c.lam)
    _check(isinstance(c.lambdas, list) and all(_is_num(x) and x >= 0 for x in c.lambdas), "calibration.lambdas",
           "must be a list of nonnegative numbers")
    c.lambdas = [float(x) for x in c.lambdas]
    if c.mode == "every":
        _check(h.kind != "trainable", "calibration.mode", "periodic calibration needs a fixed head")

    o = cfg.output
    _check(isinstance(o.dir, str) and o.dir, "output.dir", "must be a nonempty path")
    _check(_is_int(o.threads) and o.threads >= 1, "output.threads", "must be a positive integer")
    _check(o.bytes_per_param in (2, 4, 8), "output.bytes_per_param", "must be 2, 4 or 8")
    _check(isinstance(cfg.presets, dict), "presets", "must be a mapping of name -> overrides")


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", key=str(path)) from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}", key=str(path)) from None
    return parse_config(raw or {}, overrides)


def reference_path() -> Path:
    return Path(str(resources.files("hyperfed") / "configs" / "reference.yaml"))


def load_reference(overrides: dict | None = None) -> RunConfig:
    return load_config(reference_path(), overrides)


def preset_overrides(cfg: RunConfig, name: str) -> dict:
    """Flatten a named preset into dotted overrides."""
    presets = {**DEFAULT_PRESETS, **cfg.presets}
    if name not in presets:
        raise ConfigError(f"unknown preset (available: {sorted(presets)})", key=f"presets.{name}")
    flat = {}

    def walk(prefix, node):
        for k, v in node.items():
            if isinstance(v, dict):
                walk(f"{prefix}{k}.", v)
            else:
                flat[f"{prefix}{k}"] = v

    walk("", presets[name])
    return flat
