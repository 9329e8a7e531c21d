"""MLP feature extractor, linear heads, losses and hand-written backprop."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, FormatError, InputError, ParameterError, ShapeError
from .numerics import Rng, orthonormal_rows

NORM_EPS = 1e-12

LOSSES = ("mse", "ce")


@dataclass
class MlpExtractor:
    """Fully connected ReLU network; the last layer is linear and emits the feature."""

    dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.dims) < 2:
            raise ParameterError("extractor needs an input and a feature dimension")
        if len(self.weights) != len(self.dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("one weight matrix and bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[i + 1], self.dims[i]) or b.shape != (self.dims[i + 1],):
                raise ShapeError(f"layer {i}: weight {w.shape}, bias {b.shape} vs dims {self.dims}")

    @classmethod
    def init(cls, dims, rng: Rng) -> "MlpExtractor":
        """He-normal weights, zero biases."""
        dims = [int(d) for d in dims]
        gen = rng.generator()
        weights = [gen.standard_normal((o, i)) * math.sqrt(2.0 / i) for i, o in zip(dims[:-1], dims[1:])]
        biases = [np.zeros(o) for o in dims[1:]]
        return cls(dims, weights, biases)

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def feature_dim(self) -> int:
        return self.dims[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def unflatten(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_params(),):
            raise ShapeError(f"expected {self.num_params()} parameters, got {vec.shape}")
        pos = 0
        for p in self.params():
            p[...] = vec[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    def copy(self) -> "MlpExtractor":
        return MlpExtractor(list(self.dims), [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def features(self, x) -> np.ndarray:
        """Raw (unnormalized) features for a batch."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h


@dataclass
class ClassifierHead:
    weights: np.ndarray
    fixed: bool = False
    normalize_features: bool = False
    tau: float = 1.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError("head weights must be C x l")
        if not self.tau > 0:
            raise ParameterError("tau must be positive")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weights.copy(), self.fixed, self.normalize_features, self.tau)

    @classmethod
    def hyperspherical(cls, c: int, l: int, rng: Rng, method: str = "qr", tau: float = 1.0) -> "ClassifierHead":
        """Fixed unit-norm head on normalized features.

        ``qr`` gives orthonormal rows; ``tammes`` spreads the rows apart by
        gradient descent on the sphere (rows are then not orthogonal).
        """
        if c > l:
            raise CapacityError(f"an orthonormal head needs l >= C (got C={c}, l={l})")
        if method == "qr":
            w = orthonormal_rows(c, l, rng)
        elif method == "tammes":
            w = tammes_rows(c, l, rng)
        else:
            raise ParameterError(f"unknown hypersphere construction {method!r}")
        return cls(w, fixed=True, normalize_features=True, tau=tau)

    @classmethod
    def random(cls, c: int, l: int, rng: Rng, fixed: bool = False, normalize_features: bool = False,
               tau: float = 1.0) -> "ClassifierHead":
        w = rng.generator().standard_normal((c, l)) * math.sqrt(2.0 / l)
        return cls(w, fixed=fixed, normalize_features=normalize_features, tau=tau)


def tammes_rows(c: int, l: int, rng: Rng, steps: int = 10_000, lr: float = 0.1, momentum: float = 0.9) -> np.ndarray:
    """Unit rows pushed apart by minimizing each row's largest cosine to any other row."""
    w = rng.generator().standard_normal((c, l))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    if c == 1:
        return w
    vel = np.zeros_like(w)
    rows = np.arange(c)
    for _ in range(steps):
        sim = w @ w.T - 2.0 * np.eye(c)
        nearest = np.argmax(sim, axis=1)
        grad = np.zeros_like(w)
        grad += w[nearest]
        np.add.at(grad, nearest, w[rows])
        grad /= c
        vel = momentum * vel + grad
        w = w - lr * vel
        w /= np.linalg.norm(w, axis=1, keepdims=True)
    return w


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list[np.ndarray]
    acts: list[np.ndarray]
    z: np.ndarray
    norm: np.ndarray  # guarded norms, one per row
    zt: np.ndarray  # features as fed to the head
    logits: np.ndarray
    single: bool = False


def forward(model: MlpExtractor, head: ClassifierHead, x) -> ForwardTrace:
    """Forward pass for one row or a batch; ``logits = tau * W z~``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.ndim != 2 or xb.shape[1] != model.in_dim:
        raise InputError(f"expected input rows of length {model.in_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(xb)):
        raise InputError("non-finite input")
    if head.feature_dim != model.feature_dim:
        raise ShapeError(f"head expects l={head.feature_dim}, extractor emits {model.feature_dim}")
    pre, acts = [], [xb]
    h = xb
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = h @ w.T + b
        pre.append(a)
        h = np.maximum(a, 0.0) if i < last else a
        acts.append(h)
    z = h
    if head.normalize_features:
        norm = np.maximum(np.linalg.norm(z, axis=1), NORM_EPS)
        zt = z / norm[:, None]
    else:
        norm = np.ones(len(z))
        zt = z
    logits = head.tau * (zt @ head.weights.T)
    return ForwardTrace(xb, pre, acts, z, norm, zt, logits, single)


def normalize_rows(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return z / np.maximum(np.linalg.norm(z, axis=1), NORM_EPS)[:, None]


def _one_hot(y, c: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.min() < 0 or y.max() >= c:
        raise ShapeError(f"labels must lie in [0, {c})")
    out = np.zeros((len(y), c))
    out[np.arange(len(y)), y] = 1.0
    return out


def loss_mse(logits, y):
    """(1/C) * ||logits - one_hot(y)||^2, per row."""
    o = np.asarray(logits, dtype=np.float64)
    ob = np.atleast_2d(o)
    per = ((ob - _one_hot(y, ob.shape[1])) ** 2).sum(axis=1) / ob.shape[1]
    return float(per[0]) if o.ndim == 1 else per


def _log_softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def loss_ce(logits, y, tau: float = 1.0):
    """-log softmax(tau * logits)[y], per row."""
    o = np.asarray(logits, dtype=np.float64)
    ob = np.atleast_2d(o)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.min() < 0 or y.max() >= ob.shape[1]:
        raise ShapeError(f"labels must lie in [0, {ob.shape[1]})")
    per = -_log_softmax(tau * ob)[np.arange(len(y)), y]
    return float(per[0]) if o.ndim == 1 else per


def batch_loss(logits: np.ndarray, y, loss: str) -> float:
    if loss == "mse":
        return float(np.mean(loss_mse(np.atleast_2d(logits), y)))
    if loss == "ce":
        return float(np.mean(loss_ce(np.atleast_2d(logits), y)))
    raise ParameterError(f"unknown loss {loss!r}")


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: np.ndarray | None = None

    def as_list(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        if self.head is not None:
            out.append(self.head)
        return out


def backward(trace: ForwardTrace, model: MlpExtractor, head: ClassifierHead, y, loss: str) -> Gradients:
    """Gradients of the batch-mean loss. Head gradients only for a trainable head.

    The logits already carry the head's tau, so CE here is applied with tau=1.
    """
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n, c = trace.logits.shape
    if len(y) != n:
        raise ShapeError("one label per traced row")
    onehot = _one_hot(y, c)
    if loss == "mse":
        g_o = (2.0 / c) * (trace.logits - onehot)
    elif loss == "ce":
        s = trace.logits - trace.logits.max(axis=1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=1, keepdims=True)
        g_o = p - onehot
    else:
        raise ParameterError(f"unknown loss {loss!r}")
    g_o /= n

    head_grad = None if head.fixed else head.tau * (g_o.T @ trace.zt)
    g_zt = head.tau * (g_o @ head.weights)
    if head.normalize_features:
        # d(z/r)/dz = (I - z~ z~^T)/r above the guard, I/eps below it
        radial = (g_zt * trace.zt).sum(axis=1, keepdims=True)
        live = (np.linalg.norm(trace.z, axis=1) > NORM_EPS)[:, None]
        g = np.where(live, g_zt - trace.zt * radial, g_zt) / trace.norm[:, None]
    else:
        g = g_zt

    n_layers = len(model.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            g = g * (trace.pre[i] > 0)
        gw[i] = g.T @ trace.acts[i]
        gb[i] = g.sum(axis=0)
        if i:
            g = g @ model.weights[i]
    return Gradients(gw, gb, head_grad)


def trainable_params(model: MlpExtractor, head: ClassifierHead) -> list[np.ndarray]:
    """Live references to every array SGD updates, in a fixed order."""
    ps = model.params()
    if not head.fixed:
        ps.append(head.weights)
    return ps


def flatten(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays])


def assign(arrays: list[np.ndarray], vec: np.ndarray) -> None:
    pos = 0
    for a in arrays:
        a[...] = vec[pos : pos + a.size].reshape(a.shape)
        pos += a.size
    if pos != len(vec):
        raise ShapeError(f"vector has {len(vec)} entries, parameters need {pos}")


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float, momentum: float,
             weight_decay: float, state: list[np.ndarray] | None) -> list[np.ndarray]:
    """In-place SGD with heavy-ball momentum and L2 weight decay; returns the new state.

    v <- momentum * v + g + weight_decay * p;  p <- p - lr * v
    """
    if len(params) != len(grads):
        raise ShapeError("one gradient per parameter")
    if state is None:
        state = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"sgd_step: shape mismatch {p.shape} / {g.shape} / {v.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return state


def lr_schedule(kind: str, round: int, total: int, base_lr: float, milestones=(), gamma: float = 0.1) -> float:
    if kind == "cosine":
        return base_lr * (1.0 + math.cos(math.pi * round / total)) / 2.0
    if kind == "multistep":
        passed = sum(1 for m in milestones if round >= m)
        return base_lr * gamma**passed
    if kind == "constant":
        return base_lr
    raise ParameterError(f"unknown schedule {kind!r}")


def predict(logits) -> np.ndarray | int:
    """Argmax with ties going to the lowest index."""
    o = np.asarray(logits, dtype=np.float64)
    if o.ndim == 1:
        return int(np.argmax(o))
    return np.argmax(o, axis=1)


# Checkpoint layout, little endian:
#   4s magic "HFCK" | u32 version | u32 n_layers | u32 dims[n_layers + 1]
#   u32 C | u32 l | u8 fixed | u8 normalize | u16 reserved | f64 tau
#   per layer: f64 W[out][in], f64 b[out] | f64 head[C][l]
CKPT_MAGIC = b"HFCK"
CKPT_VERSION = 1


def save_checkpoint(path, model: MlpExtractor, head: ClassifierHead) -> None:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(model.weights))]
    parts.append(struct.pack(f"<{len(model.dims)}I", *model.dims))
    parts.append(struct.pack("<IIBBHd", head.num_classes, head.feature_dim, head.fixed,
                             head.normalize_features, 0, head.tau))
    for w, b in zip(model.weights, model.biases):
        parts += [w.astype("<f8").tobytes(), b.astype("<f8").tobytes()]
    parts.append(head.weights.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[MlpExtractor, ClassifierHead]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint", offset=0)
    try:
        version, n_layers = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
        pos = 12
        dims = list(struct.unpack_from(f"<{n_layers + 1}I", raw, pos))
        pos += 4 * (n_layers + 1)
        c, l, fixed, normalize, _, tau = struct.unpack_from("<IIBBHd", raw, pos)
        pos += struct.calcsize("<IIBBHd")

        def take(shape):
            nonlocal pos
            count = int(np.prod(shape))
            if pos + 8 * count > len(raw):
                raise FormatError(f"{path}: truncated checkpoint", offset=len(raw))
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
            return arr

        weights, biases = [], []
        for i in range(n_layers):
            weights.append(take((dims[i + 1], dims[i])))
            biases.append(take((dims[i + 1],)))
        head_w = take((c, l))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint header ({exc})", offset=len(raw)) from None
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes", offset=pos)
    return MlpExtractor(dims, weights, biases), ClassifierHead(head_w, bool(fixed), bool(normalize), tau)
