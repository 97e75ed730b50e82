"""Patch validation network and verdict logic.

A fully connected 784-128-64-1 network (ReLU, ReLU, sigmoid) classifies
normalized intensity patches.  Patch cells arrive in [0, 1] with empty
cells at 0.5; the input layer maps them to [-1, 1] so that empty cells
contribute zero activation, which keeps the ReLU units trainable.
Training minimizes binary cross-entropy with Adam; everything is
implemented directly on numpy arrays so inference can run inline with
the event pipeline.  Per-track history is a
15-entry FIFO of boolean classifications: a unanimous full buffer
promotes (all true) or terminates (all false) the track.
"""

from __future__ import annotations

import math
import struct
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
from numba import njit

from .patch import PATCH_SIZE, _patch_normalize_kernel, read_patch_csv

LAYER_DIMS = (784, 128, 64, 1)
MODEL_MAGIC = b"AEMLP"
MODEL_VERSION = 1

VERDICT_CONTINUE = 0
VERDICT_PROMOTE = 1
VERDICT_TERMINATE = 2

EVAL_BUFFER_LEN = 15
DECISION_THRESHOLD = 0.5


@dataclass
class Mlp:
    w1: np.ndarray  # (128, 784)
    b1: np.ndarray
    w2: np.ndarray  # (64, 128)
    b2: np.ndarray
    w3: np.ndarray  # (1, 64)
    b3: np.ndarray

    def params(self) -> List[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    train_fraction: float = 0.9

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must be in (0, 1]")


@dataclass
class TrainReport:
    train_loss: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    wall_seconds: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n")
            for i in range(len(self.train_loss)):
                f.write(
                    f"{i + 1},{self.train_loss[i]:.6f},{self.train_accuracy[i]:.6f},"
                    f"{self.val_loss[i]:.6f},{self.val_accuracy[i]:.6f}\n"
                )


def init(seed: int) -> Mlp:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(LAYER_DIMS, LAYER_DIMS[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        layers.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        layers.append(np.zeros(fan_out))
    return Mlp(*layers)


@njit(cache=True)
def _mlp_forward_kernel(
    w1: np.ndarray, b1: np.ndarray,
    w2: np.ndarray, b2: np.ndarray,
    w3: np.ndarray, b3: np.ndarray,
    x: np.ndarray,
) -> float:
    xc = 2.0 * x - 1.0
    h1 = np.maximum(w1 @ xc + b1, 0.0)
    h2 = np.maximum(w2 @ h1 + b2, 0.0)
    z = w3 @ h2 + b3
    return 1.0 / (1.0 + math.exp(-z[0]))


def forward(model: Mlp, x: np.ndarray) -> float:
    """Probability that a patch shows the target object."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("non-finite classifier input")
    return float(
        _mlp_forward_kernel(model.w1, model.b1, model.w2, model.b2, model.w3, model.b3, x)
    )


def forward_batch(model: Mlp, x: np.ndarray) -> np.ndarray:
    """Vectorized forward pass over a (n, 784) batch."""
    x = 2.0 * x - 1.0
    h1 = np.maximum(x @ model.w1.T + model.b1, 0.0)
    h2 = np.maximum(h1 @ model.w2.T + model.b2, 0.0)
    z = h2 @ model.w3.T + model.b3
    return 1.0 / (1.0 + np.exp(-z[:, 0]))


def bce_loss(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def gradients(model: Mlp, x: np.ndarray, y: np.ndarray) -> List[np.ndarray]:
    """Mean BCE gradients over a batch, same layout as ``Mlp.params``."""
    n = x.shape[0]
    x = 2.0 * x - 1.0
    a1 = x @ model.w1.T + model.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ model.w2.T + model.b2
    h2 = np.maximum(a2, 0.0)
    z = h2 @ model.w3.T + model.b3
    p = 1.0 / (1.0 + np.exp(-z[:, 0]))

    dz = (p - y)[:, None] / n  # BCE + sigmoid
    dw3 = dz.T @ h2
    db3 = dz.sum(axis=0)
    dh2 = dz @ model.w3
    dh2[a2 <= 0.0] = 0.0
    dw2 = dh2.T @ h1
    db2 = dh2.sum(axis=0)
    dh1 = dh2 @ model.w2
    dh1[a1 <= 0.0] = 0.0
    dw1 = dh1.T @ x
    db1 = dh1.sum(axis=0)
    return [dw1, db1, dw2, db2, dw3, db3]


def train(
    x: np.ndarray, y: np.ndarray, config: TrainConfig = None
) -> Tuple[Mlp, TrainReport]:
    """Train from scratch on (n, 784) inputs and binary labels."""
    config = config or TrainConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if (y > 0.5).all() or (y <= 0.5).all():
        raise ValueError("training data must contain both classes")

    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(x))
    n_train = max(1, int(round(config.train_fraction * len(x))))
    train_idx, val_idx = order[:n_train], order[n_train:]
    xt, yt = x[train_idx], y[train_idx]
    xv, yv = x[val_idx], y[val_idx]

    model = init(config.seed)
    params = model.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    report = TrainReport()

    for _ in range(config.epochs):
        perm = rng.permutation(len(xt))
        for start in range(0, len(xt), config.batch_size):
            idx = perm[start : start + config.batch_size]
            grads = gradients(model, xt[idx], yt[idx])
            step += 1
            lr_t = config.learning_rate * (
                math.sqrt(1.0 - config.beta2**step) / (1.0 - config.beta1**step)
            )
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= config.beta1
                mi += (1.0 - config.beta1) * g
                vi *= config.beta2
                vi += (1.0 - config.beta2) * g * g
                p -= lr_t * mi / (np.sqrt(vi) + config.eps)

        pt = forward_batch(model, xt)
        report.train_loss.append(bce_loss(pt, yt))
        report.train_accuracy.append(float(np.mean((pt > DECISION_THRESHOLD) == (yt > 0.5))))
        if len(xv) > 0:
            pv = forward_batch(model, xv)
            report.val_loss.append(bce_loss(pv, yv))
            report.val_accuracy.append(float(np.mean((pv > DECISION_THRESHOLD) == (yv > 0.5))))
        else:
            report.val_loss.append(float("nan"))
            report.val_accuracy.append(float("nan"))

    report.wall_seconds = time.perf_counter() - t0
    return model, report


def save(model: Mlp, path) -> None:
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<HH", MODEL_VERSION, len(LAYER_DIMS)))
        for d in LAYER_DIMS:
            f.write(struct.pack("<I", d))
        for p in model.params():
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load(path) -> Mlp:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise ValueError(f"{path}: bad model magic {magic!r}")
        version, n_dims = struct.unpack("<HH", f.read(4))
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported model version {version}")
        dims = struct.unpack(f"<{n_dims}I", f.read(4 * n_dims))
        if dims != LAYER_DIMS:
            raise ValueError(f"{path}: layer dims {dims} do not match {LAYER_DIMS}")
        payload = f.read()
    n_params = sum(di * do + do for di, do in zip(dims, dims[1:]))
    if len(payload) != 8 * n_params:
        raise ValueError(f"{path}: truncated model file")
    flat = np.frombuffer(payload, dtype="<f8")
    params = []
    offset = 0
    for fan_in, fan_out in zip(dims, dims[1:]):
        params.append(flat[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in).copy())
        offset += fan_out * fan_in
        params.append(flat[offset : offset + fan_out].copy())
        offset += fan_out
    return Mlp(*params)


class EvaluationBuffer:
    """FIFO of the last classification outcomes for one track."""

    def __init__(self, maxlen: int = EVAL_BUFFER_LEN):
        self._buf = deque(maxlen=maxlen)
        self.maxlen = maxlen

    def push(self, is_target: bool) -> None:
        self._buf.append(bool(is_target))

    def __len__(self) -> int:
        return len(self._buf)

    def contents(self) -> List[bool]:
        return list(self._buf)


def verdict(buffer: EvaluationBuffer) -> int:
    """Unanimity rule over a full buffer; anything else continues."""
    if len(buffer) < buffer.maxlen:
        return VERDICT_CONTINUE
    values = buffer.contents()
    if all(values):
        return VERDICT_PROMOTE
    if not any(values):
        return VERDICT_TERMINATE
    return VERDICT_CONTINUE


def load_patch_dataset(dataset_dir) -> Tuple[np.ndarray, np.ndarray]:
    """Load a pos/*.csv + neg/*.csv patch directory into classifier inputs."""
    dataset_dir = Path(dataset_dir)
    xs, ys = [], []
    for sub, label in (("pos", 1.0), ("neg", 0.0)):
        files = sorted((dataset_dir / sub).glob("*.csv"))
        for fp in files:
            cells = read_patch_csv(fp)
            vec = np.empty(PATCH_SIZE * PATCH_SIZE)
            _patch_normalize_kernel(np.ascontiguousarray(cells), vec)
            xs.append(vec)
            ys.append(label)
    if not xs:
        raise ValueError(f"no patches found under {dataset_dir}")
    return np.array(xs), np.array(ys)
