"""Multilayer perceptrons: sigmoid forward pass, exact MSE gradients for the
plain and joint (class + shape) objectives, seeded mini-batch training, and
group-lasso feature-group selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import ConfigError, InputError
from .features import SHAPE_DIM


class TrainingError(RuntimeError):
    """Training diverged or was handed degenerate data."""


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class MlpModel:
    """Fully-connected network with sigmoid units on every non-input layer.

    head is 'plain' (single class output) or 'joint' (class output followed
    by 8 shape outputs).
    """

    layer_dims: tuple
    weights: list  # weights[i]: (layer_dims[i+1], layer_dims[i])
    biases: list
    head: str = "plain"

    def __post_init__(self):
        if self.head not in ("plain", "joint"):
            raise ConfigError(f"unknown head {self.head!r}")
        expected_out = 1 if self.head == "plain" else 1 + SHAPE_DIM
        if self.layer_dims[-1] != expected_out:
            raise ConfigError(
                f"{self.head} head needs {expected_out} outputs, got {self.layer_dims[-1]}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i + 1], self.layer_dims[i]) or b.shape != (w.shape[0],):
                raise ConfigError(f"layer {i} parameter shapes inconsistent with {self.layer_dims}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ConfigError("non-finite parameters")

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_dims, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.head)


def init_mlp(layer_dims, head: str = "plain", seed: int = 0,
             init_scale: float | None = None) -> MlpModel:
    """Seeded uniform init in +-1/sqrt(fan_in) per layer."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims, layer_dims[1:]):
        scale = init_scale if init_scale is not None else 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-scale, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(tuple(layer_dims), weights, biases, head)


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Network output for one sample or a (n, dim) batch; values in (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != model.layer_dims[0]:
        raise InputError(f"input dim {a.shape[1]} != {model.layer_dims[0]}")
    for w, b in zip(model.weights, model.biases):
        a = sigmoid(a @ w.T + b)
    return a[0] if single else a


def _forward_activations(model, x):
    acts = [x]
    a = x
    for w, b in zip(model.weights, model.biases):
        a = sigmoid(a @ w.T + b)
        acts.append(a)
    return acts


def _targets_and_mask(model, labels, shapes, lam):
    n = len(labels)
    labels = np.asarray(labels, dtype=np.float64).reshape(n, 1)
    if model.head == "plain":
        return labels, np.ones((n, 1))
    if shapes is None:
        raise InputError("joint objective requires shape targets")
    shapes = np.asarray(shapes, dtype=np.float64)
    targets = np.concatenate([labels, shapes], axis=1)
    # Negatives carry no ground-truth shape: their shape residual is masked.
    weight = np.ones((n, 1 + SHAPE_DIM))
    weight[:, 1:] = lam * labels
    return targets, weight


def loss(model: MlpModel, x, labels, shapes=None, lam: float = 1.0 / SHAPE_DIM) -> float:
    """Summed squared error; shape residuals weighted by lam, masked on negatives."""
    out = forward(model, np.asarray(x, dtype=np.float64))
    targets, weight = _targets_and_mask(model, labels, shapes, lam)
    return float((weight * (out - targets) ** 2).sum())


def gradient(model: MlpModel, x, labels, shapes=None, lam: float = 1.0 / SHAPE_DIM):
    """Exact gradient of the summed squared error over the batch.

    Returns (weight_grads, bias_grads) matching the model parameter shapes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise InputError("batch must be a non-empty 2-d array")
    acts = _forward_activations(model, x)
    targets, weight = _targets_and_mask(model, labels, shapes, lam)
    out = acts[-1]
    delta = 2.0 * weight * (out - targets) * out * (1 - out)
    wgrads = [None] * len(model.weights)
    bgrads = [None] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        wgrads[i] = delta.T @ acts[i]
        bgrads[i] = delta.sum(axis=0)
        if i > 0:
            a = acts[i]
            delta = (delta @ model.weights[i]) * a * (1 - a)
    return wgrads, bgrads


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    decay: float = 0.999  # per-epoch multiplicative step decay
    epochs: int = 200
    batch_size: int = 64
    init_scale: float | None = None
    lam: float = 1.0 / SHAPE_DIM
    early_stop_tol: float = 0.0  # stop when validation loss improves by less, 0 disables
    early_stop_patience: int = 50
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.lam <= 0:
            raise ConfigError("learning_rate and lam must be positive")


def _train(model, x, labels, shapes, cfg):
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = len(x)
    rng = np.random.default_rng(cfg.seed)
    # Seeded validation split for best-seen selection; tiny sets validate on themselves.
    n_val = int(n * cfg.validation_fraction)
    if n_val >= 2 and n - n_val >= 2:
        perm = rng.permutation(n)
        val_idx, tr_idx = perm[:n_val], perm[n_val:]
    else:
        tr_idx = np.arange(n)
        val_idx = tr_idx
    xt, yt = x[tr_idx], labels[tr_idx]
    st = shapes[tr_idx] if shapes is not None else None
    xv, yv = x[val_idx], labels[val_idx]
    sv = shapes[val_idx] if shapes is not None else None

    best = model.copy()
    best_loss = loss(model, xv, yv, sv, cfg.lam)
    rate = cfg.learning_rate
    stale = 0
    m = len(xt)
    for _ in range(cfg.epochs):
        order = rng.permutation(m)
        for start in range(0, m, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            wg, bg = gradient(model, xt[idx], yt[idx],
                              st[idx] if st is not None else None, cfg.lam)
            step = rate / len(idx)
            for w, b, dw, db in zip(model.weights, model.biases, wg, bg):
                w -= step * dw
                b -= step * db
        rate *= cfg.decay
        cur = loss(model, xv, yv, sv, cfg.lam)
        if not np.isfinite(cur):
            raise TrainingError(f"non-finite validation loss {cur}")
        if cur < best_loss - cfg.early_stop_tol:
            best = model.copy()
            best_loss = cur
            stale = 0
        else:
            stale += 1
            if cfg.early_stop_tol > 0 and stale >= cfg.early_stop_patience:
                break
    return best


def train_mlp(samples, labels, layer_dims, cfg: TrainConfig | None = None) -> MlpModel:
    """Mini-batch gradient descent on the plain MSE objective; seeded and
    deterministic; returns the best-validation-loss parameters seen."""
    cfg = cfg or TrainConfig()
    labels = np.asarray(labels, dtype=np.float64)
    if len(np.unique(labels)) < 2:
        raise TrainingError("need at least one sample of each class")
    model = init_mlp(layer_dims, "plain", cfg.seed, cfg.init_scale)
    return _train(model, samples, labels, None, cfg)


def train_joint_mlp(samples, labels, shapes, layer_dims,
                    cfg: TrainConfig | None = None) -> MlpModel:
    """Joint class + shape training; shape residuals of negatives are masked."""
    cfg = cfg or TrainConfig()
    labels = np.asarray(labels, dtype=np.float64)
    shapes = np.asarray(shapes, dtype=np.float64)
    if shapes.shape != (len(labels), SHAPE_DIM):
        raise InputError(f"shapes must be (n, {SHAPE_DIM}), got {shapes.shape}")
    if len(np.unique(labels)) < 2:
        raise TrainingError("need at least one sample of each class")
    model = init_mlp(layer_dims, "joint", cfg.seed, cfg.init_scale)
    return _train(model, samples, labels, shapes, cfg)


def select_feature_groups(features: np.ndarray, labels, k: int,
                          group_size: int = 32, alpha: float = 0.01,
                          iterations: int = 300, seed: int = 0) -> list[int]:
    """Top-k feature groups by group-lasso weight norm.

    Fits a linear classifier with an l2,1 penalty by proximal gradient
    descent on the grouped feature matrix, then ranks groups by the norm of
    their weight block (ties broken by lower group index).
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.shape[1] % group_size != 0:
        raise InputError(f"feature dim {x.shape[1]} not a multiple of {group_size}")
    n_groups = x.shape[1] // group_size
    if not 1 <= k <= n_groups:
        raise ConfigError(f"k must be in [1, {n_groups}]")
    if len(np.unique(y)) < 2:
        raise InputError("labels must contain both classes")

    n = len(x)
    w = np.zeros(x.shape[1])
    b = 0.0
    lip = np.linalg.norm(x, ord=2) ** 2 / n + 1.0
    step = 1.0 / lip
    yc = y - y.mean()
    xc = x - x.mean(axis=0)
    for _ in range(iterations):
        resid = xc @ w - yc
        grad = xc.T @ resid / n
        w = w - step * grad
        blocks = w.reshape(n_groups, group_size)
        norms = np.linalg.norm(blocks, axis=1)
        shrink = np.maximum(0.0, 1.0 - step * alpha / np.maximum(norms, 1e-12))
        w = (blocks * shrink[:, None]).reshape(-1)
    norms = np.linalg.norm(w.reshape(n_groups, group_size), axis=1)
    # Stable ranking: descending norm, ascending index on ties.
    order = sorted(range(n_groups), key=lambda g: (-norms[g], g))
    return order[:k]
