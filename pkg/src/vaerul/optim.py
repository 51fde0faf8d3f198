"""Adam, mini-batching and the early-stopping training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .ndcore import Matrix, RngState, ShapeError, derive_seed

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 100
    max_epochs: int = 500
    patience: int = 20
    tol: float = 0.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


@dataclass
class AdamState:
    m: dict[str, Matrix]
    v: dict[str, Matrix]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Matrix], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()},
                   0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: dict[str, Matrix], grads: dict[str, Matrix]) -> dict[str, Matrix]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for k, p in params.items():
        g = grads.get(k)
        if g is None or g.shape != p.shape:
            raise ShapeError(f"adam: gradient for {k} is {None if g is None else g.shape}, parameter is {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"adam: {bad} non-finite entries in gradient of {k} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def clip_global_norm(grads: dict[str, Matrix], max_norm: float | None) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def minibatches(rng: RngState, n: int, size: int) -> list[np.ndarray]:
    """One epoch: a random permutation of range(n) cut into batches; the short tail batch is kept."""
    if size < 1 or n < 1:
        raise ValueError("minibatches needs n >= 1 and size >= 1")
    if size > n:
        raise ValueError(f"batch size {size} exceeds dataset size {n}")
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def minibatch_loss_scale(total_n: int, batch_n: int, batch_loss_sum: float) -> float:
    """Full-dataset loss estimate from one mini-batch: (n / M) * sum of batch losses."""
    if total_n <= 0 or batch_n <= 0:
        raise ValueError("counts must be positive")
    return (total_n / batch_n) * batch_loss_sum


class Trainable(Protocol):
    def params(self) -> dict[str, Matrix]: ...


LossFn = Callable[[Trainable, np.ndarray, RngState], "tuple[float, dict[str, Matrix]]"]


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    stopped_early: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for epoch, tr, va in self.history:
                w.writerow([epoch, repr(tr), repr(va)])


def _snapshot(model) -> dict[str, Matrix]:
    state = {k: v.copy() for k, v in model.params().items()}
    if hasattr(model, "buffers"):
        state.update({f"buffer:{k}": v.copy() for k, v in model.buffers().items()})
    return state


def _restore(model, snap: dict[str, Matrix]) -> None:
    for k, v in model.params().items():
        v[...] = snap[k]
    if hasattr(model, "buffers"):
        for k, v in model.buffers().items():
            v[...] = snap[f"buffer:{k}"]


def train_loop(model: Trainable, n_train: int, loss_fn: LossFn, config: TrainConfig,
               val_fn: Callable[[Trainable], float] | None = None) -> tuple[Trainable, TrainResult]:
    """Mini-batch Adam with early stopping.

    ``loss_fn(model, idx, rng)`` returns the mean per-sample loss over the batch
    ``idx`` and its gradients keyed like ``model.params()``. ``val_fn(model)``
    scores the current model on held-out data; without it the epoch's training
    loss drives early stopping. The model is left at its best-scoring snapshot.
    """
    if n_train < 1:
        raise ValueError("training set is empty")
    params = model.params()
    opt = AdamState.for_params(params, config.lr, config.beta1, config.beta2, config.eps)
    batch_rng = RngState(derive_seed(config.seed, 0))
    noise_rng = RngState(derive_seed(config.seed, 1))
    size = min(config.batch_size, n_train)
    result = TrainResult()
    best = _snapshot(model)
    if val_fn is not None:
        result.best_val = float(val_fn(model))
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        total = 0.0
        for b, idx in enumerate(minibatches(batch_rng, n_train, size)):
            loss, grads = loss_fn(model, idx, noise_rng)
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            clip_global_norm(grads, config.clip_norm)
            adam_step(opt, params, grads)
            # (M / n) * scaled estimate == this batch's share of the per-sample mean
            total += (len(idx) / n_train) * minibatch_loss_scale(n_train, len(idx), loss * len(idx)) / n_train
        val = float(val_fn(model)) if val_fn is not None else total
        if not math.isfinite(val):
            raise NonFiniteError(f"non-finite validation loss at epoch {epoch}")
        result.history.append((epoch, total, val))
        if val < result.best_val - config.tol:
            result.best_val, result.best_epoch = val, epoch
            best = _snapshot(model)
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                result.stopped_early = True
                log.debug("early stop at epoch %d (best %d, %.6g)", epoch, result.best_epoch, result.best_val)
                break
    _restore(model, best)
    return model, result
