"""Differentiable layers with explicit forward caches and backward passes.

Layout convention: a matrix is (features x batch); a sequence is a list of such
matrices, one per timestep. Every ``*_forward`` returns ``(output, cache)`` and
``backward(cache, upstream)`` returns ``(input_grad, param_grads)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ndcore import Matrix, RngState, ShapeError, read_matrix, write_matrix

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


def glorot(rng: RngState, fan_out: int, fan_in: int) -> Matrix:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return (2.0 * rng.uniform((fan_out, fan_in)) - 1.0) * limit


def sigmoid(x: Matrix) -> Matrix:
    # tanh form: stable for large |x| and a single ufunc pass
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class _Cache:
    """Base for forward caches; each one may be consumed by a single backward call."""

    _used = False

    def consume(self):
        if self._used:
            raise RuntimeError(f"{type(self).__name__} was already consumed by a backward call")
        self._used = True


def backward(cache: _Cache, upstream):
    """Reverse-mode gradients for the forward call that produced ``cache``."""
    cache.consume()
    return cache.backward(upstream)


def _check_upstream(expected: Matrix, got: Matrix, what: str):
    if got.shape != expected.shape:
        raise ShapeError(f"{what}: upstream gradient {got.shape} does not match output {expected.shape}")


def _check_seq(xs: Sequence[Matrix], width: int, what: str) -> int:
    if len(xs) == 0:
        raise ShapeError(f"{what}: empty input sequence")
    batch = xs[0].shape[1] if xs[0].ndim == 2 else -1
    for t, x in enumerate(xs):
        if x.ndim != 2 or x.shape != (width, batch):
            raise ShapeError(f"{what}: step {t} has shape {x.shape}, expected ({width}, {batch})")
    return batch


# ---------------------------------------------------------------- dense

@dataclass
class DenseLayer:
    W: Matrix
    b: Matrix

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: RngState) -> "DenseLayer":
        return cls(glorot(rng, n_out, n_in), np.zeros((n_out, 1)))

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def params(self) -> dict[str, Matrix]:
        return {"W": self.W, "b": self.b}


@dataclass
class DenseCache(_Cache):
    layer: DenseLayer
    x: Matrix
    out_shape: tuple

    def backward(self, dy: Matrix):
        if dy.shape != self.out_shape:
            raise ShapeError(f"dense: upstream gradient {dy.shape} does not match output {self.out_shape}")
        grads = {"W": dy @ self.x.T, "b": dy.sum(axis=1, keepdims=True)}
        return self.layer.W.T @ dy, grads


def dense_forward(layer: DenseLayer, x: Matrix) -> tuple[Matrix, DenseCache]:
    if x.ndim != 2 or x.shape[0] != layer.n_in:
        raise ShapeError(f"dense: input {x.shape} does not fit weight {layer.W.shape}")
    y = layer.W @ x + layer.b
    return y, DenseCache(layer, x, y.shape)


@dataclass
class DenseSeqCache(_Cache):
    inner: DenseCache
    steps: int

    def backward(self, dys: Sequence[Matrix]):
        if len(dys) != self.steps:
            raise ShapeError(f"dense over time: got {len(dys)} upstream steps, expected {self.steps}")
        dx, grads = backward(self.inner, np.hstack(dys))
        return np.hsplit(dx, self.steps), grads


def dense_seq_forward(layer: DenseLayer, xs: Sequence[Matrix]) -> tuple[list[Matrix], DenseSeqCache]:
    """Apply one dense layer independently at every timestep."""
    _check_seq(xs, layer.n_in, "dense over time")
    y, cache = dense_forward(layer, np.hstack(xs))
    return np.hsplit(y, len(xs)), DenseSeqCache(cache, len(xs))


# ---------------------------------------------------------------- relu

@dataclass
class ReluCache(_Cache):
    active: np.ndarray

    def backward(self, dy: Matrix):
        if dy.shape != self.active.shape:
            raise ShapeError(f"relu: upstream gradient {dy.shape} does not match output {self.active.shape}")
        return dy * self.active, {}


def relu(x: Matrix) -> tuple[Matrix, ReluCache]:
    active = x > 0  # subgradient at exactly 0 is 0
    return np.where(active, x, 0.0), ReluCache(active)


# ---------------------------------------------------------------- vanilla rnn

@dataclass
class RnnCell:
    U: Matrix
    W: Matrix
    b: Matrix

    @classmethod
    def init(cls, n_in: int, n_state: int, rng: RngState) -> "RnnCell":
        return cls(glorot(rng, n_state, n_state), glorot(rng, n_state, n_in), np.zeros((n_state, 1)))

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_state(self) -> int:
        return self.U.shape[0]

    def params(self) -> dict[str, Matrix]:
        return {"U": self.U, "W": self.W, "b": self.b}


@dataclass
class RnnCache(_Cache):
    cell: RnnCell
    x_all: Matrix
    states: list  # s0 followed by one state per step

    def backward(self, dstates: Sequence[Matrix]):
        cell, steps = self.cell, len(self.states) - 1
        if len(dstates) != steps:
            raise ShapeError(f"rnn: got {len(dstates)} upstream steps, expected {steps}")
        dU = np.zeros_like(cell.U)
        das = [None] * steps
        carry = np.zeros_like(self.states[0])
        for t in reversed(range(steps)):
            _check_upstream(self.states[t + 1], dstates[t], f"rnn step {t}")
            s = self.states[t + 1]
            da = (dstates[t] + carry) * (1.0 - s * s)
            dU += da @ self.states[t].T
            carry = cell.U.T @ da
            das[t] = da
        da_all = np.hstack(das)
        grads = {"U": dU, "W": da_all @ self.x_all.T, "b": da_all.sum(axis=1, keepdims=True)}
        dxs = np.hsplit(cell.W.T @ da_all, steps)
        return (dxs, carry), grads


def rnn_forward(cell: RnnCell, xs: Sequence[Matrix], s0: Matrix | None = None,
                activation: str = "tanh") -> tuple[list[Matrix], RnnCache]:
    """s_t = tanh(U s_{t-1} + W x_t + b) for every step; returns all states."""
    if activation != "tanh":
        raise ValueError("only tanh activation is supported")
    batch = _check_seq(xs, cell.n_in, "rnn")
    if s0 is None:
        s0 = np.zeros((cell.n_state, batch))
    elif s0.shape != (cell.n_state, batch):
        raise ShapeError(f"rnn: initial state {s0.shape}, expected {(cell.n_state, batch)}")
    x_all = np.hstack(xs)
    pre = np.hsplit(cell.W @ x_all + cell.b, len(xs))
    states = [s0]
    for p in pre:
        states.append(np.tanh(cell.U @ states[-1] + p))
    return states[1:], RnnCache(cell, x_all, states)


# ---------------------------------------------------------------- gru

_GATES = ("u", "r", "h")


@dataclass
class GruCell:
    """Update gate u, reset gate r, candidate h~; h_t = (1-u) h_{t-1} + u h~."""

    W_u: Matrix
    U_u: Matrix
    b_u: Matrix
    W_r: Matrix
    U_r: Matrix
    b_r: Matrix
    W_h: Matrix
    U_h: Matrix
    b_h: Matrix

    @classmethod
    def init(cls, n_in: int, n_state: int, rng: RngState) -> "GruCell":
        kw = {}
        for g in _GATES:
            kw[f"W_{g}"] = glorot(rng, n_state, n_in)
            kw[f"U_{g}"] = glorot(rng, n_state, n_state)
            kw[f"b_{g}"] = np.zeros((n_state, 1))
        return cls(**kw)

    @classmethod
    def zeros(cls, n_in: int, n_state: int) -> "GruCell":
        kw = {}
        for g in _GATES:
            kw[f"W_{g}"] = np.zeros((n_state, n_in))
            kw[f"U_{g}"] = np.zeros((n_state, n_state))
            kw[f"b_{g}"] = np.zeros((n_state, 1))
        return cls(**kw)

    @property
    def n_in(self) -> int:
        return self.W_u.shape[1]

    @property
    def n_state(self) -> int:
        return self.U_u.shape[0]

    def params(self) -> dict[str, Matrix]:
        return {f"{p}_{g}": getattr(self, f"{p}_{g}") for g in _GATES for p in ("W", "U", "b")}


@dataclass
class GruCache(_Cache):
    cell: GruCell
    x_all: Matrix
    h: list  # h0 followed by one state per step
    u: list
    r: list
    c: list

    def backward(self, dhs: Sequence[Matrix]):
        cell, steps = self.cell, len(self.h) - 1
        if len(dhs) != steps:
            raise ShapeError(f"gru: got {len(dhs)} upstream steps, expected {steps}")
        dU = {g: np.zeros_like(getattr(cell, f"U_{g}")) for g in _GATES}
        dau, dar, dac = [None] * steps, [None] * steps, [None] * steps
        carry = np.zeros_like(self.h[0])
        for t in reversed(range(steps)):
            _check_upstream(self.h[t + 1], dhs[t], f"gru step {t}")
            h_prev, u, r, c = self.h[t], self.u[t], self.r[t], self.c[t]
            dh = dhs[t] + carry
            dh_prev = dh * (1.0 - u)
            a_c = dh * u * (1.0 - c * c)
            a_u = dh * (c - h_prev) * u * (1.0 - u)
            d_rh = cell.U_h.T @ a_c
            a_r = d_rh * h_prev * r * (1.0 - r)
            dh_prev += d_rh * r + cell.U_u.T @ a_u + cell.U_r.T @ a_r
            dU["h"] += a_c @ (r * h_prev).T
            dU["u"] += a_u @ h_prev.T
            dU["r"] += a_r @ h_prev.T
            dau[t], dar[t], dac[t] = a_u, a_r, a_c
            carry = dh_prev
        grads = {}
        dx_all = 0.0
        for g, a in zip(_GATES, (dau, dar, dac)):
            a_all = np.hstack(a)
            grads[f"W_{g}"] = a_all @ self.x_all.T
            grads[f"U_{g}"] = dU[g]
            grads[f"b_{g}"] = a_all.sum(axis=1, keepdims=True)
            dx_all = dx_all + getattr(cell, f"W_{g}").T @ a_all
        return (np.hsplit(dx_all, steps), carry), grads


def gru_forward(cell: GruCell, xs: Sequence[Matrix], h0: Matrix | None = None) -> tuple[list[Matrix], GruCache]:
    batch = _check_seq(xs, cell.n_in, "gru")
    if h0 is None:
        h0 = np.zeros((cell.n_state, batch))
    elif h0.shape != (cell.n_state, batch):
        raise ShapeError(f"gru: initial state {h0.shape}, expected {(cell.n_state, batch)}")
    steps = len(xs)
    x_all = np.hstack(xs)
    pu = np.hsplit(cell.W_u @ x_all + cell.b_u, steps)
    pr = np.hsplit(cell.W_r @ x_all + cell.b_r, steps)
    pc = np.hsplit(cell.W_h @ x_all + cell.b_h, steps)
    k = cell.n_state
    U_ur = np.vstack([cell.U_u, cell.U_r])
    hs, us, rs, cs = [h0], [], [], []
    h = h0
    for t in range(steps):
        ur = U_ur @ h
        u = sigmoid(ur[:k] + pu[t])
        r = sigmoid(ur[k:] + pr[t])
        c = np.tanh(cell.U_h @ (r * h) + pc[t])
        h = h + u * (c - h)
        hs.append(h)
        us.append(u)
        rs.append(r)
        cs.append(c)
    return hs[1:], GruCache(cell, x_all, hs, us, rs, cs)


# ---------------------------------------------------------------- batch norm

@dataclass
class BatchNorm:
    gain: Matrix
    shift: Matrix
    running_mean: Matrix
    running_var: Matrix
    eps: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    @classmethod
    def init(cls, n: int) -> "BatchNorm":
        return cls(np.ones((n, 1)), np.zeros((n, 1)), np.zeros((n, 1)), np.ones((n, 1)))

    @property
    def n(self) -> int:
        return self.gain.shape[0]

    def params(self) -> dict[str, Matrix]:
        return {"gain": self.gain, "shift": self.shift}

    def buffers(self) -> dict[str, Matrix]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


@dataclass
class BatchNormCache(_Cache):
    bn: BatchNorm
    xhat: Matrix
    inv_std: Matrix
    train: bool

    def backward(self, dy: Matrix):
        if dy.shape != self.xhat.shape:
            raise ShapeError(f"batchnorm: upstream gradient {dy.shape} does not match output {self.xhat.shape}")
        grads = {"gain": (dy * self.xhat).sum(axis=1, keepdims=True), "shift": dy.sum(axis=1, keepdims=True)}
        dxhat = dy * self.bn.gain
        if not self.train:
            return dxhat * self.inv_std, grads
        n = dy.shape[1]
        dx = (self.inv_std / n) * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                                   - self.xhat * (dxhat * self.xhat).sum(axis=1, keepdims=True))
        return dx, grads


def batchnorm_forward(bn: BatchNorm, x: Matrix, mode: str = "train") -> tuple[Matrix, BatchNormCache]:
    """Feature-wise normalization over the columns of ``x``.

    Train mode uses batch statistics and updates the running estimates in place;
    eval mode uses the running estimates only.
    """
    if x.ndim != 2 or x.shape[0] != bn.n:
        raise ShapeError(f"batchnorm: input {x.shape} does not fit {bn.n} features")
    if mode == "train":
        if x.shape[1] < 2:
            raise ShapeError("batchnorm: train mode needs a batch of at least 2")
        mean = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        bn.running_mean[:] = bn.momentum * bn.running_mean + (1.0 - bn.momentum) * mean
        bn.running_var[:] = bn.momentum * bn.running_var + (1.0 - bn.momentum) * var
    elif mode == "eval":
        mean, var = bn.running_mean, bn.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x - mean) * inv_std
    return bn.gain * xhat + bn.shift, BatchNormCache(bn, xhat, inv_std, mode == "train")


@dataclass
class BatchNormSeqCache(_Cache):
    inner: BatchNormCache
    steps: int

    def backward(self, dys: Sequence[Matrix]):
        if len(dys) != self.steps:
            raise ShapeError(f"batchnorm over time: got {len(dys)} upstream steps, expected {self.steps}")
        dx, grads = backward(self.inner, np.hstack(dys))
        return np.hsplit(dx, self.steps), grads


def batchnorm_seq_forward(bn: BatchNorm, xs: Sequence[Matrix], mode: str = "train"):
    """Batch norm with statistics pooled over batch and time."""
    _check_seq(xs, bn.n, "batchnorm over time")
    y, cache = batchnorm_forward(bn, np.hstack(xs), mode)
    return np.hsplit(y, len(xs)), BatchNormSeqCache(cache, len(xs))


# ---------------------------------------------------------------- parameter plumbing

def prefixed(prefix: str, named: dict[str, Matrix]) -> dict[str, Matrix]:
    return {f"{prefix}.{k}": v for k, v in named.items()}


def add_grads(into: dict[str, Matrix], prefix: str, grads: dict[str, Matrix]) -> None:
    for k, g in grads.items():
        key = f"{prefix}.{k}"
        if key in into:
            into[key] = into[key] + g
        else:
            into[key] = g


_MAGIC = b"VRCK0001"


def save_checkpoint(path, named: dict[str, Matrix]) -> None:
    """Write a named parameter list: magic, u64 count, then (u64 name length, utf-8 name, matrix) entries."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(named)))
        for name in sorted(named):
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            write_matrix(fh, named[name])


def load_checkpoint(path) -> dict[str, Matrix]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (count,) = struct.unpack("<Q", fh.read(8))
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<Q", fh.read(8))
            name = fh.read(n).decode("utf-8")
            out[name] = read_matrix(fh)
    return out


def assign_named(target: dict[str, Matrix], values: dict[str, Matrix], path: str | Path = "") -> None:
    missing = set(target) - set(values)
    if missing:
        raise KeyError(f"{path}: checkpoint lacks {sorted(missing)}")
    for k, dst in target.items():
        src = values[k]
        if src.shape != dst.shape:
            raise ShapeError(f"{path}: {k} has shape {src.shape}, model expects {dst.shape}")
        dst[...] = src
