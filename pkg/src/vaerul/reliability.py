"""Recurrent RUL regressors: supervised baseline, latent-space training, self-learning and ensembles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .ndcore import Matrix, RngState, ShapeError, derive_seed
from .optim import TrainConfig, TrainResult, train_loop
from .vae import VaeModel, embed_width, embed_windows, split_engines, to_sequence


@dataclass
class RulConfig:
    widths: tuple[int, ...] = (64, 32, 16, 8)
    max_rul: float = 140.0
    input_dim: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    def with_seed(self, seed: int) -> "RulConfig":
        return RulConfig(self.widths, self.max_rul, self.input_dim,
                         TrainConfig(**{**asdict(self.train), "seed": int(seed)}))


class VaeEmbedding:
    """Frozen encoder prefix of a trained VAE, used as a deterministic feature map."""

    def __init__(self, vae: VaeModel, k: int):
        self.vae = vae
        self.k = k
        self.width = embed_width(vae, k)

    def transform(self, windows: np.ndarray) -> np.ndarray:
        return embed_windows(self.vae, windows, self.k)


class RulModel:
    """GRU stack with a dense scalar head; predictions are read at the final timestep.

    Internally the target is RUL / max_rul.
    """

    def __init__(self, input_dim: int, widths: Sequence[int] = (64, 32, 16, 8), max_rul: float = 140.0,
                 seed: int = 0):
        rng = RngState(seed)
        self.input_dim = int(input_dim)
        self.widths = tuple(int(w) for w in widths)
        self.max_rul = float(max_rul)
        dims = (self.input_dim,) + self.widths
        self.gru = [nn.GruCell.init(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.head = nn.DenseLayer.init(self.widths[-1], 1, rng)
        self.embedding = None  # set for models trained in a latent space

    def params(self) -> dict[str, Matrix]:
        out = {}
        for i, g in enumerate(self.gru):
            out.update(nn.prefixed(f"gru{i}", g.params()))
        out.update(nn.prefixed("head", self.head.params()))
        return out

    def forward(self, xs: Sequence[Matrix]):
        if xs[0].shape[0] != self.input_dim:
            raise ShapeError(f"RUL model expects {self.input_dim} features, got {xs[0].shape[0]}")
        caches = []
        h = xs
        for cell in self.gru:
            h, c = nn.gru_forward(cell, h)
            caches.append(c)
        out, hc = nn.dense_forward(self.head, h[-1])
        return out, (caches, hc, len(xs))

    def sequence_output(self, windows: np.ndarray) -> np.ndarray:
        """Head applied at every timestep, in cycles (unclipped); shape (n, T)."""
        h = to_sequence(windows)
        for cell in self.gru:
            h, _ = nn.gru_forward(cell, h)
        return np.stack([(self.head.W @ s + self.head.b)[0] for s in h], axis=1) * self.max_rul

    def raw_predict(self, windows: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Unclipped final-timestep predictions in cycles for windows already in model space."""
        if windows.ndim != 3 or windows.shape[2] != self.input_dim:
            raise ShapeError(f"RUL model expects (n, T, {self.input_dim}) windows, got {windows.shape}")
        parts = [self.forward(to_sequence(windows[i:i + chunk]))[0][0] for i in range(0, len(windows), chunk)]
        return np.concatenate(parts) * self.max_rul


def rul_loss_and_grads(model: RulModel, xs: Sequence[Matrix], target: np.ndarray):
    """Mean squared error of the final-step output against scaled targets."""
    out, (caches, hc, steps) = model.forward(xs)
    diff = out - target[None, :]
    loss = float(np.mean(diff * diff))
    grads: dict[str, Matrix] = {}
    dh, g = nn.backward(hc, (2.0 / diff.size) * diff)
    nn.add_grads(grads, "head", g)
    dhs = [np.zeros_like(dh)] * (steps - 1) + [dh]
    for i in reversed(range(len(caches))):
        (dhs, _), g = nn.backward(caches[i], dhs)
        nn.add_grads(grads, f"gru{i}", g)
    return loss, grads


def train_supervised(X: np.ndarray, y: np.ndarray, engine: np.ndarray, config: RulConfig,
                     seed: int | None = None) -> tuple[RulModel, TrainResult]:
    """Fit a RUL model on labeled windows; early-stops on a held-out engine split."""
    if len(X) == 0:
        raise ValueError("no labeled windows to train on")
    if config.input_dim is not None and X.shape[2] != config.input_dim:
        raise ShapeError(f"windows have {X.shape[2]} features, model is declared with {config.input_dim}")
    cfg = config if seed is None else config.with_seed(seed)
    tc = cfg.train
    model = RulModel(X.shape[2], cfg.widths, cfg.max_rul, seed=derive_seed(tc.seed, 2))
    target = np.minimum(np.asarray(y, dtype=float), cfg.max_rul) / cfg.max_rul
    tr, va = split_engines(engine, tc.val_fraction, derive_seed(tc.seed, 3))
    x_tr, y_tr = X[tr], target[tr]
    x_va, y_va = X[va], target[va]

    def loss_fn(m, idx, rng):
        return rul_loss_and_grads(m, to_sequence(x_tr[idx]), y_tr[idx])

    def val_fn(m):
        pred = m.raw_predict(x_va) / m.max_rul
        return float(np.mean((pred - y_va) ** 2))

    return train_loop(model, len(x_tr), loss_fn, tc, val_fn if len(x_va) else None)


def train_on_embedding(vae, k: int, X: np.ndarray, y: np.ndarray, engine: np.ndarray, config: RulConfig,
                       seed: int | None = None) -> tuple[RulModel, TrainResult]:
    """Embed labeled windows with the frozen encoder prefix, then train as in the supervised case.

    ``vae`` is a trained VaeModel or any object with ``transform(windows)`` and ``width``.
    """
    emb = VaeEmbedding(vae, k) if isinstance(vae, VaeModel) else vae
    if config.input_dim is not None and emb.width != config.input_dim:
        raise ShapeError(f"embedding width {emb.width} does not match model input {config.input_dim}")
    Z = emb.transform(X)
    model, result = train_supervised(Z, y, engine, config, seed)
    model.embedding = emb
    return model, result


def predict_rul(model: RulModel, windows: np.ndarray) -> np.ndarray | float:
    """RUL in cycles for one (T, F) window or a (n, T, F) batch, clipped to [0, max_rul]."""
    single = windows.ndim == 2
    w = windows[None] if single else windows
    if model.embedding is not None:
        w = model.embedding.transform(w)
    out = np.clip(model.raw_predict(w), 0.0, model.max_rul)
    return float(out[0]) if single else out


def self_learning(labeled: tuple[np.ndarray, np.ndarray, np.ndarray],
                  unlabeled: tuple[np.ndarray, np.ndarray], config: RulConfig,
                  seed: int | None = None) -> tuple[RulModel, TrainResult]:
    """One round of self-labeling: fit on labels, pseudo-label the rest, refit from scratch on both."""
    X_l, y_l, e_l = labeled
    X_u, e_u = unlabeled
    base, result = train_supervised(X_l, y_l, e_l, config, seed)
    if len(X_u) == 0:
        return base, result
    pseudo = predict_rul(base, X_u)
    return train_supervised(np.concatenate([X_l, X_u]), np.concatenate([y_l, pseudo]),
                            np.concatenate([e_l, e_u]), config, seed)


@dataclass
class Ensemble:
    members: list

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble has no members")
        widths = {m.input_dim for m in self.members}
        if len(widths) != 1:
            raise ShapeError(f"ensemble members disagree on input width: {sorted(widths)}")

    @property
    def max_rul(self) -> float:
        return self.members[0].max_rul


def ensemble_predict(e: Ensemble, windows: np.ndarray) -> np.ndarray | float:
    """Mean of the members' clipped predictions, clipped again."""
    preds = np.mean([np.atleast_1d(predict_rul(m, windows)) for m in e.members], axis=0)
    out = np.clip(preds, 0.0, e.max_rul)
    return float(out[0]) if windows.ndim == 2 else out


def train_ensemble(train_one: Callable[[int], RulModel], size: int, master_seed: int) -> Ensemble:
    """Members are trained with seeds master_seed + i."""
    return Ensemble([train_one(master_seed + i) for i in range(size)])


# ---------------------------------------------------------------- persistence

def save_rul(model: RulModel, path, **meta) -> None:
    path = Path(path)
    nn.save_checkpoint(path, model.params())
    sidecar = {"kind": "rul", "input_dim": model.input_dim, "widths": list(model.widths),
               "max_rul": model.max_rul}
    if model.embedding is not None and hasattr(model.embedding, "k"):
        sidecar["embed_layer"] = model.embedding.k
    sidecar.update(meta)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_rul(path) -> tuple[RulModel, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    model = RulModel(meta["input_dim"], meta["widths"], meta["max_rul"])
    nn.assign_named(model.params(), nn.load_checkpoint(path), path)
    return model, meta
