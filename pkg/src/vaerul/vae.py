"""Recurrent variational autoencoder and the deterministic embedding network.

Encoder: GRU stack (input -> 8 -> 4 by default) with batch norm after every
recurrent layer, followed by two dense per-timestep heads for the posterior mean
and log-variance. Decoder mirrors it: GRU stack (latent -> 8 -> input) with
batch norm, then a dense per-timestep output map.

Encoder layers are numbered from 1 (the raw input) so that, with the default
widths, layer 3 is the 4-wide recurrent output used as the embedding.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .ndcore import Matrix, RngState, ShapeError, derive_seed
from .optim import NonFiniteError, TrainConfig, TrainResult, train_loop


@dataclass
class VaeConfig:
    alpha: float = 10.0
    latent_dim: int = 4
    widths: tuple[int, ...] = (8, 4)
    embed_layer: int = 3
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        self.widths = tuple(int(w) for w in self.widths)


@dataclass
class ElboTerms:
    kl: float
    recon: float
    weighted_total: float

    @property
    def unweighted(self) -> float:
        return self.kl + self.recon


class VaeModel:
    def __init__(self, input_dim: int, widths: Sequence[int] = (8, 4), latent_dim: int = 4, seed: int = 0):
        rng = RngState(seed)
        self.input_dim = int(input_dim)
        self.widths = tuple(int(w) for w in widths)
        self.latent_dim = int(latent_dim)
        dims = (self.input_dim,) + self.widths
        self.enc_gru = [nn.GruCell.init(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.enc_bn = [nn.BatchNorm.init(w) for w in self.widths]
        self.head_mu = nn.DenseLayer.init(self.widths[-1], self.latent_dim, rng)
        self.head_logvar = nn.DenseLayer.init(self.widths[-1], self.latent_dim, rng)
        dec_dims = (self.latent_dim,) + tuple(reversed(self.widths[:-1])) + (self.input_dim,)
        self.dec_gru = [nn.GruCell.init(a, b, rng) for a, b in zip(dec_dims[:-1], dec_dims[1:])]
        self.dec_bn = [nn.BatchNorm.init(w) for w in dec_dims[1:]]
        self.dec_out = nn.DenseLayer.init(self.input_dim, self.input_dim, rng)

    @property
    def n_encoder_layers(self) -> int:
        """Input layer, recurrent layers and the Gaussian heads."""
        return len(self.widths) + 2

    def params(self) -> dict[str, Matrix]:
        out = {}
        for i, (g, b) in enumerate(zip(self.enc_gru, self.enc_bn)):
            out.update(nn.prefixed(f"enc.gru{i}", g.params()))
            out.update(nn.prefixed(f"enc.bn{i}", b.params()))
        out.update(nn.prefixed("enc.mu", self.head_mu.params()))
        out.update(nn.prefixed("enc.logvar", self.head_logvar.params()))
        for i, (g, b) in enumerate(zip(self.dec_gru, self.dec_bn)):
            out.update(nn.prefixed(f"dec.gru{i}", g.params()))
            out.update(nn.prefixed(f"dec.bn{i}", b.params()))
        out.update(nn.prefixed("dec.out", self.dec_out.params()))
        return out

    def buffers(self) -> dict[str, Matrix]:
        out = {}
        for i, b in enumerate(self.enc_bn):
            out.update(nn.prefixed(f"enc.bn{i}", b.buffers()))
        for i, b in enumerate(self.dec_bn):
            out.update(nn.prefixed(f"dec.bn{i}", b.buffers()))
        return out

    def zero_(self) -> "VaeModel":
        for p in self.params().values():
            p[...] = 0.0
        return self


# ---------------------------------------------------------------- forward pieces

def _stack_forward(cells, bns, xs, mode, caches, upto=None):
    h = xs
    for i, (cell, bn) in enumerate(zip(cells, bns)):
        if upto is not None and i >= upto:
            break
        h, c1 = nn.gru_forward(cell, h)
        h, c2 = nn.batchnorm_seq_forward(bn, h, mode)
        caches.append((c1, c2))
    return h


def _stack_backward(caches, prefix, dh, grads):
    for i in reversed(range(len(caches))):
        c1, c2 = caches[i]
        dh, g = nn.backward(c2, dh)
        nn.add_grads(grads, f"{prefix}.bn{i}", g)
        (dh, _), g = nn.backward(c1, dh)
        nn.add_grads(grads, f"{prefix}.gru{i}", g)
    return dh


@dataclass
class EncodeCache:
    stack: list
    mu: nn.DenseSeqCache
    logvar: nn.DenseSeqCache


@dataclass
class DecodeCache:
    stack: list
    out: nn.DenseSeqCache


def encode(model: VaeModel, xs: Sequence[Matrix], mode: str = "eval"):
    """Per-timestep posterior parameters (mu, logvar) for a batch of windows."""
    for t, x in enumerate(xs):
        if x.ndim != 2 or x.shape[0] != model.input_dim:
            raise ShapeError(f"encode: step {t} has {x.shape[0] if x.ndim == 2 else x.shape} features, "
                             f"model expects {model.input_dim}")
    caches = []
    h = _stack_forward(model.enc_gru, model.enc_bn, xs, mode, caches)
    mus, cmu = nn.dense_seq_forward(model.head_mu, h)
    logvars, clv = nn.dense_seq_forward(model.head_logvar, h)
    return mus, logvars, EncodeCache(caches, cmu, clv)


def reparameterize(mus: Sequence[Matrix], logvars: Sequence[Matrix], rng: RngState | None,
                   eps: Sequence[Matrix] | None = None) -> tuple[list[Matrix], list[Matrix]]:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, 1); pass ``eps`` to fix the noise.

    Returns ``(zs, eps)``.
    """
    if len(mus) != len(logvars):
        raise ShapeError("reparameterize: mu and logvar sequences differ in length")
    if eps is None:
        shape = mus[0].shape
        noise = rng.normal(len(mus) * shape[0] * shape[1]).reshape(len(mus), *shape)
        eps = list(noise)
    zs = []
    for mu, lv, e in zip(mus, logvars, eps):
        if mu.shape != lv.shape or mu.shape != e.shape:
            raise ShapeError(f"reparameterize: shapes {mu.shape}, {lv.shape}, {e.shape} differ")
        zs.append(mu + np.exp(0.5 * lv) * e)
    return zs, list(eps)


def decode(model: VaeModel, zs: Sequence[Matrix], mode: str = "eval"):
    for t, z in enumerate(zs):
        if z.ndim != 2 or z.shape[0] != model.latent_dim:
            raise ShapeError(f"decode: step {t} has shape {z.shape}, latent dimension is {model.latent_dim}")
    caches = []
    h = _stack_forward(model.dec_gru, model.dec_bn, zs, mode, caches)
    xhat, cout = nn.dense_seq_forward(model.dec_out, h)
    return xhat, DecodeCache(caches, cout)


def kl_to_standard_normal(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Closed-form KL(N(mu, exp(logvar)) || N(0, 1)), summed over axis 0 (latent dims)."""
    return -0.5 * np.sum(1.0 + logvar - mu * mu - np.exp(logvar), axis=0)


def _first_bad_step(seqs) -> int | None:
    for t in range(len(seqs[0])):
        if not all(np.all(np.isfinite(s[t])) for s in seqs):
            return t
    return None


def elbo_loss_and_grads(model: VaeModel, xs: Sequence[Matrix], rng: RngState | None, alpha: float,
                        eps: Sequence[Matrix] | None = None, mode: str = "train",
                        need_grads: bool = True):
    """Weighted negative lower bound, KL + alpha * recon, averaged over windows.

    KL is summed over latent dimensions and averaged over timesteps; recon is
    the squared error averaged over timesteps and features.
    """
    steps = len(xs)
    batch = xs[0].shape[1]
    bad = _first_bad_step([xs])
    if bad is not None:
        raise NonFiniteError(f"non-finite VAE input at timestep {bad}")
    mus, logvars, ecache = encode(model, xs, mode)
    zs, eps = reparameterize(mus, logvars, rng, eps)
    xhat, dcache = decode(model, zs, mode)
    bad = _first_bad_step([mus, logvars, xhat])
    if bad is not None:
        raise NonFiniteError(f"non-finite VAE intermediate at timestep {bad}")

    mu_all = np.hstack(mus)
    lv_all = np.hstack(logvars)
    kl = float(kl_to_standard_normal(mu_all, lv_all).sum() / (steps * batch))
    diffs = [xh - x for xh, x in zip(xhat, xs)]
    n_recon = steps * batch * model.input_dim
    recon = float(sum(np.sum(d * d) for d in diffs) / n_recon)
    terms = ElboTerms(kl, recon, kl + alpha * recon)
    if not need_grads:
        return terms, None

    grads: dict[str, Matrix] = {}
    dxhat = [(2.0 * alpha / n_recon) * d for d in diffs]
    dh, g = nn.backward(dcache.out, dxhat)
    nn.add_grads(grads, "dec.out", g)
    dzs = _stack_backward(dcache.stack, "dec", dh, grads)

    scale = 1.0 / (steps * batch)
    dmus, dlvs = [], []
    for mu, lv, e, dz in zip(mus, logvars, eps, dzs):
        sigma = np.exp(0.5 * lv)
        dmus.append(dz + scale * mu)
        dlvs.append(dz * e * 0.5 * sigma + scale * 0.5 * (np.exp(lv) - 1.0))
    dh_mu, g = nn.backward(ecache.mu, dmus)
    nn.add_grads(grads, "enc.mu", g)
    dh_lv, g = nn.backward(ecache.logvar, dlvs)
    nn.add_grads(grads, "enc.logvar", g)
    dh = [a + b for a, b in zip(dh_mu, dh_lv)]
    _stack_backward(ecache.stack, "enc", dh, grads)
    return terms, grads


def elbo_loss(model: VaeModel, xs: Sequence[Matrix], rng: RngState | None, alpha: float,
              eps: Sequence[Matrix] | None = None, mode: str = "eval") -> ElboTerms:
    terms, _ = elbo_loss_and_grads(model, xs, rng, alpha, eps, mode, need_grads=False)
    return terms


def embed(model: VaeModel, xs: Sequence[Matrix], k: int = 3) -> list[Matrix]:
    """Deterministic output of encoder layer ``k`` (1 = raw input); no sampling, eval-mode batch norm."""
    if not 1 <= k < model.n_encoder_layers:
        raise ValueError(f"embedding layer k={k} outside [1, {model.n_encoder_layers - 1}]")
    for t, x in enumerate(xs):
        if x.ndim != 2 or x.shape[0] != model.input_dim:
            raise ShapeError(f"embed: step {t} has shape {x.shape}, model expects {model.input_dim} features")
    return _stack_forward(model.enc_gru, model.enc_bn, xs, "eval", [], upto=k - 1)


def embed_width(model: VaeModel, k: int) -> int:
    return model.input_dim if k == 1 else model.widths[k - 2]


# ---------------------------------------------------------------- window arrays

def to_sequence(windows: np.ndarray) -> list[Matrix]:
    """(batch, T, features) array -> list of T (features x batch) matrices."""
    return [np.ascontiguousarray(windows[:, t, :].T) for t in range(windows.shape[1])]


def from_sequence(seq: Sequence[Matrix]) -> np.ndarray:
    return np.stack([m.T for m in seq], axis=1)


def embed_windows(model: VaeModel, windows: np.ndarray, k: int = 3, chunk: int = 2048) -> np.ndarray:
    parts = [from_sequence(embed(model, to_sequence(windows[i:i + chunk]), k))
             for i in range(0, len(windows), chunk)]
    return np.concatenate(parts, axis=0)


def evaluate_elbo(model: VaeModel, windows: np.ndarray, alpha: float, seed: int = 0,
                  chunk: int = 2048) -> ElboTerms:
    """Eval-mode loss terms over a window array with a fixed noise seed (window-weighted mean)."""
    rng = RngState(seed)
    kl = recon = 0.0
    n = len(windows)
    for i in range(0, n, chunk):
        part = windows[i:i + chunk]
        t = elbo_loss(model, to_sequence(part), rng, alpha, mode="eval")
        kl += t.kl * len(part)
        recon += t.recon * len(part)
    kl /= n
    recon /= n
    return ElboTerms(kl, recon, kl + alpha * recon)


# ---------------------------------------------------------------- training

def split_engines(engine_ids: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Hold out about ``fraction`` of the distinct engines; returns boolean (train, val) window masks.

    With fewer than two engines nothing is held out.
    """
    engines = np.unique(engine_ids)
    n_val = int(round(fraction * len(engines)))
    if len(engines) >= 2:
        n_val = min(max(n_val, 1), len(engines) - 1)
    else:
        n_val = 0
    val_engines = engines[RngState(seed).choice(len(engines), n_val)] if n_val else np.array([], dtype=engines.dtype)
    val = np.isin(engine_ids, val_engines)
    return ~val, val


def train_vae(windows: np.ndarray, engine_ids: np.ndarray, config: VaeConfig,
              seed: int | None = None) -> tuple[VaeModel, TrainResult]:
    """Fit the VAE on unlabeled windows (labeled and unlabeled engines alike)."""
    if len(windows) == 0:
        raise ValueError("no windows to train the VAE on")
    tc = config.train if seed is None else TrainConfig(**{**asdict(config.train), "seed": seed})
    model = VaeModel(windows.shape[2], config.widths, config.latent_dim, seed=derive_seed(tc.seed, 2))
    train_mask, val_mask = split_engines(engine_ids, tc.val_fraction, derive_seed(tc.seed, 3))
    x_train = windows[train_mask]
    x_val = windows[val_mask]
    if len(x_train) < 2:
        raise ValueError("VAE training needs at least two windows (batch norm)")

    def loss_fn(m, idx, rng):
        if len(idx) < 2:  # batch norm cannot normalise a single window
            idx = np.append(idx, (idx[0] + 1) % len(x_train))
        terms, grads = elbo_loss_and_grads(m, to_sequence(x_train[idx]), rng, config.alpha)
        return terms.weighted_total, grads

    val_seed = derive_seed(tc.seed, 4)
    val_fn = None
    if len(x_val):
        val_fn = lambda m: evaluate_elbo(m, x_val, config.alpha, val_seed).weighted_total  # noqa: E731
    model, result = train_loop(model, len(x_train), loss_fn, tc, val_fn)
    return model, result


# ---------------------------------------------------------------- persistence

def save_vae(model: VaeModel, path, config: VaeConfig | None = None, **meta) -> None:
    """Write the checkpoint and a JSON sidecar (same stem, .json) describing the architecture."""
    path = Path(path)
    named = dict(model.params())
    named.update({f"buffer:{k}": v for k, v in model.buffers().items()})
    nn.save_checkpoint(path, named)
    sidecar = {
        "kind": "vae",
        "input_dim": model.input_dim,
        "widths": list(model.widths),
        "latent_dim": model.latent_dim,
        "alpha": None if config is None else config.alpha,
        "embed_layer": None if config is None else config.embed_layer,
        "checkpoint_sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
    }
    sidecar.update(meta)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_vae(path) -> tuple[VaeModel, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    model = VaeModel(meta["input_dim"], meta["widths"], meta["latent_dim"])
    named = nn.load_checkpoint(path)
    nn.assign_named(model.params(), named, path)
    nn.assign_named(model.buffers(), {k[len("buffer:"):]: v for k, v in named.items() if k.startswith("buffer:")}, path)
    return model, meta
