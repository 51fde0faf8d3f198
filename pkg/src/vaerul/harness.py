"""Experiment orchestration: the label-fraction sweep over SL, Self-SSL and VAE-SSL, and report files."""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .data import DataConfig, ProcessedDataset, drop_labels, load_subset
from .metrics import CSV_COLUMNS, MetricReport, evaluate
from .ndcore import RngState, derive_seed
from .optim import TrainConfig
from .reliability import (RulConfig, ensemble_predict, self_learning, train_ensemble,
                          train_on_embedding, train_supervised)
from .vae import VaeConfig, VaeModel, train_vae

log = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (1.0, 0.8, 0.5, 0.3, 0.2, 0.1, 0.05, 0.01)
PLOT_ONLY_FRACTIONS = (0.8, 0.5)
METHODS = ("SL", "Self-SSL", "VAE-SSL")
METRICS = ("mae", "mse", "score", "r2")

# stream tags for derive_seed
_MASK, _MEMBERS, _VAE = 1, 2, 3


@dataclass
class ExperimentConfig:
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    repetitions: int = 5
    ensemble_size: int = 5
    master_seed: int = 0
    shared_vae: bool = False
    data_dir: str = "data/CMAPSS"
    subset: str = "FD001"
    out_dir: str = "runs/experiment"
    data: DataConfig = field(default_factory=DataConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    rul: RulConfig = field(default_factory=RulConfig)

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if not self.fractions:
            raise ValueError("at least one label fraction is required")
        for f in self.fractions:
            if not 0 < f <= 1:
                raise ValueError(f"label fraction {f} outside (0, 1]")
        if len(set(self.fractions)) != len(self.fractions):
            raise ValueError("duplicate label fractions")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.ensemble_size < 1:
            raise ValueError("ensemble size must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master seed must be an unsigned 64-bit integer")

    def reps_for(self, fraction: float) -> int:
        # with every label kept there is no random selection to repeat
        return 1 if fraction == 1.0 else self.repetitions

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- config files

def _coerce(text: str, kind):
    text = text.strip()
    if kind is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind == "tuple_int":
        return tuple(int(v) for v in text.replace(",", " ").split())
    if kind == "tuple_float":
        return tuple(float(v) for v in text.replace(",", " ").split())
    if kind == "optional_float":
        return None if text.lower() in ("", "none") else float(text)
    if kind == "optional_int":
        return None if text.lower() in ("", "none") else int(text)
    return kind(text)


_KINDS = {
    "fractions": "tuple_float", "widths": "tuple_int", "clip_norm": "optional_float",
    "input_dim": "optional_int", "shared_vae": bool,
}


def _fill(cls, section: configparser.SectionProxy | None, **nested):
    """Build dataclass ``cls`` from an INI section; unknown keys are an error."""
    known = {f.name: f for f in fields(cls)}
    kwargs = dict(nested)
    if section is not None:
        for key, raw in section.items():
            if key not in known or key in nested:
                raise ValueError(f"[{section.name}]: unknown key {key!r}")
            default = getattr(cls(), key) if key not in _KINDS else None
            kind = _KINDS.get(key, type(default))
            try:
                kwargs[key] = _coerce(raw, kind)
            except ValueError as exc:
                raise ValueError(f"[{section.name}] {key}: {exc}") from None
    return cls(**kwargs)


SECTIONS = ("experiment", "data", "vae", "vae.train", "rul", "rul.train")


def load_config(path) -> ExperimentConfig:
    """Read an INI file with sections experiment, data, vae, vae.train, rul and rul.train."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.read(path)
    for name in parser.sections():
        if name not in SECTIONS:
            raise ValueError(f"{path}: unknown section [{name}]")
    get = lambda name: parser[name] if parser.has_section(name) else None  # noqa: E731
    vae_cfg = _fill(VaeConfig, get("vae"), train=_fill(TrainConfig, get("vae.train")))
    rul_cfg = _fill(RulConfig, get("rul"), train=_fill(TrainConfig, get("rul.train")))
    return _fill(ExperimentConfig, get("experiment"), data=_fill(DataConfig, get("data")),
                 vae=vae_cfg, rul=rul_cfg)


def dump_config(config: ExperimentConfig) -> str:
    """INI text that load_config reads back to an equal config."""
    def fmt(v):
        if isinstance(v, (tuple, list)):
            return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        if v is None:
            return "none"
        return repr(v) if isinstance(v, float) else str(v)

    d = config.to_dict()
    blocks = {
        "experiment": {k: v for k, v in d.items() if k not in ("data", "vae", "rul")},
        "data": d["data"],
        "vae": {k: v for k, v in d["vae"].items() if k != "train"},
        "vae.train": d["vae"]["train"],
        "rul": {k: v for k, v in d["rul"].items() if k != "train"},
        "rul.train": d["rul"]["train"],
    }
    lines = []
    for name, values in blocks.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {fmt(v)}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------- running

@dataclass
class RunRecord:
    """One (method, fraction, repetition) cell."""

    method: str
    fraction: float
    rep: int
    seed: int
    n_labeled_engines: int
    metrics: MetricReport | None = None
    error: str | None = None
    predictions: np.ndarray | None = None


@dataclass
class CellSummary:
    n_reps: int
    mean: dict[str, float]
    sem: dict[str, float]

    @property
    def single_rep(self) -> bool:
        return self.n_reps == 1


@dataclass
class ExperimentReport:
    fractions: tuple[float, ...] = ()
    methods: tuple[str, ...] = METHODS
    runs: list[RunRecord] = field(default_factory=list)
    test_engine: np.ndarray | None = None
    test_truth: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def cell(self, method: str, fraction: float) -> CellSummary | None:
        """Mean and standard error over successful repetitions; None when every repetition failed."""
        done = [r.metrics for r in self.runs
                if r.method == method and r.fraction == fraction and r.metrics is not None]
        if not done:
            return None
        mean, sem = {}, {}
        for name in METRICS:
            vals = np.array([getattr(m, name) for m in done])
            mean[name] = float(vals.mean())
            sem[name] = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        return CellSummary(len(done), mean, sem)


def fraction_key(fraction: float) -> int:
    """Integer stream key for a fraction, independent of its position in the sweep."""
    return int(round(fraction * 1_000_000))


def mask_seed(master: int, fraction: float, rep: int) -> int:
    return derive_seed(master, _MASK, fraction_key(fraction), rep)


def member_seed(master: int, fraction: float, rep: int) -> int:
    """Base seed of a cell's ensemble; members use base + i and all three methods share it."""
    # leave room for base + ensemble_size without overflowing u64
    return derive_seed(master, _MEMBERS, fraction_key(fraction), rep) >> 8


def vae_seed(master: int, fraction: float | None, rep: int | None) -> int:
    if fraction is None:
        return derive_seed(master, _VAE)
    return derive_seed(master, _VAE, fraction_key(fraction), rep)


def _method_trainer(method: str, ds: ProcessedDataset, labeled: np.ndarray, cfg: ExperimentConfig,
                    vae_model: VaeModel | None) -> Callable[[int], object]:
    sel = np.isin(ds.engine, labeled)
    X_l, y_l, e_l = ds.X[sel], ds.y[sel], ds.engine[sel]
    if method == "SL":
        return lambda seed: train_supervised(X_l, y_l, e_l, cfg.rul, seed)[0]
    if method == "Self-SSL":
        unl = (ds.X[~sel], ds.engine[~sel])
        return lambda seed: self_learning((X_l, y_l, e_l), unl, cfg.rul, seed)[0]
    if method == "VAE-SSL":
        k = cfg.vae.embed_layer
        return lambda seed: train_on_embedding(vae_model, k, X_l, y_l, e_l, cfg.rul, seed)[0]
    raise ValueError(f"unknown method {method!r}")


def run_experiment(config: ExperimentConfig, dataset: ProcessedDataset | None = None,
                   methods: tuple[str, ...] = METHODS) -> ExperimentReport:
    """Sweep label fractions; every stochastic choice is derived from ``config.master_seed``.

    A failing cell is logged and recorded with its error; it never contributes numbers.
    """
    ds = dataset if dataset is not None else load_subset(config.data_dir, config.subset, config.data)
    engines = ds.engines
    master = config.master_seed
    report = ExperimentReport(fractions=config.fractions, methods=tuple(methods),
                              test_engine=ds.test_engine, test_truth=ds.test_y)
    seeds: dict[str, dict] = {}

    shared = None
    if "VAE-SSL" in methods and config.shared_vae:
        shared = _fit_vae(ds, config, vae_seed(master, None, None))

    for f in config.fractions:
        for rep in range(config.reps_for(f)):
            ms = mask_seed(master, f, rep)
            labeled = engines[drop_labels(engines, f, RngState(ms))]
            base = member_seed(master, f, rep)
            vs = None
            vae_model = shared
            if "VAE-SSL" in methods and not config.shared_vae:
                vs = vae_seed(master, f, rep)
                vae_model = _fit_vae(ds, config, vs)
            seeds[f"{f!r}/{rep}"] = {"mask": ms, "members": base, "vae": vs}
            log.info("fraction %s rep %d: %d labeled engines", f, rep, len(labeled))

            for method in methods:
                rec = RunRecord(method, f, rep, base, len(labeled))
                report.runs.append(rec)
                if method == "VAE-SSL" and isinstance(vae_model, Exception):
                    rec.error = f"VAE training failed: {vae_model}"
                    log.error("fraction %s rep %d %s: %s", f, rep, method, rec.error)
                    continue
                try:
                    ens = train_ensemble(_method_trainer(method, ds, labeled, config, vae_model),
                                         config.ensemble_size, base)
                    pred = ensemble_predict(ens, ds.test_X)
                    rec.predictions = np.asarray(pred)
                    rec.metrics = evaluate(pred, ds.test_y)
                except Exception as exc:  # noqa: BLE001 - a failed cell is reported, not fatal
                    rec.error = f"{type(exc).__name__}: {exc}"
                    log.error("fraction %s rep %d %s failed: %s", f, rep, method, rec.error)

    report.metadata = {
        "config": config.to_dict(),
        "seeds": seeds,
        "shared_vae_seed": vae_seed(master, None, None) if config.shared_vae else None,
        "dataset_hash": ds.content_hash(),
        "dataset_summary": ds.summary,
        "version": __version__,
    }
    return report


def _fit_vae(ds: ProcessedDataset, config: ExperimentConfig, seed: int):
    try:
        model, _ = train_vae(ds.X, ds.engine, config.vae, seed)
        return model
    except Exception as exc:  # noqa: BLE001
        log.error("VAE training (seed %d) failed: %s", seed, exc)
        return exc


# ---------------------------------------------------------------- report files

TABLE_COLUMNS = ("metric", "method", "fraction", "n_reps", "mean", "sem", "scale", "scaled_mean",
                 "scaled_sem", "note")
PLOT_COLUMNS = ("fraction", "method", "mean", "sem")
RUN_COLUMNS = ("method", "fraction", "rep", "seed", "n_labeled_engines") + CSV_COLUMNS + ("error",)
SCALES = {"mae": 1.0, "mse": 1.0, "score": 1e-2, "r2": 1.0}


def _num(v: float) -> str:
    return repr(float(v))


def table_fractions(fractions) -> list[float]:
    return [f for f in fractions if f not in PLOT_ONLY_FRACTIONS]


def emit_report(report: ExperimentReport, out_dir) -> list[Path]:
    """Write table.csv, plot_<metric>.csv, runs.csv, predictions/ and metadata.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not report.runs:
        log.warning("empty report: writing header-only files to %s", out)
    written = []

    def write(name, header, rows):
        path = out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        written.append(path)

    rows = []
    for metric in METRICS:
        for method in report.methods:
            for f in table_fractions(report.fractions):
                c = report.cell(method, f)
                if c is None:
                    rows.append([metric, method, _num(f), 0, "", "", _num(SCALES[metric]), "", "", "missing"])
                    continue
                s = SCALES[metric]
                rows.append([metric, method, _num(f), c.n_reps, _num(c.mean[metric]), _num(c.sem[metric]),
                             _num(s), _num(c.mean[metric] * s), _num(c.sem[metric] * s),
                             "single repetition" if c.single_rep else ""])
    if not report.runs:
        rows = []
    write("table.csv", TABLE_COLUMNS, rows)

    for metric in METRICS:
        prow = []
        for f in report.fractions:
            for method in report.methods:
                c = report.cell(method, f)
                if c is not None:
                    prow.append([_num(f), method, _num(c.mean[metric]), _num(c.sem[metric])])
        write(f"plot_{metric}.csv", PLOT_COLUMNS, prow)

    run_rows = []
    for r in report.runs:
        vals = [""] * len(CSV_COLUMNS) if r.metrics is None else r.metrics.csv_row().split(",")
        run_rows.append([r.method, _num(r.fraction), r.rep, r.seed, r.n_labeled_engines, *vals, r.error or ""])
    write("runs.csv", RUN_COLUMNS, run_rows)

    for r in report.runs:
        if r.predictions is None:
            continue
        name = f"predictions/{r.method}_f{fraction_key(r.fraction)}_r{r.rep}.csv"
        write(name, PREDICTION_COLUMNS, prediction_rows(report.test_engine, report.test_truth, r.predictions))

    meta = out / "metadata.json"
    meta.write_text(json.dumps(report.metadata, indent=2, sort_keys=True, default=_json_default) + "\n")
    written.append(meta)
    return written


PREDICTION_COLUMNS = ("engine_id", "true_rul", "predicted_rul")


def prediction_rows(engine_ids, truth, pred) -> list[list]:
    return [[int(e), _num(t), _num(p)] for e, t, p in zip(engine_ids, truth, pred)]


def write_predictions(path, engine_ids, truth, pred) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        w.writerows(prediction_rows(engine_ids, truth, pred))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
