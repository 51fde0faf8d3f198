"""C-MAPSS ingestion and preprocessing.

Pipeline: parse -> operational modes -> mode-wise min-max scaling -> sensor
filtering -> capped RUL labels -> sliding windows. Label dropping happens per
engine, after preprocessing.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ndcore import RngState

log = logging.getLogger(__name__)

N_SETTINGS = 3
N_SENSORS = 21
N_COLUMNS = 2 + N_SETTINGS + N_SENSORS
SENSOR_NAMES = [f"sensor_{i}" for i in range(1, N_SENSORS + 1)]


class DataError(ValueError):
    pass


@dataclass
class DataConfig:
    window: int = 30
    stride: int = 1
    max_rul: float = 140.0
    discrete_threshold: int = 20
    mode_precision: int = 1

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window length must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not self.max_rul > 0:
            raise ValueError("max_rul must be positive")


@dataclass
class RawTrajectory:
    engine_id: int
    cycles: np.ndarray
    settings: np.ndarray  # (L, 3)
    sensors: np.ndarray   # (L, 21)

    def __len__(self) -> int:
        return len(self.cycles)


@dataclass
class CmapssData:
    train: list[RawTrajectory]
    test: list[RawTrajectory]
    test_rul: np.ndarray


# ---------------------------------------------------------------- parsing

def read_trajectories(path) -> list[RawTrajectory]:
    path = Path(path)
    rows: dict[int, list] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != N_COLUMNS:
                raise DataError(f"{path}:{lineno}: expected {N_COLUMNS} columns, found {len(parts)}")
            try:
                values = [float(p) for p in parts]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            rows.setdefault(int(values[0]), []).append((lineno, values))
    out = []
    for engine, recs in rows.items():
        arr = np.array([v for _, v in recs])
        cycles = arr[:, 1].astype(int)
        expected = np.arange(1, len(cycles) + 1)
        if not np.array_equal(cycles, expected):
            bad = int(np.argmax(cycles != expected))
            raise DataError(f"{path}:{recs[bad][0]}: engine {engine} cycles are not contiguous from 1 "
                            f"(got {cycles[bad]}, expected {expected[bad]})")
        out.append(RawTrajectory(engine, cycles, arr[:, 2:5].copy(), arr[:, 5:].copy()))
    if not out:
        raise DataError(f"{path}: no data rows")
    return out


def read_rul(path, n_engines: int) -> np.ndarray:
    path = Path(path)
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            try:
                values.append(float(s.split()[0]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: not a number: {s!r}") from None
    if len(values) < n_engines:
        raise DataError(f"{path}: {len(values)} RUL rows for {n_engines} test engines")
    if len(values) > n_engines:
        raise DataError(f"{path}: {len(values)} RUL rows but only {n_engines} test engines")
    return np.array(values)


def parse_cmapss(train_file, test_file, rul_file) -> CmapssData:
    train = read_trajectories(train_file)
    test = read_trajectories(test_file)
    return CmapssData(train, test, read_rul(rul_file, len(test)))


def subset_files(data_dir, subset: str = "FD001") -> tuple[Path, Path, Path]:
    d = Path(data_dir)
    return d / f"train_{subset}.txt", d / f"test_{subset}.txt", d / f"RUL_{subset}.txt"


# ---------------------------------------------------------------- operational modes

@dataclass
class ModeTable:
    keys: np.ndarray  # (n_modes, 3) rounded setting tuples
    precision: int

    @property
    def n_modes(self) -> int:
        return len(self.keys)

    def assign(self, settings: np.ndarray) -> np.ndarray:
        """Mode id per row; tuples never seen in training go to the nearest mode."""
        rounded = np.round(settings, self.precision)
        d = ((rounded[:, None, :] - self.keys[None, :, :]) ** 2).sum(axis=2)
        ids = d.argmin(axis=1)
        unseen = d[np.arange(len(ids)), ids] > 0
        if unseen.any():
            log.info("%d rows with unseen operating settings mapped to the nearest mode", int(unseen.sum()))
        return ids


def identify_modes(trajectories: Sequence[RawTrajectory], precision: int = 1) -> ModeTable:
    allset = np.concatenate([t.settings for t in trajectories])
    keys = np.unique(np.round(allset, precision), axis=0)
    return ModeTable(keys, precision)


# ---------------------------------------------------------------- normalisation

@dataclass
class NormalizationTable:
    mins: np.ndarray  # (n_modes, n_sensors)
    maxs: np.ndarray

    @property
    def span(self) -> np.ndarray:
        return self.maxs - self.mins

    def apply(self, sensors: np.ndarray, mode_ids: np.ndarray) -> np.ndarray:
        lo = self.mins[mode_ids]
        span = self.span[mode_ids]
        out = np.zeros_like(sensors, dtype=float)
        ok = span > 0  # constant within a mode -> 0
        out[ok] = (sensors[ok] - lo[ok]) / span[ok]
        return out

    def invert(self, scaled: np.ndarray, mode_ids: np.ndarray) -> np.ndarray:
        return self.mins[mode_ids] + scaled * self.span[mode_ids]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mins).tobytes())
        h.update(np.ascontiguousarray(self.maxs).tobytes())
        return h.hexdigest()


def normalize(trajectories: Sequence[RawTrajectory], modes: ModeTable,
              table: NormalizationTable | None = None) -> tuple[list[np.ndarray], NormalizationTable]:
    """Mode-wise min-max scaling of the 21 sensors.

    Without ``table`` the statistics are fitted on ``trajectories``; pass the
    training table to scale held-out data (values may then leave [0, 1]).
    """
    mode_ids = [modes.assign(t.settings) for t in trajectories]
    if table is None:
        allsens = np.concatenate([t.sensors for t in trajectories])
        allmodes = np.concatenate(mode_ids)
        n_sens = allsens.shape[1]
        mins = np.zeros((modes.n_modes, n_sens))
        maxs = np.zeros((modes.n_modes, n_sens))
        for m in range(modes.n_modes):
            sel = allsens[allmodes == m]
            if len(sel):
                mins[m] = sel.min(axis=0)
                maxs[m] = sel.max(axis=0)
        table = NormalizationTable(mins, maxs)
    return [table.apply(t.sensors, ids) for t, ids in zip(trajectories, mode_ids)], table


def filter_sensors(raw: Sequence[RawTrajectory], scaled: Sequence[np.ndarray], threshold: int = 20) -> np.ndarray:
    """Boolean keep-mask over sensors: drop zero-variance (after scaling) and discrete ones."""
    allscaled = np.concatenate(scaled)
    allraw = np.concatenate([t.sensors for t in raw])
    varying = allscaled.std(axis=0) > 0
    n_unique = np.array([len(np.unique(allraw[:, j])) for j in range(allraw.shape[1])])
    keep = varying & (n_unique >= threshold)
    if not keep.any():
        raise DataError("every sensor was filtered out")
    return keep


# ---------------------------------------------------------------- labels and windows

def assign_rul(n_cycles: int, cap: float = 140.0) -> np.ndarray:
    """RUL per cycle of a run-to-failure trajectory (final cycle -> 0), capped at ``cap``."""
    return np.minimum(np.arange(n_cycles - 1, -1, -1, dtype=float), cap)


def window(values: np.ndarray, T: int, stride: int = 1, labels: np.ndarray | None = None):
    """Sliding windows over a (L, F) trajectory.

    Returns ``(windows, window_labels, padded)``. Windows end at cycles
    T, T + stride, ...; each window takes the label of its final cycle.
    Trajectories shorter than T give a single window left-padded with the first
    cycle and ``padded`` set.
    """
    if T < 1:
        raise ValueError("window length must be >= 1")
    L = len(values)
    padded = L < T
    if padded:
        values = np.concatenate([np.repeat(values[:1], T - L, axis=0), values])
        if labels is not None:
            labels = np.concatenate([np.repeat(labels[:1], T - L), labels])
        L = T
    ends = np.arange(T, L + 1, stride)
    idx = ends[:, None] - T + np.arange(T)[None, :]
    wins = values[idx]
    lab = None if labels is None else labels[ends - 1]
    return wins, lab, padded


def last_window(values: np.ndarray, T: int) -> tuple[np.ndarray, bool]:
    wins, _, padded = window(values, T, 1)
    return wins[-1], padded


def label_count(fraction: float, n_engines: int) -> int:
    # tolerate float noise such as 0.29 * 100 = 28.999999999999996
    return math.ceil(round(fraction * n_engines, 9))


def drop_labels(engines: Sequence[int], fraction: float, rng: RngState) -> np.ndarray:
    """Boolean mask over ``engines``: True for the ceil(f * n) engines that keep their labels."""
    if not 0 < fraction <= 1:
        raise ValueError(f"label fraction must lie in (0, 1], got {fraction}")
    n = len(engines)
    k = label_count(fraction, n)
    if k < 1:
        raise DataError(f"fraction {fraction} leaves no labeled engine among {n}")
    mask = np.zeros(n, dtype=bool)
    if k >= n:
        mask[:] = True
    else:
        mask[rng.choice(n, k)] = True
    return mask


# ---------------------------------------------------------------- processed bundle

@dataclass
class ProcessedDataset:
    X: np.ndarray             # (n, T, F) training windows
    y: np.ndarray             # (n,) capped RUL at each window's final cycle
    engine: np.ndarray        # (n,) engine id per window
    test_X: np.ndarray        # (n_test, T, F) last window per test engine
    test_y: np.ndarray        # (n_test,) true RUL at truncation
    test_engine: np.ndarray
    sensor_mask: np.ndarray   # (21,) bool
    mode_keys: np.ndarray
    norm_mins: np.ndarray
    norm_maxs: np.ndarray
    config: DataConfig = field(default_factory=DataConfig)
    summary: dict = field(default_factory=dict)

    _ARRAYS = ("X", "y", "engine", "test_X", "test_y", "test_engine", "sensor_mask",
               "mode_keys", "norm_mins", "norm_maxs")

    @property
    def engines(self) -> np.ndarray:
        return np.unique(self.engine)

    @property
    def n_features(self) -> int:
        return self.X.shape[2]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in self._ARRAYS:
            a = np.ascontiguousarray(getattr(self, name))
            h.update(name.encode())
            h.update(str(a.dtype).encode())
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        h.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        return h.hexdigest()

    def labeled_subset(self, labeled_engines: np.ndarray):
        sel = np.isin(self.engine, labeled_engines)
        return self.X[sel], self.y[sel], self.engine[sel]

    def save(self, path) -> None:
        meta = {"config": asdict(self.config), "summary": self.summary, "content_hash": self.content_hash()}
        arrays = {name: getattr(self, name) for name in self._ARRAYS}
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "ProcessedDataset":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            arrays = {name: z[name] for name in cls._ARRAYS}
        ds = cls(**arrays, config=DataConfig(**meta["config"]), summary=meta["summary"])
        if ds.content_hash() != meta["content_hash"]:
            raise DataError(f"{path}: content hash mismatch")
        return ds


def preprocess(data: CmapssData, config: DataConfig | None = None) -> ProcessedDataset:
    config = config or DataConfig()
    modes = identify_modes(data.train, config.mode_precision)
    scaled, table = normalize(data.train, modes)
    keep = filter_sensors(data.train, scaled, config.discrete_threshold)
    test_scaled, _ = normalize(data.test, modes, table)

    xs, ys, es = [], [], []
    n_padded = 0
    for traj, vals in zip(data.train, scaled):
        labels = assign_rul(len(traj), config.max_rul)
        w, lab, padded = window(vals[:, keep], config.window, config.stride, labels)
        n_padded += padded
        xs.append(w)
        ys.append(lab)
        es.append(np.full(len(w), traj.engine_id))
    tx, n_test_padded = [], 0
    for vals in test_scaled:
        w, padded = last_window(vals[:, keep], config.window)
        n_test_padded += padded
        tx.append(w)

    summary = {
        "n_train_engines": len(data.train),
        "n_test_engines": len(data.test),
        "n_train_cycles": int(sum(len(t) for t in data.train)),
        "n_test_cycles": int(sum(len(t) for t in data.test)),
        "n_modes": modes.n_modes,
        "mode_precision": config.mode_precision,
        "kept_sensors": [SENSOR_NAMES[j] for j in np.flatnonzero(keep)],
        "n_kept_sensors": int(keep.sum()),
        "n_train_windows": int(sum(len(x) for x in xs)),
        "padded_train_engines": int(n_padded),
        "padded_test_engines": int(n_test_padded),
    }
    return ProcessedDataset(
        X=np.concatenate(xs), y=np.concatenate(ys), engine=np.concatenate(es),
        test_X=np.stack(tx), test_y=data.test_rul.astype(float),
        test_engine=np.array([t.engine_id for t in data.test]),
        sensor_mask=keep, mode_keys=modes.keys, norm_mins=table.mins, norm_maxs=table.maxs,
        config=config, summary=summary,
    )


def load_subset(data_dir, subset: str = "FD001", config: DataConfig | None = None) -> ProcessedDataset:
    files = subset_files(data_dir, subset)
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f)
    return preprocess(parse_cmapss(*files), config)
