"""RUL evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EARLY_RATE = 1.0 / 13.0
LATE_RATE = 1.0 / 10.0

CSV_COLUMNS = ("n", "mae", "mse", "score", "score_e2", "r2")


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.shape != t.shape:
        raise ValueError(f"prediction/truth length mismatch: {p.size} vs {t.size}")
    if p.size == 0:
        raise ValueError("no predictions to score")
    return p, t


def score(pred, truth) -> float:
    """Asymmetric exponential penalty; late predictions (pred > truth) cost more."""
    p, t = _pair(pred, truth)
    d = p - t
    rate = np.where(d < 0, EARLY_RATE, LATE_RATE)
    return float(np.sum(np.expm1(rate * np.abs(d))))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def r2(pred, truth) -> float:
    p, t = _pair(pred, truth)
    if p.size < 2:
        raise ValueError("R^2 needs at least two points")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 is undefined for constant truth")
    return 1.0 - float(np.sum((p - t) ** 2)) / ss_tot


@dataclass
class MetricReport:
    n: int
    mae: float
    mse: float
    score: float
    r2: float

    @property
    def score_e2(self) -> float:
        return self.score * 1e-2

    def row(self) -> list:
        return [self.n, self.mae, self.mse, self.score, self.score_e2, self.r2]

    def csv_row(self) -> str:
        return ",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in self.row())


def evaluate(pred, truth) -> MetricReport:
    p, t = _pair(pred, truth)
    return MetricReport(int(p.size), mae(p, t), mse(p, t), score(p, t), r2(p, t))
