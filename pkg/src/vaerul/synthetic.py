"""Synthetic run-to-failure fleets written in the C-MAPSS text layout.

Used for tests and smoke runs when the NASA files are not at hand. Each engine
has a latent health index that decays exponentially towards failure; 17
sensors respond to it (with noise and per-mode offsets), two are constant and
two are discrete, so the standard filtering keeps 17 channels.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import N_SENSORS

CONTINUOUS = [2, 3, 4, 6, 7, 8, 9, 11, 12, 13, 14, 15, 17, 19, 20, 21, 10]  # 1-based sensor numbers
CONSTANT = [1, 18]
DISCRETE = [5, 16]


def _engine(rng: np.random.Generator, life: int, modes: np.ndarray, sens: np.ndarray, noise: float):
    t = np.arange(1, life + 1)
    wear0 = rng.uniform(0.0, 0.15)
    rate = rng.uniform(4.0, 6.0)
    health = wear0 + (np.exp(rate * t / life) - 1.0) / (np.exp(rate) - 1.0)
    mode = rng.integers(0, len(modes), size=life)
    settings = modes[mode] + rng.normal(0.0, [0.0015, 0.0002, 0.0], size=(life, 3))
    s = np.zeros((life, N_SENSORS))
    for j in range(N_SENSORS):
        s[:, j] = 500.0 + 10.0 * j + 5.0 * mode
    for i, num in enumerate(CONTINUOUS):
        j = num - 1
        s[:, j] += sens[i] * health + noise * rng.normal(size=life)
    for num in DISCRETE:
        j = num - 1
        s[:, j] = np.round(s[:, j] + 3.0 * health)
    return settings, s


def generate_fleet(n_train: int = 100, n_test: int = 100, seed: int = 0, n_modes: int = 1,
                   life_range: tuple[int, int] = (128, 300), noise: float = 0.15):
    """Return (train_rows, test_rows, test_rul) as numpy arrays in C-MAPSS column order."""
    rng = np.random.default_rng(seed)
    modes = np.array([[0.0, 0.0, 100.0]] + [[10.0 * m, 0.25 * m, 100.0 - 20.0 * (m % 2)] for m in range(1, n_modes)])
    sens = rng.choice([-1.0, 1.0], size=len(CONTINUOUS)) * rng.uniform(0.8, 2.0, size=len(CONTINUOUS))

    def rows(engine_id, settings, s):
        n = len(s)
        return np.column_stack([np.full(n, engine_id), np.arange(1, n + 1), settings, s])

    train = []
    for e in range(1, n_train + 1):
        life = int(rng.integers(*life_range))
        train.append(rows(e, *_engine(rng, life, modes, sens, noise)))
    test, truth = [], []
    for e in range(1, n_test + 1):
        life = int(rng.integers(*life_range))
        cut = int(rng.integers(max(31, life // 4), life - 5))
        settings, s = _engine(rng, life, modes, sens, noise)
        test.append(rows(e, settings[:cut], s[:cut]))
        truth.append(life - cut)
    return np.concatenate(train), np.concatenate(test), np.array(truth)


def _fmt(rows: np.ndarray) -> str:
    lines = []
    for r in rows:
        head = f"{int(r[0])} {int(r[1])} "
        lines.append(head + " ".join(f"{v:.4f}" for v in r[2:]) + " ")
    return "\n".join(lines) + "\n"


def write_fleet(out_dir, subset: str = "SYN001", **kwargs) -> tuple[Path, Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test, truth = generate_fleet(**kwargs)
    paths = (out / f"train_{subset}.txt", out / f"test_{subset}.txt", out / f"RUL_{subset}.txt")
    paths[0].write_text(_fmt(train))
    paths[1].write_text(_fmt(test))
    paths[2].write_text("".join(f"{int(v)}\n" for v in truth))
    return paths
