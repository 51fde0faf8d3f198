import os
from pathlib import Path

import numpy as np
import pytest

from vaerul import synthetic

STEP = 1e-5


def numeric_grad(f, arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar f() w.r.t. every entry of arr (mutated in place, then restored)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if den == 0 else float(num / den)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory) -> Path:
    d = tmp_path_factory.mktemp("synth")
    synthetic.write_fleet(d, "SYN001", n_train=100, n_test=100, seed=11)
    return d


@pytest.fixture(scope="session")
def small_synth_dir(tmp_path_factory) -> Path:
    d = tmp_path_factory.mktemp("synth_small")
    synthetic.write_fleet(d, "SYN001", n_train=12, n_test=8, seed=5, life_range=(60, 90))
    return d


def cmapss_dir() -> Path | None:
    """Directory holding the NASA FD001 files, from $CMAPSS_DIR or ./data/CMAPSS."""
    for cand in (os.environ.get("CMAPSS_DIR"), Path(__file__).resolve().parents[1] / "data" / "CMAPSS"):
        if cand and (Path(cand) / "train_FD001.txt").exists():
            return Path(cand)
    return None


ACCEPTANCE_LINES: list[str] = []


def acceptance_line(number: int, status: str, text: str) -> None:
    line = f"criterion {number}: {status} - {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
