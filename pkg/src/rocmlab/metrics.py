"""Sample-quality metrics and the run-metrics sink."""
from __future__ import annotations

import csv

import numpy as np

__all__ = ["sliced_w2", "RunMetrics", "CSV_COLUMNS"]


def sliced_w2(x: np.ndarray, y: np.ndarray, n_projections: int = 128,
              rng: np.random.Generator | None = None) -> float:
    """Sliced 2-Wasserstein distance between two equal-size empirical samples."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape:
        n = min(len(x), len(y))
        x, y = x[:n], y[:n]
    rng = rng or np.random.default_rng(0)
    dirs = rng.standard_normal((x.shape[1], n_projections))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    px = np.sort(x @ dirs, axis=0)
    py = np.sort(y @ dirs, axis=0)
    return float(np.sqrt(np.mean((px - py) ** 2)))


CSV_COLUMNS = ("iter", "reward_mean", "div_mean", "grad_norm", "fidelity", "param_dist", "wall_ms")


class RunMetrics:
    """Append-only per-iteration records, optionally streamed to CSV."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self._fh = None
        self._writer = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=CSV_COLUMNS)
            self._writer.writeheader()
            self._fh.flush()

    def append(self, row: dict) -> None:
        if self.rows and row["iter"] <= self.rows[-1]["iter"]:
            raise ValueError("iteration index must increase")
        row = {k: row.get(k, float("nan")) for k in CSV_COLUMNS}
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow({k: _fmt(v) for k, v in row.items()})
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def last(self, name: str, finite: bool = True) -> float:
        for r in reversed(self.rows):
            v = r[name]
            if not finite or np.isfinite(v):
                return float(v)
        return float("nan")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
