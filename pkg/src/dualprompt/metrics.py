"""Score bookkeeping: the lower-triangular accuracy matrix and its summaries."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class IncompleteRowError(ValueError):
    """A metric was requested for a row that is not fully filled in."""


@dataclass
class ScoreMatrix:
    """``S[t][tau]``: accuracy (percent) on task ``tau`` after training task ``t``.

    Indices are 1-based in the public methods, as in the usual notation.
    """
    num_tasks: int
    rows: list[list[float]] = field(default_factory=list)
    seed: Optional[int] = None
    mode: str = ""

    def __post_init__(self):
        self.rows = [list(map(float, r)) for r in self.rows]

    @classmethod
    def from_array(cls, s, **kw) -> "ScoreMatrix":
        s = np.asarray(s, dtype=np.float64)
        return cls(s.shape[0], [list(s[t, :t + 1]) for t in range(s.shape[0])], **kw)

    def set(self, t: int, tau: int, score: float) -> None:
        if not 1 <= tau <= t <= self.num_tasks:
            raise IndexError(f"S[{t}][{tau}] outside the lower triangle of a {self.num_tasks}-task matrix")
        if not 0.0 <= score <= 100.0:
            raise ValueError(f"score {score} outside [0, 100]")
        while len(self.rows) < t:
            self.rows.append([])
        row = self.rows[t - 1]
        while len(row) < tau:
            row.append(float("nan"))
        row[tau - 1] = float(score)

    def get(self, t: int, tau: int) -> float:
        return self.rows[t - 1][tau - 1]

    def row(self, t: int) -> list[float]:
        if t < 1 or t > len(self.rows) or len(self.rows[t - 1]) != t or any(np.isnan(self.rows[t - 1])):
            raise IncompleteRowError(f"row {t} of the score matrix is incomplete")
        return self.rows[t - 1]

    @property
    def completed(self) -> int:
        return len(self.rows)

    def as_array(self) -> np.ndarray:
        out = np.full((self.num_tasks, self.num_tasks), np.nan)
        for t, r in enumerate(self.rows):
            out[t, :len(r)] = r
        return out

    # ------------------------------------------------------------ text artifact

    def to_text(self) -> str:
        """Header line plus one CSV line per completed row, 17 significant digits."""
        buf = io.StringIO()
        seed = "" if self.seed is None else self.seed
        buf.write(f"# score-matrix v1 T={self.num_tasks} seed={seed} mode={self.mode}\n")
        w = csv.writer(buf, lineterminator="\n")
        for t, r in enumerate(self.rows, start=1):
            w.writerow([t] + [format(v, ".17g") for v in r])
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "ScoreMatrix":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# score-matrix v1"):
            raise ValueError("not a score-matrix artifact")
        meta = dict(tok.split("=", 1) for tok in lines[0].split()[3:])
        rows = [[float(v) for v in line.split(",")[1:]] for line in lines[1:] if line.strip()]
        seed = int(meta["seed"]) if meta.get("seed") else None
        return cls(int(meta["T"]), rows, seed=seed, mode=meta.get("mode", ""))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "ScoreMatrix":
        return cls.from_text(Path(path).read_text())


def avg_accuracy(s: ScoreMatrix, t: int) -> float:
    """Mean of row ``t``: accuracy over all tasks seen so far."""
    row = s.row(t)
    return float(sum(row) / t)


def forgetting(s: ScoreMatrix, t: int) -> Optional[float]:
    """Mean over earlier tasks of the largest drop from any earlier score.

    Undefined for ``t < 2``; returns ``None`` in that case.
    """
    if t < 2:
        return None
    cur = s.row(t)
    total = 0.0
    for tau in range(1, t):
        best = max(s.get(tp, tau) for tp in range(tau, t))
        total += best - cur[tau - 1]
    return float(total / (t - 1))


def matching_accuracy(predicted: Sequence[int], truth: Sequence[int]) -> float:
    if len(predicted) != len(truth):
        raise ValueError(f"matching_accuracy: {len(predicted)} predictions for {len(truth)} labels")
    if len(truth) == 0:
        raise ValueError("matching_accuracy: empty input")
    hits = sum(int(p) == int(y) for p, y in zip(predicted, truth))
    return 100.0 * hits / len(truth)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation, ignoring ``None`` entries."""
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return float("nan"), float("nan")
    return float(vals.mean()), float(vals.std())


def fmt_pm(values: Sequence[float]) -> str:
    m, sd = mean_std(values)
    return "n/a" if np.isnan(m) else f"{m:.2f}±{sd:.2f}"
