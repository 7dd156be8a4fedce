"""Reading run directories back, matrix-game verdicts and headless figures.

Figures are drawn from ``aggregate.csv`` only, so they can be regenerated
from a finished run without retraining.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HOLD_FRACTION = 0.25


@dataclass
class Curve:
    steps: np.ndarray
    episodes: np.ndarray
    seeds: dict[str, np.ndarray]
    median: np.ndarray

    def final_returns(self) -> dict[str, float]:
        return {k: float(v[-1]) for k, v in self.seeds.items()}


def read_aggregate(path: str | Path) -> Curve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = list(zip(*body)) if body else [()] * len(header)
    table = dict(zip(header, cols))
    seeds = {h: np.array(table[h], dtype=float) for h in header if h.startswith("seed_")}
    return Curve(np.array(table["step"], dtype=int), np.array(table["episodes"], dtype=int), seeds,
                 np.array(table["median_return"], dtype=float))


def holds_target(median: np.ndarray, target: float, fraction: float = HOLD_FRACTION) -> bool:
    """Target reached and kept over the last ``fraction`` of evaluations."""
    if median.size == 0:
        return False
    tail = max(1, math.ceil(fraction * median.size))
    return bool(np.all(median[-tail:] == target))


def reaches_target(median: np.ndarray, target: float) -> bool:
    return bool(np.any(median == target))


@dataclass
class Verdict:
    label: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.label}: {self.detail}"


def matrix_verdicts(runs: dict[str, Path]) -> list[Verdict]:
    """Checks on the matrix-game quartet keyed ``<algo>-<env>``.

    nv-mappo on matrix1 must reach 8 and hold it over the final quarter;
    nv-mappo on matrix2 must reach 12; qmix on matrix2 must end at or below
    10 in at least three seeds.
    """
    out = []
    if "nv-mappo-matrix1" in runs:
        c = read_aggregate(runs["nv-mappo-matrix1"] / "aggregate.csv")
        out.append(Verdict("nv-mappo matrix1 median = 8, held over final 25% of evals",
                           holds_target(c.median, 8.0),
                           f"final median {c.median[-1]:g}, tail {c.median[-max(1, math.ceil(c.median.size / 4)):].tolist()}"))
    if "nv-mappo-matrix2" in runs:
        c = read_aggregate(runs["nv-mappo-matrix2"] / "aggregate.csv")
        out.append(Verdict("nv-mappo matrix2 median reaches 12", reaches_target(c.median, 12.0),
                           f"best median {c.median.max():g}, final median {c.median[-1]:g}"))
    if "qmix-matrix2" in runs:
        c = read_aggregate(runs["qmix-matrix2"] / "aggregate.csv")
        finals = c.final_returns()
        low = sum(v <= 10.0 for v in finals.values())
        out.append(Verdict("qmix matrix2 final return <= 10 in >= 3 seeds", low >= 3 and len(finals) >= 5,
                           f"{low}/{len(finals)} seeds, finals {sorted(finals.values())}"))
    return out


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_curve(csv_path: str | Path, png_path: str | Path, title: str = "", x: str = "step") -> Path:
    """Seed curves (thin) and their median (thick) against steps or episodes."""
    plt = _pyplot()
    c = read_aggregate(csv_path)
    xs = c.steps if x == "step" else c.episodes
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in sorted(c.seeds.items()):
        ax.plot(xs, ys, lw=0.8, alpha=0.4)
    ax.plot(xs, c.median, lw=2.2, color="black", label="median")
    ax.set_xlabel("environment steps" if x == "step" else "episodes")
    ax.set_ylabel("greedy test return")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    png_path = Path(png_path)
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path


def plot_matrix_pair(runs: dict[str, Path], png_path: str | Path) -> Path:
    """Median curves of every algorithm, one panel per matrix game."""
    plt = _pyplot()
    envs = sorted({key.rsplit("-", 1)[1] for key in runs})
    fig, axes = plt.subplots(1, len(envs), figsize=(5.5 * len(envs), 4), squeeze=False)
    for ax, env in zip(axes[0], envs):
        for key, run in sorted(runs.items()):
            if not key.endswith("-" + env):
                continue
            c = read_aggregate(run / "aggregate.csv")
            ax.plot(c.steps, c.median, lw=2, label=key[: -len(env) - 1])
        ax.set_title(env)
        ax.set_xlabel("environment steps")
        ax.set_ylabel("median greedy return")
        ax.grid(alpha=0.3)
        ax.legend(loc="lower right")
    fig.tight_layout()
    png_path = Path(png_path)
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path
