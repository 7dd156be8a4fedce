"""Multi-seed runs, metric files and the run directory layout.

Layout under ``out``::

    config.resolved
    aggregate.csv
    seed_<k>/metrics.csv
    seed_<k>/final.params
"""

from __future__ import annotations

import csv
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, dump_config
from .nets import load_params, save_params
from .qmix import QmixLearner
from .trainer import OnPolicyLearner, evaluate

log = logging.getLogger(__name__)

METRIC_HEADER = ("step", "episodes", "metric", "value")
THREADS_ENV = "NOISY_MARL_THREADS"
EVAL_SEED_OFFSET = 7_777


def make_learner(cfg: ExperimentConfig, seed: int):
    cfg = cfg.resolved()
    return QmixLearner(cfg, seed) if cfg.algo == "qmix" else OnPolicyLearner(cfg, seed)


def fmt(value: float) -> str:
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    return repr(float(value))


@dataclass
class SeedResult:
    seed: int
    eval_steps: list[int] = field(default_factory=list)
    eval_episodes: list[int] = field(default_factory=list)
    eval_returns: list[float] = field(default_factory=list)
    error: str | None = None


def train_seed(cfg: ExperimentConfig, seed: int, seed_dir: Path | None = None):
    """Train one seed; returns (learner, SeedResult, metric rows)."""
    cfg = cfg.resolved()
    learner = make_learner(cfg, seed)
    per_iter = cfg.num_envs * cfg.buffer_length
    iterations = math.ceil(cfg.total_steps / per_iter)
    rows: list[tuple] = []
    result = SeedResult(seed)
    eval_seed = seed * 10_000 + EVAL_SEED_OFFSET

    def run_eval():
        ret = evaluate(learner, cfg.env, cfg.eval_episodes, seed=eval_seed)
        step, eps = learner.total_steps, learner.venv.episodes
        rows.append((step, eps, "eval_return_mean", ret))
        result.eval_steps.append(step)
        result.eval_episodes.append(eps)
        result.eval_returns.append(ret)

    run_eval()
    bucket = 0
    for _ in range(iterations):
        metrics = learner.iterate()
        step, eps = learner.total_steps, learner.venv.episodes
        for name, value in metrics.items():
            rows.append((step, eps, name, value))
        if step // cfg.eval_interval > bucket or step >= iterations * per_iter:
            bucket = step // cfg.eval_interval
            run_eval()
    if seed_dir is not None:
        seed_dir.mkdir(parents=True, exist_ok=True)
        write_metrics(seed_dir / "metrics.csv", rows)
        save_params(seed_dir / "final.params", learner.state_dict())
    return learner, result, rows


def write_metrics(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_HEADER)
        for step, eps, name, value in rows:
            w.writerow((step, eps, name, fmt(value)))


def read_metrics(path: Path) -> dict[str, list[tuple[int, int, float]]]:
    out: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["metric"], []).append(
                (int(row["step"]), int(row["episodes"]), float(row["value"])))
    return out


def _seed_worker(args) -> SeedResult:
    cfg, seed, seed_dir = args
    try:
        _, result, _ = train_seed(cfg, seed, seed_dir)
        return result
    except Exception:  # noqa: BLE001 - a failing seed must not take down the others
        err = traceback.format_exc()
        seed_dir.mkdir(parents=True, exist_ok=True)
        (seed_dir / "error.txt").write_text(err)
        return SeedResult(seed, error=err)


def worker_count(n_jobs: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    cap = int(raw) if raw else (os.cpu_count() or 1)
    return max(1, min(cap, n_jobs))


@dataclass
class RunResult:
    out_dir: Path
    seeds: list[SeedResult]

    @property
    def failures(self) -> list[SeedResult]:
        return [s for s in self.seeds if s.error is not None]

    @property
    def ok(self) -> list[SeedResult]:
        return [s for s in self.seeds if s.error is None]

    def median_curve(self) -> tuple[list[int], np.ndarray]:
        ok = self.ok
        if not ok:
            return [], np.zeros(0)
        return ok[0].eval_steps, np.median(np.array([s.eval_returns for s in ok]), axis=0)


def write_aggregate(path: Path, seeds: list[SeedResult]) -> None:
    ok = [s for s in seeds if s.error is None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "episodes"] + [f"seed_{s.seed}" for s in ok] + ["median_return"])
        if not ok:
            return
        table = np.array([s.eval_returns for s in ok])
        med = np.median(table, axis=0)
        for j, step in enumerate(ok[0].eval_steps):
            w.writerow([step, ok[0].eval_episodes[j]] + [fmt(v) for v in table[:, j]] + [fmt(med[j])])


def run_experiment(cfg: ExperimentConfig, out: str | Path) -> RunResult:
    cfg = cfg.resolved()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(dump_config(cfg))
    jobs = [(cfg, seed, out / f"seed_{seed}") for seed in cfg.seed_list()]
    workers = worker_count(len(jobs))
    log.info("running %s on %s: %d seeds, %d workers", cfg.algo, cfg.env, len(jobs), workers)
    if workers == 1:
        results = [_seed_worker(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_seed_worker, jobs))
    for r in results:
        if r.error:
            log.error("seed %d failed:\n%s", r.seed, r.error)
    write_aggregate(out / "aggregate.csv", results)
    return RunResult(out, results)


def load_learner(run_dir: str | Path, seed: int | None = None, cfg: ExperimentConfig | None = None):
    """Rebuild a learner from a run directory and load its final checkpoint."""
    from .config import load_config

    run_dir = Path(run_dir)
    cfg = cfg or load_config(run_dir / "config.resolved")
    seed = cfg.seed_list()[0] if seed is None else seed
    learner = make_learner(cfg, seed)
    learner.load_state_dict(load_params(run_dir / f"seed_{seed}" / "final.params"))
    return learner
