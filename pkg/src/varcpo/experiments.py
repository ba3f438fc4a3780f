"""Multi-seed IcyLake comparison and the recovery-from-unsafe-start experiment."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .trainer import train


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _floats(rows, column):
    return np.array([float(r[column]) if r[column] != "" else np.nan for r in rows])


@dataclass
class FinalSummary:
    """Metrics averaged over the last ``window`` iterations of a run."""

    reward_return: float
    cost_return: float
    cost_p95: float
    success_rate: float
    ice_visitation: float
    violation_rate: float
    env_steps: int


def final_summary(metrics_csv, window: int = 5) -> FinalSummary:
    rows = read_rows(metrics_csv)
    if not rows:
        raise ValueError(f"{metrics_csv}: no iterations recorded")
    tail = rows[-window:]

    def avg(col):
        return float(np.nanmean(_floats(tail, col)))

    return FinalSummary(avg("reward_return"), avg("cost_return"), avg("cost_p95"), avg("success_rate"),
                        avg("ice_visitation"), avg("violation_rate"), int(rows[-1]["env_steps"]))


def run_seeds(base: TrainConfig, seeds, out_dir, total_steps: int | None = None,
              quiet: bool = True) -> list[Path]:
    """Train ``base`` once per seed under ``out_dir/seed_<n>``; returns the metrics CSVs."""
    paths = []
    for seed in seeds:
        cfg = dataclasses.replace(base, seed=int(seed), output_dir=str(Path(out_dir) / f"seed_{seed}"),
                                  env_params=dict(base.env_params))
        if total_steps is not None:
            cfg.total_steps = int(total_steps)
        train(cfg, quiet=quiet)
        paths.append(Path(cfg.output_dir) / "metrics.csv")
    return paths


def moving_average(x, window: int = 5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if len(x) < window:
        return np.array([x.mean()]) if len(x) else x
    return np.convolve(x, np.ones(window) / window, mode="valid")


@dataclass
class RecoveryTrace:
    mu: np.ndarray
    modes: list[str]
    rho: float

    @property
    def first_safe(self) -> int | None:
        """First iteration whose estimated mean cost is below ``rho``."""
        below = np.nonzero(self.mu < self.rho)[0]
        return int(below[0]) if len(below) else None

    def checks(self, window: int = 5) -> dict[str, bool]:
        """Named pass/fail properties of a run started from an unsafe policy."""
        k = self.first_safe
        out = {"starts in recovery": bool(self.modes) and self.modes[0] == "recovery",
               "reaches mu < rho": k is not None}
        if k is None:
            return out
        out["recovery until mu < rho"] = all(m == "recovery" for m in self.modes[:k])
        ma = moving_average(self.mu[:k + 1], min(window, k + 1))
        out["mean cost trends down"] = bool(np.all(np.diff(ma) < 0.0))
        out["switches to var mode"] = k < len(self.modes) and self.modes[k] == "var"
        return out


def recovery_trace(metrics_csv, rho: float) -> RecoveryTrace:
    rows = read_rows(metrics_csv)
    return RecoveryTrace(_floats(rows, "mu"), [r["mode"] for r in rows], rho)


def run_recovery(pretrain: TrainConfig, varcpo: TrainConfig, out_dir, iterations: int = 40,
                 quiet: bool = True) -> Path:
    """Pretrain a cost-seeking policy, then continue from it with the VaR constraint.

    Returns the metrics CSV of the constrained run.
    """
    out_dir = Path(out_dir)
    pre = dataclasses.replace(pretrain, output_dir=str(out_dir / "pretrain"),
                              env_params=dict(pretrain.env_params))
    start = train(pre, quiet=quiet)
    run = dataclasses.replace(varcpo, output_dir=str(out_dir / "recovery"), init_policy=str(start / "policy.txt"),
                              env_params=dict(varcpo.env_params))
    train(run, quiet=quiet, max_iterations=iterations)
    return Path(run.output_dir) / "metrics.csv"
