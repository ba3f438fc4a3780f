"""Rollout batches, GAE for the three signal streams, and return moments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .risk import MomentEstimates

STREAMS = ("reward", "cost", "aug")


class NoCompletedEpisodesError(ValueError):
    pass


@dataclass(frozen=True)
class GaeConfig:
    lam: float = 0.95
    gamma: float = 0.99
    cost_gamma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("GAE lambda must lie in [0, 1]")

    def discount(self, stream: str) -> float:
        return self.gamma if stream == "reward" else self.cost_gamma


@dataclass
class Segment:
    """A contiguous run of steps from one episode inside a batch.

    Every segment starts at an episode start: collection resets the
    environment at the beginning of each batch.

    ``end`` is ``"terminated"``, ``"truncated"`` (environment time limit) or
    ``"cut"`` (the batch filled up mid-episode).
    """

    start: int
    stop: int
    end: str
    next_obs: np.ndarray | None = None


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    aug_costs: np.ndarray
    discounts: np.ndarray
    ys: np.ndarray
    on_ice: np.ndarray
    segments: list[Segment]
    old_dist: object = None
    values: dict = field(default_factory=dict)
    bootstrap: dict = field(default_factory=dict)
    advantages: dict = field(default_factory=dict)
    returns: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rewards)

    def signal(self, stream: str) -> np.ndarray:
        return {"reward": self.rewards, "cost": self.costs, "aug": self.aug_costs}[stream]

    @property
    def complete_segments(self) -> list[Segment]:
        """Whole episodes; batch-boundary cuts are partial and excluded."""
        return [s for s in self.segments if s.end != "cut"]

    def episode_stat(self, values, discount=None) -> np.ndarray:
        out = []
        for s in self.complete_segments:
            v = values[s.start:s.stop]
            out.append(float(np.sum(v if discount is None else discount[s.start:s.stop] * v)))
        return np.array(out)

    def cost_returns(self) -> np.ndarray:
        return self.episode_stat(self.costs, self.discounts)

    def aug_returns(self) -> np.ndarray:
        return self.episode_stat(self.aug_costs, self.discounts)

    def reward_returns(self) -> np.ndarray:
        return self.episode_stat(self.rewards)

    def successes(self) -> np.ndarray:
        return np.array([s.end == "terminated" for s in self.complete_segments], dtype=float)

    def mean_episode_length(self) -> float:
        segs = self.complete_segments
        if segs:
            return float(np.mean([s.stop - s.start for s in segs]))
        return float(np.mean([s.stop - s.start for s in self.segments]))


def compute_gae(rewards, values, bootstrap: float, gamma: float, lam: float) -> np.ndarray:
    """GAE over one segment; ``bootstrap`` is the value after the last step (0 if terminal)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    adv = np.zeros_like(rewards)
    next_value, acc = bootstrap, 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        next_value = values[t]
    return adv


def annotate(batch: RolloutBatch, config: GaeConfig):
    """Fill advantages and return targets for every stream.

    Requires ``batch.values[stream]`` (per step) and ``batch.bootstrap[stream]``
    (one value per segment, ignored for terminated segments).
    """
    for stream in STREAMS:
        gamma = config.discount(stream)
        sig = batch.signal(stream)
        vals = batch.values[stream]
        adv = np.zeros(len(batch))
        for i, seg in enumerate(batch.segments):
            boot = 0.0 if seg.end == "terminated" else float(batch.bootstrap[stream][i])
            sl = slice(seg.start, seg.stop)
            adv[sl] = compute_gae(sig[sl], vals[sl], boot, gamma, config.lam)
        batch.advantages[stream] = adv
        batch.returns[stream] = adv + vals


def estimate_moments(batch: RolloutBatch) -> MomentEstimates:
    """Monte-Carlo mean cost return and mean augmented-cost return."""
    costs = batch.cost_returns()
    if len(costs) == 0:
        raise NoCompletedEpisodesError("batch contains no completed episodes")
    return MomentEstimates(mu=float(costs.mean()), j_aug=float(batch.aug_returns().mean()),
                           sample_count=len(costs))


def advantage_normalize(advantages, stream: str) -> np.ndarray:
    """Standardize reward advantages; cost-stream advantages pass through unchanged."""
    advantages = np.asarray(advantages, dtype=float)
    if stream != "reward":
        return advantages.copy()
    centered = advantages - advantages.mean()
    std = centered.std(ddof=1) if len(centered) > 1 else 0.0
    if std < 1e-12:
        return np.zeros_like(advantages)
    return centered / std
