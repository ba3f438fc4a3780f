"""Constrained MDP environments and the cost-state augmentation wrapper.

Every environment returns a raw per-step cost next to the reward. The
:class:`AugmentedEnv` wrapper tracks the accumulated discounted cost ``y`` and
the current cost discount so that risk quantities over the whole episode can
be decomposed into per-step terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

START, GOAL, SNOW, ICE = "S", "G", "D", "I"

DEFAULT_ICY_MAP = (
    "SIII",
    "DDDI",
    "DIDI",
    "DDDG",
)

# up, right, down, left as (row, col) deltas
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


class EpisodeFinishedError(RuntimeError):
    """Raised when stepping an environment whose episode already ended."""


@dataclass(frozen=True)
class CmdpSpec:
    observation_dim: int
    n_actions: int | None = None
    action_dim: int | None = None
    action_low: float = -1.0
    action_high: float = 1.0
    gamma: float = 0.99
    cost_gamma: float = 1.0
    max_episode_steps: int = 100

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.cost_gamma <= 1.0):
            raise ValueError("discount factors must lie in [0, 1]")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")
        if (self.n_actions is None) == (self.action_dim is None):
            raise ValueError("specify exactly one of n_actions / action_dim")
        if self.n_actions is not None and self.n_actions < 2:
            raise ValueError("categorical action spaces need n >= 2")

    @property
    def discrete(self) -> bool:
        return self.n_actions is not None


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    cost: float
    terminated: bool
    truncated: bool
    info: dict = field(default_factory=dict)

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated


@dataclass(frozen=True)
class AugmentedState:
    """Base observation plus accumulated discounted cost and current discount."""

    observation: np.ndarray
    y: float = 0.0
    discount: float = 1.0

    def vector(self, rho: float = 1.0) -> np.ndarray:
        """Flat input for approximators; ``y`` is divided by ``rho`` to stay O(1)."""
        return np.concatenate([self.observation, [self.y / rho, self.discount]])


def augment(outcome: StepOutcome, prev: AugmentedState, cost_gamma: float) -> AugmentedState:
    return AugmentedState(
        observation=outcome.observation,
        y=prev.y + prev.discount * outcome.cost,
        discount=prev.discount * cost_gamma,
    )


@dataclass(frozen=True)
class IcyLakeConfig:
    grid: tuple[str, ...] = DEFAULT_ICY_MAP
    snow_cost: float = 2.0
    ice_base_cost: float = 0.5
    slip_cost: float = 10.0
    slip_prob: float = 0.1
    goal_reward: float = 1.0
    # leaving a deep-snow tile takes one extra action
    snow_wading: bool = True
    gamma: float = 0.99
    cost_gamma: float = 1.0
    max_episode_steps: int = 100

    def __post_init__(self):
        flat = "".join(self.grid)
        if flat.count(START) != 1 or flat.count(GOAL) != 1:
            raise ValueError("grid needs exactly one start and one goal tile")
        if set(flat) - {START, GOAL, SNOW, ICE}:
            raise ValueError(f"unknown tile symbols in grid: {set(flat) - {START, GOAL, SNOW, ICE}}")
        if len({len(row) for row in self.grid}) != 1:
            raise ValueError("grid rows must have equal length")
        if not 0.0 <= self.slip_prob <= 1.0:
            raise ValueError("slip_prob must lie in [0, 1]")

    @property
    def expected_ice_cost(self) -> float:
        return self.ice_base_cost + self.slip_prob * self.slip_cost


class IcyLake:
    """Gridworld with deterministic moves and tile-dependent stochastic costs.

    Landing on deep snow costs ``snow_cost``; landing on ice costs
    ``ice_base_cost`` plus ``slip_cost`` with probability ``slip_prob``. The
    goal tile pays ``goal_reward`` and terminates. With ``snow_wading`` the
    first action taken on a snow tile is spent wading and does not move the
    agent, so snow routes take more time than ice routes of equal length.

    Observation: one-hot tile index followed by a wading flag.
    """

    def __init__(self, config: IcyLakeConfig | None = None):
        self.config = config or IcyLakeConfig()
        self.grid = [list(row) for row in self.config.grid]
        self.n_rows = len(self.grid)
        self.n_cols = len(self.grid[0])
        self.n_tiles = self.n_rows * self.n_cols
        flat = "".join(self.config.grid)
        self.start = divmod(flat.index(START), self.n_cols)
        self.goal = divmod(flat.index(GOAL), self.n_cols)
        self.spec = CmdpSpec(
            observation_dim=self.n_tiles + 1,
            n_actions=4,
            gamma=self.config.gamma,
            cost_gamma=self.config.cost_gamma,
            max_episode_steps=self.config.max_episode_steps,
        )
        self.rng = np.random.default_rng(0)
        self.pos = self.start
        self.wading = False
        self.t = 0
        self.finished = True

    def tile(self, pos) -> str:
        return self.grid[pos[0]][pos[1]]

    def _obs(self) -> np.ndarray:
        obs = np.zeros(self.n_tiles + 1)
        obs[self.pos[0] * self.n_cols + self.pos[1]] = 1.0
        obs[-1] = float(self.wading)
        return obs

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.pos = self.start
        self.wading = False
        self.t = 0
        self.finished = False
        return self._obs()

    def tile_cost(self, kind: str) -> float:
        cfg = self.config
        if kind == SNOW:
            return cfg.snow_cost
        if kind == ICE:
            slip = self.rng.random() < cfg.slip_prob
            return cfg.ice_base_cost + (cfg.slip_cost if slip else 0.0)
        return 0.0

    def step(self, action) -> StepOutcome:
        if self.finished:
            raise EpisodeFinishedError("episode has finished; call reset() first")
        action = int(action)
        if not 0 <= action < 4:
            raise ValueError(f"invalid action {action}")
        self.t += 1
        reward = cost = 0.0
        terminated = False
        if self.wading:
            self.wading = False
        else:
            dr, dc = MOVES[action]
            r = min(max(self.pos[0] + dr, 0), self.n_rows - 1)
            c = min(max(self.pos[1] + dc, 0), self.n_cols - 1)
            self.pos = (r, c)
            kind = self.tile(self.pos)
            cost = self.tile_cost(kind)
            if kind == GOAL:
                reward = self.config.goal_reward
                terminated = True
            elif kind == SNOW and self.config.snow_wading:
                self.wading = True
        truncated = not terminated and self.t >= self.spec.max_episode_steps
        self.finished = terminated or truncated
        info = {"tile": self.tile(self.pos), "on_ice": self.tile(self.pos) == ICE}
        return StepOutcome(self._obs(), reward, cost, terminated, truncated, info)


@dataclass(frozen=True)
class BatteryConfig:
    capacity: float = 20.0
    dt: float = 0.1
    drag: float = 0.1
    gamma: float = 0.99
    cost_gamma: float = 1.0
    max_episode_steps: int = 200


class BatteryToy:
    """1-D double integrator with a battery budget.

    The action is an acceleration in [-1, 1]; the reward is the forward
    velocity after the step and the cost is the energy ``0.5 * a**2`` drawn
    from the battery. An empty battery terminates the episode.
    Observation: ``(velocity, battery / capacity)``.
    """

    def __init__(self, config: BatteryConfig | None = None):
        self.config = config or BatteryConfig()
        self.spec = CmdpSpec(
            observation_dim=2,
            action_dim=1,
            gamma=self.config.gamma,
            cost_gamma=self.config.cost_gamma,
            max_episode_steps=self.config.max_episode_steps,
        )
        self.rng = np.random.default_rng(0)
        self.position = self.velocity = 0.0
        self.battery = self.config.capacity
        self.t = 0
        self.finished = True

    def _obs(self) -> np.ndarray:
        return np.array([self.velocity, self.battery / self.config.capacity])

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.position = self.velocity = 0.0
        self.battery = self.config.capacity
        self.t = 0
        self.finished = False
        return self._obs()

    def step(self, action) -> StepOutcome:
        if self.finished:
            raise EpisodeFinishedError("episode has finished; call reset() first")
        a = np.clip(np.asarray(action, dtype=float).reshape(-1), -1.0, 1.0)
        cfg = self.config
        self.t += 1
        cost = 0.5 * float(a @ a)
        self.velocity += cfg.dt * (float(a[0]) - cfg.drag * self.velocity)
        self.position += cfg.dt * self.velocity
        self.battery -= cost
        terminated = self.battery <= 0.0
        truncated = not terminated and self.t >= self.spec.max_episode_steps
        self.finished = terminated or truncated
        return StepOutcome(self._obs(), self.velocity, cost, terminated, truncated, {})


class AugmentedEnv:
    """Wraps an environment so observations carry ``(y, discount)``.

    ``cost_signal="exceedance"`` replaces the raw cost by a Bernoulli
    indicator that fires once, at the step where the accumulated raw cost
    first reaches ``threshold``.
    """

    def __init__(self, env, cost_signal: str = "raw", threshold: float | None = None):
        if cost_signal not in ("raw", "exceedance"):
            raise ValueError(f"unknown cost signal {cost_signal!r}")
        if cost_signal == "exceedance" and threshold is None:
            raise ValueError("exceedance cost needs a threshold")
        self.env = env
        self.spec = env.spec
        self.cost_signal = cost_signal
        self.threshold = threshold
        self.state: AugmentedState | None = None
        self.raw_total = 0.0
        self.exceeded = False

    def reset(self, seed: int | None = None) -> AugmentedState:
        obs = self.env.reset(seed)
        self.raw_total = 0.0
        self.exceeded = False
        self.state = AugmentedState(obs, 0.0, 1.0)
        return self.state

    def step(self, action) -> tuple[StepOutcome, AugmentedState]:
        outcome = self.env.step(action)
        outcome.info["raw_cost"] = outcome.cost
        if self.cost_signal == "exceedance":
            self.raw_total += outcome.cost
            fire = not self.exceeded and self.raw_total >= self.threshold
            self.exceeded = self.exceeded or fire
            outcome.cost = 1.0 if fire else 0.0
        self.state = augment(outcome, self.state, self.spec.cost_gamma)
        return outcome, self.state


def make_env(name: str, **params):
    if name == "icylake":
        if "grid" in params and isinstance(params["grid"], str):
            params["grid"] = tuple(params["grid"].split("/"))
        return IcyLake(IcyLakeConfig(**params))
    if name == "battery":
        return BatteryToy(BatteryConfig(**params))
    raise ValueError(f"unknown environment {name!r}")
