"""Training loop: rollout, estimation, constraint construction, policy and critic updates."""

from __future__ import annotations

import csv
import logging
import math
import shutil
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from . import risk
from .config import TrainConfig, load_config
from .envs import AugmentedEnv, AugmentedState, make_env
from .estimation import (GaeConfig, RolloutBatch, Segment, advantage_normalize, annotate,
                         estimate_moments)
from .nets import CategoricalPolicy, GaussianPolicy, ValueHead, load_approximator, save_approximator
from .risk import ConstraintSpec, Mode
from .solver import (StepProblem, StepReport, SurrogateEvaluator, assemble_constraint_gradient,
                     line_search, solve_step)

log = logging.getLogger(__name__)

CRITIC_FILES = {"reward": "critic_reward.txt", "cost": "critic_cost.txt", "aug": "critic_aug.txt"}


class TrainingAborted(RuntimeError):
    pass


class CriticDivergence(RuntimeError):
    pass


@dataclass
class IterationMetrics:
    iteration: int
    env_steps: int
    seed: int
    episodes: int
    reward_return: float
    cost_return: float
    mu: float
    j_aug: float
    c_offset: float | None
    mode: str
    cost_p95: float
    p95_reliable: int
    violation_rate: float
    success_rate: float
    ice_visitation: float | None
    worst_case_bound: float | None
    loss_reward: float
    loss_cost: float
    loss_aug: float

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)] + StepReport.field_names()


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}" if math.isfinite(v) else ""
    return str(v)


def env_from_config(config: TrainConfig):
    env = make_env(config.env, **config.env_params)
    threshold = config.rho if config.cost_signal == "exceedance" else None
    return AugmentedEnv(env, config.cost_signal, threshold)


def make_policy(spec, obs_dim: int, hidden, rng):
    if spec.discrete:
        return CategoricalPolicy(obs_dim, spec.n_actions, hidden, rng=rng)
    return GaussianPolicy(obs_dim, spec.action_dim, hidden, rng=rng)


def constraint_spec(config: TrainConfig) -> ConstraintSpec:
    mode = {"varcpo": Mode.VAR, "cpo": Mode.EXPECTED_COST, "unconstrained": Mode.UNCONSTRAINED}
    limit = config.cost_limit
    if limit is None and config.cost_signal == "exceedance":
        limit = config.epsilon
    return ConstraintSpec(config.rho, config.epsilon, mode[config.algorithm], limit)


class DistCache:
    """Memoizes the policy's output distribution per input vector for one batch."""

    def __init__(self, policy):
        self.policy = policy
        self.table = {}

    def __call__(self, x):
        key = x.tobytes()
        d = self.table.get(key)
        if d is None:
            d = self.policy.dist(x[None, :])
            d = d[0] if isinstance(self.policy, CategoricalPolicy) else (d[0][0], d[1][0])
            self.table[key] = d
        return d


def collect(envs, policy, batch_steps: int, rngs, spec: ConstraintSpec, objective: str = "reward",
            greedy: bool = False) -> RolloutBatch:
    """Roll out ``batch_steps`` steps split evenly over ``envs`` (in order)."""
    k = len(envs)
    shares = [batch_steps // k + (i < batch_steps % k) for i in range(k)]
    cache = DistCache(policy)
    obs, actions, rewards, costs, raw, ys, discs, ice, segments = [], [], [], [], [], [], [], [], []
    for env, rng, share in zip(envs, rngs, shares):
        state = env.reset()
        seg_start = len(rewards)
        for i in range(share):
            x = state.vector(spec.rho)
            dist = cache(x)
            a = policy.mode(dist) if greedy else policy.sample(dist, rng)
            outcome, nxt = env.step(a)
            obs.append(x)
            actions.append(a)
            rewards.append(outcome.cost if objective == "cost" else outcome.reward)
            costs.append(outcome.cost)
            raw.append(outcome.info["raw_cost"])
            ys.append(state.y)
            discs.append(state.discount)
            ice.append(bool(outcome.info.get("on_ice", False)))
            last = i == share - 1
            if outcome.done or last:
                end = "terminated" if outcome.terminated else ("truncated" if outcome.truncated else "cut")
                segments.append(Segment(seg_start, len(rewards), end, nxt.vector(spec.rho)))
                seg_start = len(rewards)
                if not last:
                    nxt = env.reset()
            state = nxt
    costs = np.array(costs)
    ys, discs = np.array(ys), np.array(discs)
    batch = RolloutBatch(
        obs=np.array(obs), actions=np.array(actions), rewards=np.array(rewards), costs=costs,
        aug_costs=risk.augmented_cost(costs, ys, discs, spec), discounts=discs, ys=ys,
        on_ice=np.array(ice), segments=segments,
    )
    batch.raw_costs = np.array(raw)
    batch.old_dist = policy.dist(batch.obs)
    return batch


def _adam_step(params, grad, state, lr, t, b1=0.9, b2=0.999, eps=1e-8):
    m, v = state
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    params -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)


def update_critics(batch: RolloutBatch, critics: dict, lr: float, epochs: int,
                   optimizer: str = "adam") -> dict:
    """Full-batch regression of each critic onto its stream's return targets.

    Returns the final mean squared error per stream in the critic's scaled units.
    Adam starts afresh on every call. A stream whose loss grows past ten times
    its initial value (and past 0.01, so converged critics do not trip it) is
    rolled back and reported through :class:`CriticDivergence`.
    """
    losses = {}
    for stream, critic in critics.items():
        targets = batch.returns[stream]
        start = critic.get_params()
        state = (np.zeros_like(start), np.zeros_like(start))
        first = None
        for t in range(1, epochs + 1):
            loss, grad = critic.value_grad(batch.obs, targets)
            if not math.isfinite(loss):
                critic.set_params(start)
                raise CriticDivergence(f"{stream} critic loss is not finite")
            first = loss if first is None else first
            if loss > 10.0 * first and loss > 1e-2:
                critic.set_params(start)
                raise CriticDivergence(f"{stream} critic loss diverged ({loss:.3g} > 10 x {first:.3g})")
            if optimizer == "adam":
                _adam_step(critic.params, grad, state, lr, t)
            else:
                critic.params[:] -= lr * grad
        losses[stream] = critic.mse(batch.obs, targets)
    return losses


class Trainer:
    """Holds the policy, critics and environments for one training run."""

    def __init__(self, config: TrainConfig, quiet: bool = True):
        self.config = config.validate()
        self.quiet = quiet
        self.spec = constraint_spec(config)
        seq = np.random.SeedSequence(config.seed)
        init_seq, *worker_seqs = seq.spawn(1 + config.workers)
        self.envs = [env_from_config(config) for _ in range(config.workers)]
        env_spec = self.envs[0].spec
        self.env_spec = env_spec
        for env, ws in zip(self.envs, worker_seqs):
            env_seed, _ = ws.spawn(2)
            env.reset(int(env_seed.generate_state(1)[0]))
        self.rngs = [np.random.default_rng(ws.spawn(2)[1]) for ws in worker_seqs]
        init_rng = np.random.default_rng(init_seq)
        obs_dim = env_spec.observation_dim + 2
        self.policy = make_policy(env_spec, obs_dim, config.hidden, init_rng)
        if config.init_policy:
            loaded = load_approximator(config.init_policy)
            if loaded.architecture != self.policy.architecture:
                raise ValueError("initial policy architecture does not match the environment")
            self.policy.set_params(loaded.params)
        cost_scale = 1.0 if config.cost_signal == "exceedance" else config.rho
        self.critics = {
            "reward": ValueHead(obs_dim, config.hidden, init_rng, scale=1.0),
            "cost": ValueHead(obs_dim, config.hidden, init_rng, scale=cost_scale),
            "aug": ValueHead(obs_dim, config.hidden, init_rng, scale=risk.d_bound(0.0, self.spec)),
        }
        self.gae = GaeConfig(config.lam, env_spec.gamma, env_spec.cost_gamma)
        self.iteration = 0
        self.env_steps = 0

    def resolve_mode(self, mu: float) -> Mode:
        if self.spec.mode is Mode.VAR and risk.recovery_needed(mu, self.spec):
            return Mode.RECOVERY
        return self.spec.mode

    def annotate(self, batch: RolloutBatch):
        for stream, critic in self.critics.items():
            batch.values[stream] = critic.value_forward(batch.obs)
            nxt = np.array([s.next_obs for s in batch.segments])
            batch.bootstrap[stream] = critic.value_forward(nxt)
        annotate(batch, self.gae)

    def policy_step(self, batch: RolloutBatch, moments, mode: Mode):
        """Build ``g``, ``b``, ``c``, solve the step and line-search it in place."""
        cfg = self.config
        horizon = risk.effective_horizon(self.env_spec.cost_gamma, batch.mean_episode_length())
        adv = advantage_normalize(batch.advantages["reward"], "reward")
        g = self.policy.weighted_score(batch.obs, batch.actions, adv / len(batch))
        b, c = assemble_constraint_gradient(batch, mode, self.spec, moments, self.policy, horizon)
        obs = batch.obs

        def fvp(v):
            return self.policy.fisher_vector_product(obs, v, cfg.damping)

        problem = StepProblem(g, None if mode is Mode.UNCONSTRAINED else b, c, cfg.delta, fvp)
        direction, report = solve_step(problem, cfg.cg_iters, cfg.cg_tol)
        evaluator = SurrogateEvaluator(batch, self.policy, mode, self.spec, moments, horizon, c, adv)
        theta_old = self.policy.get_params()
        theta = line_search(theta_old, direction, evaluator, cfg.delta, report,
                            cfg.backtrack_factor, cfg.max_backtracks)
        self.policy.set_params(theta)
        return report, horizon

    def bound_estimate(self, batch, moments, theta_old) -> float | None:
        """Worst-case violation bound with advantage maxima estimated on the batch."""
        if self.env_spec.cost_gamma >= 1.0 or self.spec.mode is not Mode.VAR:
            return None
        new_logp = self.policy.log_prob(batch.obs, batch.actions)
        saved = self.policy.get_params()
        self.policy.set_params(theta_old)
        old_logp = self.policy.log_prob(batch.obs, batch.actions)
        self.policy.set_params(saved)
        ratio = np.exp(new_logp - old_logp)
        a_aug = float(np.max(np.abs(ratio * batch.advantages["aug"])))
        a_cost = float(np.max(np.abs(ratio * batch.advantages["cost"])))
        return risk.worst_case_bound(a_aug, a_cost, moments.mu, self.config.delta,
                                     self.env_spec.cost_gamma, self.spec.epsilon)

    def iterate(self) -> tuple[IterationMetrics, StepReport]:
        cfg = self.config
        batch = collect(self.envs, self.policy, cfg.batch_steps, self.rngs, self.spec, cfg.objective)
        self.env_steps += len(batch)
        self.annotate(batch)
        moments = estimate_moments(batch)
        mode = self.resolve_mode(moments.mu)
        theta_old = self.policy.get_params()
        report, _ = self.policy_step(batch, moments, mode)
        bound = self.bound_estimate(batch, moments, theta_old)
        try:
            losses = update_critics(batch, self.critics, cfg.critic_lr, cfg.critic_epochs,
                                    cfg.critic_optimizer)
        except CriticDivergence as exc:
            log.warning("iteration %d: %s", self.iteration, exc)
            losses = {s: c.mse(batch.obs, batch.returns[s]) for s, c in self.critics.items()}

        raw_returns = batch.episode_stat(batch.raw_costs, batch.discounts)
        c_offset = None
        if mode is Mode.VAR:
            c_offset = risk.constraint_eval(moments, self.spec).c_offset
        elif mode is not Mode.UNCONSTRAINED:
            c_offset = report.constraint_before
        metrics = IterationMetrics(
            iteration=self.iteration,
            env_steps=self.env_steps,
            seed=cfg.seed,
            episodes=len(raw_returns),
            reward_return=float(batch.reward_returns().mean()),
            cost_return=float(raw_returns.mean()),
            mu=moments.mu,
            j_aug=moments.j_aug,
            c_offset=c_offset,
            mode=mode.value,
            cost_p95=float(np.percentile(raw_returns, 95, method="inverted_cdf")),
            p95_reliable=int(len(raw_returns) >= 30),
            violation_rate=float(np.mean(raw_returns >= cfg.rho)),
            success_rate=float(batch.successes().mean()),
            ice_visitation=float(batch.on_ice.mean()) if cfg.env == "icylake" else None,
            worst_case_bound=bound,
            loss_reward=losses["reward"],
            loss_cost=losses["cost"],
            loss_aug=losses["aug"],
        )
        values = [v for v in asdict(metrics).values() if isinstance(v, float)]
        if not all(math.isfinite(v) for v in values) or not np.all(np.isfinite(self.policy.params)):
            raise TrainingAborted(f"non-finite values at iteration {self.iteration}")
        self.iteration += 1
        return metrics, report

    def save_checkpoint(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_approximator(self.policy, directory / "policy.txt")
        for stream, critic in self.critics.items():
            save_approximator(critic, directory / CRITIC_FILES[stream])
        (directory / "config.cfg").write_text(self.config.dumps())
        (directory / "manifest.txt").write_text(
            f"config_hash = {self.config.hash()}\niteration = {self.iteration}\n"
            f"env_steps = {self.env_steps}\n")

    def dump_state(self, directory):
        self.save_checkpoint(Path(directory))


def train(config: TrainConfig, quiet: bool = True, max_iterations: int | None = None) -> Path:
    """Run training, writing ``metrics.csv`` and checkpoints under ``config.output_dir``.

    Returns the path of the final checkpoint directory.
    """
    trainer = Trainer(config, quiet)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(config.dumps())
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(IterationMetrics.columns())
        while trainer.env_steps + config.batch_steps <= config.total_steps:
            if max_iterations is not None and trainer.iteration >= max_iterations:
                break
            try:
                metrics, report = trainer.iterate()
            except (TrainingAborted, FloatingPointError) as exc:
                trainer.dump_state(out / "abort_state")
                raise TrainingAborted(f"{exc}; state written to {out / 'abort_state'}") from exc
            row = list(asdict(metrics).values()) + list(report.as_dict().values())
            writer.writerow([format_value(v) for v in row])
            fh.flush()
            if not quiet:
                print(f"iter {metrics.iteration:4d} steps {metrics.env_steps:8d} mode {metrics.mode:13s} "
                      f"R {metrics.reward_return:.3f} C {metrics.cost_return:.2f} "
                      f"p95 {metrics.cost_p95:.2f} ice {format_value(metrics.ice_visitation)} "
                      f"case {report.dual_case} kl {report.kl:.4f} bt {report.backtracks}")
            if config.checkpoint_every and trainer.iteration % config.checkpoint_every == 0:
                trainer.save_checkpoint(out / "checkpoints" / f"iter_{trainer.iteration:05d}")
    final = out / "checkpoints" / "final"
    if final.exists():
        shutil.rmtree(final)
    trainer.save_checkpoint(final)
    return final


@dataclass
class EvalSummary:
    episodes: int
    mean_reward: float
    mean_cost: float
    quantiles: dict
    violation_prob: float
    violation_ci: tuple
    success_rate: float
    ice_visitation: float | None
    cost_returns: np.ndarray

    def lines(self):
        q = " ".join(f"q{int(k * 100)}={v:.9g}" for k, v in self.quantiles.items())
        out = [f"episodes {self.episodes}", f"mean_reward {self.mean_reward:.9g}",
               f"mean_cost {self.mean_cost:.9g}", f"cost_quantiles {q}",
               f"violation_prob {self.violation_prob:.9g} "
               f"ci95 [{self.violation_ci[0]:.9g}, {self.violation_ci[1]:.9g}]",
               f"success_rate {self.success_rate:.9g}"]
        if self.ice_visitation is not None:
            out.append(f"ice_visitation {self.ice_visitation:.9g}")
        return out


def evaluate_policy(act, env: AugmentedEnv, episodes: int, rho: float, seed: int = 0) -> EvalSummary:
    """Run ``episodes`` episodes with ``act(AugmentedState, rng) -> action``."""
    if episodes < 1:
        raise ValueError("evaluation needs at least one episode")
    rng = np.random.default_rng(seed)
    state: AugmentedState = env.reset(seed)
    rewards, costs, successes = [], [], []
    ice_steps = steps = 0
    for _ in range(episodes):
        total_r = total_c = 0.0
        while True:
            outcome, nxt = env.step(act(state, rng))
            total_r += outcome.reward
            total_c += state.discount * outcome.info["raw_cost"]
            ice_steps += bool(outcome.info.get("on_ice", False))
            steps += 1
            state = nxt
            if outcome.done:
                break
        rewards.append(total_r)
        costs.append(total_c)
        successes.append(outcome.terminated and total_r > 0)
        state = env.reset()
    costs = np.array(costs)
    k = int(np.sum(costs >= rho))
    ci = binomtest(k, episodes).proportion_ci(0.95, method="wilson")
    return EvalSummary(
        episodes=episodes,
        mean_reward=float(np.mean(rewards)),
        mean_cost=float(costs.mean()),
        quantiles={q: float(np.percentile(costs, 100 * q, method="inverted_cdf"))
                   for q in (0.05, 0.5, 0.95, 0.99)},
        violation_prob=k / episodes,
        violation_ci=(float(ci.low), float(ci.high)),
        success_rate=float(np.mean(successes)),
        ice_visitation=ice_steps / steps if hasattr(env.env, "grid") else None,
        cost_returns=costs,
    )


def evaluate(checkpoint, episodes: int, seed: int = 0, greedy: bool = False,
             config: TrainConfig | None = None) -> EvalSummary:
    checkpoint = Path(checkpoint)
    if episodes < 1:
        raise ValueError("evaluation needs at least one episode")
    config = config or load_config(checkpoint / "config.cfg")
    policy = load_approximator(checkpoint / "policy.txt")
    env = env_from_config(config)
    if policy.architecture[0] != env.spec.observation_dim + 2:
        raise ValueError(f"checkpoint expects {policy.architecture[0]} inputs, environment "
                         f"provides {env.spec.observation_dim + 2}")
    cache = DistCache(policy)

    def act(state, rng):
        dist = cache(state.vector(config.rho))
        return policy.mode(dist) if greedy else policy.sample(dist, rng)

    return evaluate_policy(act, env, episodes, config.rho, seed)
