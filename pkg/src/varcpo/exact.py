"""Exactly enumerable finite-horizon CMDP with a tabular softmax policy.

Every trajectory of the tree is enumerated, so returns, moments, values and
advantages over augmented states, policy gradients and the Fisher matrix are
all exact. Used to check the trust-region step and the worst-case bound
without sampling noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import risk
from .risk import ConstraintSpec, MomentEstimates
from .solver import StepProblem, StepReport, line_search, solve_step


@dataclass
class TabularCmdp:
    """``P[s, a, s']`` transitions with per-transition reward and cost tables."""

    P: np.ndarray
    reward: np.ndarray
    cost: np.ndarray
    horizon: int = 8
    gamma: float = 0.9
    cost_gamma: float = 0.9
    start: int = 0

    @property
    def n_states(self):
        return self.P.shape[0]

    @property
    def n_actions(self):
        return self.P.shape[1]


def lake_cmdp(horizon: int = 8, slip: float = 0.15, slip_cost: float = 6.0) -> TabularCmdp:
    """Three states: home, lake and trail.

    Action 0 walks the trail: certain unit cost, no reward. Action 1 crosses
    the lake: reward 1 and no cost, except that with probability ``slip`` the
    agent falls in, pays ``slip_cost`` and is sent home.
    """
    P = np.zeros((3, 2, 3))
    reward = np.zeros((3, 2, 3))
    cost = np.zeros((3, 2, 3))
    for s in range(3):
        P[s, 0, 2] = 1.0
        cost[s, 0, 2] = 1.0
        P[s, 1, 1] = 1.0 - slip
        reward[s, 1, 1] = 1.0
        P[s, 1, 0] = slip
        cost[s, 1, 0] = slip_cost
    return TabularCmdp(P, reward, cost, horizon=horizon)


@dataclass
class _Level:
    state: np.ndarray      # node state
    y: np.ndarray          # discounted cost accumulated before this node
    parent: np.ndarray     # index of the parent node on the previous level
    action: np.ndarray     # action taken at the parent
    trans_prob: np.ndarray  # P(s | parent state, action)
    reward: np.ndarray
    cost: np.ndarray


class TrajectoryTree:
    """All histories of ``cmdp`` up to its horizon, laid out level by level.

    Level ``t`` holds the nodes reached after ``t`` transitions. A node is a
    full history, so it determines the augmented state ``(s, y, gamma_c^t)``.
    """

    def __init__(self, cmdp: TabularCmdp):
        self.cmdp = cmdp
        levels = [_Level(np.array([cmdp.start]), np.zeros(1), np.zeros(0, int), np.zeros(0, int),
                         np.ones(1), np.zeros(1), np.zeros(1))]
        for t in range(cmdp.horizon):
            prev = levels[-1]
            node, a, s2 = np.nonzero(cmdp.P[prev.state] > 0.0)
            s = prev.state[node]
            c = cmdp.cost[s, a, s2]
            levels.append(_Level(s2, prev.y[node] + cmdp.cost_gamma**t * c, node, a,
                                 cmdp.P[s, a, s2], cmdp.reward[s, a, s2], c))
        self.levels = levels

    @property
    def leaves(self):
        return self.levels[-1]

    def action_probs(self, theta):
        """Per-level ``pi(a | s)`` for every node; ``theta`` has shape (S, A)."""
        z = theta - theta.max(axis=1, keepdims=True)
        pi = np.exp(z)
        pi /= pi.sum(axis=1, keepdims=True)
        return [pi[lvl.state] for lvl in self.levels[:-1]]

    def reach_probs(self, theta):
        probs = self.action_probs(theta)
        out = [np.ones(1)]
        for t, lvl in enumerate(self.levels[1:]):
            out.append(out[-1][lvl.parent] * probs[t][lvl.parent, lvl.action] * lvl.trans_prob)
        return out


@dataclass
class ExactSummary:
    reward_return: float
    mu: float
    second_moment: float
    j_aug: float

    @property
    def variance(self):
        return self.second_moment - self.mu**2


class ExactEvaluator:
    """Exact returns, values and advantages of tabular softmax policies."""

    def __init__(self, cmdp: TabularCmdp, spec: ConstraintSpec):
        self.cmdp, self.spec = cmdp, spec
        self.tree = TrajectoryTree(cmdp)

    def leaf_returns(self):
        """Per-leaf discounted reward return and cost return."""
        g = self.cmdp.gamma
        lv = self.tree.levels
        rew = np.zeros(1)
        for t, lvl in enumerate(lv[1:]):
            rew = rew[lvl.parent] + g**t * lvl.reward
        return rew, lv[-1].y

    def summary(self, theta) -> ExactSummary:
        p = self.tree.reach_probs(theta)[-1]
        rew, cost = self.leaf_returns()
        mu = float(p @ cost)
        m2 = float(p @ cost**2)
        return ExactSummary(float(p @ rew), mu, m2, self.spec.beta * m2 + 2.0 * self.spec.rho * mu)

    def moments(self, theta) -> MomentEstimates:
        s = self.summary(theta)
        return MomentEstimates(mu=s.mu, j_aug=s.j_aug, sample_count=0)

    def constraint(self, theta) -> float:
        s = self.summary(theta)
        return risk.chebyshev_lhs(s.mu, s.variance, self.spec)

    def step_signal(self, stream, lvl):
        """Per-transition signal of ``stream`` into the nodes of ``lvl``."""
        if stream == "reward":
            return lvl.reward
        if stream == "cost":
            return lvl.cost
        return None

    def q_values(self, theta, stream):
        """Per-level ``(V, Q)`` arrays; ``Q`` has shape (nodes, actions)."""
        cm, tree = self.cmdp, self.tree
        gamma = cm.gamma if stream == "reward" else cm.cost_gamma
        probs = tree.action_probs(theta)
        H = cm.horizon
        V = [None] * (H + 1)
        Q = [None] * H
        V[H] = np.zeros(len(tree.levels[H].state))
        for t in range(H - 1, -1, -1):
            lvl, parent = tree.levels[t + 1], tree.levels[t]
            if stream == "aug":
                y = parent.y[lvl.parent]
                sig = risk.augmented_cost(lvl.cost, y, cm.cost_gamma**t, self.spec)
            else:
                sig = self.step_signal(stream, lvl)
            q = np.zeros((len(parent.state), cm.n_actions))
            np.add.at(q, (lvl.parent, lvl.action), lvl.trans_prob * (sig + gamma * V[t + 1]))
            Q[t] = q
            V[t] = (probs[t] * q).sum(axis=1)
        return V, Q

    def advantages(self, theta, stream):
        V, Q = self.q_values(theta, stream)
        return [q - v[:, None] for v, q in zip(V[:-1], Q)]

    def max_expected_advantage(self, theta_old, theta_new, stream) -> float:
        """``max_x |E_{a ~ pi_new}[A_old(x, a)]|`` over every augmented state."""
        adv = self.advantages(theta_old, stream)
        probs = self.tree.action_probs(theta_new)
        return max(float(np.max(np.abs((p * a).sum(axis=1)))) for p, a in zip(probs, adv))

    def surrogate_change(self, theta_old, theta_new, stream) -> float:
        """``L(theta_new) - J(theta_old)``: discounted old-visitation sum of expected advantages."""
        gamma = self.cmdp.gamma if stream == "reward" else self.cmdp.cost_gamma
        adv = self.advantages(theta_old, stream)
        reach = self.tree.reach_probs(theta_old)
        probs = self.tree.action_probs(theta_new)
        return float(sum(gamma**t * reach[t] @ (probs[t] * adv[t]).sum(axis=1)
                         for t in range(self.cmdp.horizon)))

    def surrogate_grad(self, theta, stream) -> np.ndarray:
        """Gradient of the surrogate at ``theta``, equal to the policy gradient."""
        gamma = self.cmdp.gamma if stream == "reward" else self.cmdp.cost_gamma
        adv = self.advantages(theta, stream)
        reach = self.tree.reach_probs(theta)
        probs = self.tree.action_probs(theta)
        grad = np.zeros_like(theta, dtype=float)
        for t in range(self.cmdp.horizon):
            p, a = probs[t], adv[t]
            # d/dtheta[s, j] sum_a pi(a|s) A(x, a) = pi(j|s) (A(x, j) - sum_a pi A)
            local = p * (a - (p * a).sum(axis=1, keepdims=True))
            np.add.at(grad, self.tree.levels[t].state, gamma**t * reach[t][:, None] * local)
        return grad

    def visitation(self, theta) -> np.ndarray:
        """Normalized discounted state visitation of ``theta`` over base states."""
        reach = self.tree.reach_probs(theta)
        gamma = self.cmdp.gamma
        d = np.zeros(self.cmdp.n_states)
        for t in range(self.cmdp.horizon):
            np.add.at(d, self.tree.levels[t].state, gamma**t * reach[t])
        return d / d.sum()

    def fisher(self, theta) -> np.ndarray:
        d = self.visitation(theta)
        z = theta - theta.max(axis=1, keepdims=True)
        pi = np.exp(z)
        pi /= pi.sum(axis=1, keepdims=True)
        S, A = theta.shape
        F = np.zeros((S * A, S * A))
        for s in range(S):
            blk = np.diag(pi[s]) - np.outer(pi[s], pi[s])
            F[s * A:(s + 1) * A, s * A:(s + 1) * A] = d[s] * blk
        return F

    def mean_kl(self, theta_old, theta_new) -> float:
        d = self.visitation(theta_old)
        lp_old = theta_old - np.log(np.exp(theta_old).sum(axis=1, keepdims=True))
        lp_new = theta_new - np.log(np.exp(theta_new).sum(axis=1, keepdims=True))
        return float(d @ (np.exp(lp_old) * (lp_old - lp_new)).sum(axis=1))


@dataclass
class ExactStepRecord:
    report: StepReport
    constraint_before: float
    constraint_after: float
    bound: float | None
    alpha_aug: float
    alpha_cost: float
    mu: float
    reward_return: float


def exact_varcpo_step(ev: ExactEvaluator, theta, delta: float = 0.01, damping: float = 1e-3):
    """One exact VaR-constrained trust-region step; returns ``(theta_new, record)``."""
    spec = ev.spec
    shape = theta.shape
    s = ev.summary(theta)
    c = risk.chebyshev_lhs(s.mu, s.variance, spec)
    g = ev.surrogate_grad(theta, "reward").ravel()
    grad_mu = ev.surrogate_grad(theta, "cost").ravel()
    recovery = risk.recovery_needed(s.mu, spec)
    if recovery:
        b, c = grad_mu, s.mu - spec.rho
    else:
        b = ev.surrogate_grad(theta, "aug").ravel() - risk.dhat_linear_coeff(s.mu, spec) * grad_mu
    F = ev.fisher(theta) + damping * np.eye(theta.size)
    direction, report = solve_step(StepProblem(g, b, c, delta, lambda v: F @ v), cg_iters=50, cg_tol=1e-12)

    def evaluate(flat):
        new = flat.reshape(shape)
        kl = ev.mean_kl(theta, new)
        improve = ev.surrogate_change(theta, new, "reward")
        z = ev.surrogate_change(theta, new, "cost")
        if recovery:
            return kl, improve, c + z
        return kl, improve, c + ev.surrogate_change(theta, new, "aug") - risk.dhat_offset(s.mu, z, spec)

    flat = line_search(theta.ravel(), direction, evaluate, delta, report)
    new = flat.reshape(shape)
    a_aug = ev.max_expected_advantage(theta, new, "aug")
    a_cost = ev.max_expected_advantage(theta, new, "cost")
    bound = risk.worst_case_bound(a_aug, a_cost, s.mu, delta, ev.cmdp.cost_gamma, spec.epsilon)
    return new, ExactStepRecord(report, risk.chebyshev_lhs(s.mu, s.variance, spec), ev.constraint(new),
                                bound, a_aug, a_cost, s.mu, s.reward_return)


def run_exact_updates(ev: ExactEvaluator, theta0, steps: int = 100, delta: float = 0.01):
    theta = np.array(theta0, dtype=float)
    records = []
    for _ in range(steps):
        theta, rec = exact_varcpo_step(ev, theta, delta)
        records.append(rec)
    return theta, records
