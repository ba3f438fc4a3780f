"""Linear-constrained trust-region step.

Solves ``max g.x  s.t.  c + b.x <= 0,  0.5 x.H.x <= delta`` with ``H`` the
Fisher matrix, available only through matrix-vector products. The two
Hessian solves come from conjugate gradient; the remaining two-multiplier
problem is solved in closed form.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import risk
from .risk import ConstraintSpec, Mode, MomentEstimates

UNCONSTRAINED = "unconstrained"
CONSTRAINED = "constrained"
INFEASIBLE = "infeasible-recovery"
UNRESOLVABLE = "unresolvable"


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float  # ||A x - rhs|| / ||rhs||
    converged: bool


def conjugate_gradient(fvp: Callable, rhs, iters: int = 20, tol: float = 1e-8) -> CGResult:
    rhs = np.asarray(rhs, dtype=float)
    x = np.zeros_like(rhs)
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return CGResult(x, 0, 0.0, True)
    r = rhs.copy()
    p = r.copy()
    rr = r @ r
    k = 0
    for k in range(1, iters + 1):
        ap = fvp(p)
        pap = p @ ap
        if not np.isfinite(pap) or pap <= 0.0:
            if not np.isfinite(pap):
                raise FloatingPointError("non-finite value inside conjugate gradient")
            break
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = r @ r
        if math.sqrt(rr_new) <= tol * rhs_norm:
            rr = rr_new
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite value inside conjugate gradient")
    residual = float(np.linalg.norm(fvp(x) - rhs)) / rhs_norm
    return CGResult(x, k, residual, residual <= tol)


@dataclass
class StepProblem:
    g: np.ndarray
    b: np.ndarray | None
    c: float
    delta: float
    fvp: Callable

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("trust region radius must be positive")
        if self.b is not None and np.shape(self.b) != np.shape(self.g):
            raise ValueError("g and b must have the same dimension")


@dataclass
class StepReport:
    step_norm: float = 0.0
    dual_case: str = UNCONSTRAINED
    cg_iters: int = 0
    cg_residual: float = 0.0
    backtracks: int = 0
    kl: float = 0.0
    expected_improvement: float = 0.0
    surrogate_change: float = 0.0
    constraint_before: float = 0.0
    constraint_after: float = 0.0
    accepted: bool = True

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def as_dict(self):
        return asdict(self)


def solve_step(problem: StepProblem, cg_iters: int = 20, cg_tol: float = 1e-8):
    """Return ``(direction, report)`` for the linearized constrained problem.

    When no point of the trust region satisfies the linear constraint, the
    direction that decreases it the most within the region is returned.
    """
    g = np.asarray(problem.g, dtype=float)
    delta, c = problem.delta, problem.c
    report = StepReport(constraint_before=c)
    cg_v = conjugate_gradient(problem.fvp, g, cg_iters, cg_tol)
    v = cg_v.x
    q = float(g @ v)
    report.cg_iters, report.cg_residual = cg_v.iterations, cg_v.residual
    trpo = math.sqrt(2.0 * delta / q) * v if q > 1e-16 else np.zeros_like(g)

    b = None if problem.b is None else np.asarray(problem.b, dtype=float)
    if b is None or float(b @ b) <= 1e-16:
        if c > 0.0 and b is not None:
            report.dual_case = UNRESOLVABLE
            return np.zeros_like(g), _finish(report, np.zeros_like(g), g)
        report.dual_case = UNCONSTRAINED
        return trpo, _finish(report, trpo, g)

    cg_w = conjugate_gradient(problem.fvp, b, cg_iters, cg_tol)
    w = cg_w.x
    report.cg_iters += cg_w.iterations
    report.cg_residual = max(report.cg_residual, cg_w.residual)
    s = float(b @ w)
    r = float(g @ w)

    if c + float(b @ trpo) <= 0.0 and (q > 1e-16 or c <= 0.0):
        report.dual_case = UNCONSTRAINED
        return trpo, _finish(report, trpo, g)

    slack = 2.0 * delta - c * c / s
    if c > 0.0 and slack < 0.0:
        report.dual_case = INFEASIBLE
        x = -math.sqrt(2.0 * delta / s) * w
        return x, _finish(report, x, g)

    report.dual_case = CONSTRAINED
    a = q - r * r / s
    if slack <= 1e-14 * max(1.0, 2.0 * delta):
        x = -(c / s) * w
    elif a <= 1e-10 * max(q, 1e-16):
        # objective parallel to the constraint normal, or zero
        tau = min(-c / s, math.sqrt(2.0 * delta / s)) if r > 0.0 else min(0.0, -c / s)
        x = tau * w
    else:
        lam = math.sqrt(a / slack)
        nu = max(0.0, (r + c * lam) / s)
        x = (v - nu * w) / lam
    return x, _finish(report, x, g)


def _finish(report: StepReport, x, g) -> StepReport:
    report.step_norm = float(np.linalg.norm(x))
    report.expected_improvement = float(g @ x)
    return report


def line_search(theta_old, direction, evaluate: Callable, delta: float, report: StepReport,
                factor: float = 0.8, max_trials: int = 10):
    """Backtrack along ``direction`` until the trial point passes every check.

    ``evaluate(theta)`` returns ``(kl, objective_change, constraint_value)``,
    with ``constraint_value`` ``None`` when there is no constraint. Returns
    the accepted parameters, or ``theta_old`` if every trial fails.
    """
    direction = np.asarray(direction, dtype=float)
    c = report.constraint_before
    if not np.any(direction):
        report.accepted, report.backtracks = True, 0
        report.constraint_after = c
        return np.array(theta_old, copy=True)
    for j in range(max_trials):
        theta = theta_old + factor**j * direction
        kl, improve, constraint = evaluate(theta)
        ok = np.isfinite(kl) and kl <= delta
        if report.dual_case == INFEASIBLE:
            ok = ok and constraint is not None and constraint <= c
        else:
            if c <= 0.0 and report.expected_improvement > 0.0:
                ok = ok and improve > 0.0
            if constraint is not None:
                ok = ok and constraint <= max(c, 0.0)
        if ok:
            report.accepted, report.backtracks = True, j
            report.kl, report.surrogate_change = float(kl), float(improve)
            report.constraint_after = c if constraint is None else float(constraint)
            return theta
    report.accepted, report.backtracks = False, max_trials
    report.kl, report.surrogate_change, report.constraint_after = 0.0, 0.0, c
    return np.array(theta_old, copy=True)


def surrogate_weights(batch, stream: str) -> np.ndarray:
    """Per-step weights turning ``sum_t w_t * A_t * f_t`` into a horizon-scaled surrogate."""
    omega = batch.discounts if stream != "reward" else np.ones(len(batch))
    return omega / omega.sum()


def assemble_constraint_gradient(batch, mode: Mode, spec: ConstraintSpec, moments: MomentEstimates,
                                 policy, horizon: float):
    """Constraint gradient ``b`` and offset ``c`` for the current mode."""
    mode = Mode(mode)
    if mode is Mode.UNCONSTRAINED:
        return np.zeros_like(policy.params), -math.inf
    w = surrogate_weights(batch, "cost")
    grad_mu = horizon * policy.weighted_score(batch.obs, batch.actions, w * batch.advantages["cost"])
    if mode is Mode.RECOVERY:
        return grad_mu, moments.mu - spec.rho
    if mode is Mode.EXPECTED_COST:
        limit = spec.rho if spec.limit is None else spec.limit
        return grad_mu, moments.mu - limit
    grad_aug = horizon * policy.weighted_score(batch.obs, batch.actions, w * batch.advantages["aug"])
    b = grad_aug - risk.dhat_linear_coeff(moments.mu, spec) * grad_mu
    return b, risk.constraint_eval(moments, spec).c_offset


class SurrogateEvaluator:
    """Importance-weighted surrogates of a fixed batch at trial parameters."""

    def __init__(self, batch, policy, mode: Mode, spec: ConstraintSpec, moments: MomentEstimates,
                 horizon: float, c: float, reward_adv):
        self.batch, self.policy = batch, policy
        self.mode, self.spec, self.moments = Mode(mode), spec, moments
        self.horizon, self.c = horizon, c
        self.reward_adv = reward_adv
        self.old_logp = policy.log_prob(batch.obs, batch.actions)
        self.w_cost = surrogate_weights(batch, "cost")

    def __call__(self, theta):
        saved = self.policy.get_params()
        self.policy.set_params(theta)
        try:
            logp = self.policy.log_prob(self.batch.obs, self.batch.actions)
            kl = float(np.mean(self.policy.kl_from(self.batch.old_dist, self.batch.obs)))
        finally:
            self.policy.set_params(saved)
        ratio = np.exp(np.clip(logp - self.old_logp, -50, 50))
        improve = float(np.mean((ratio - 1.0) * self.reward_adv))
        return kl, improve, self.constraint_value(ratio)

    def stream_change(self, ratio, stream):
        return self.horizon * float(np.sum(self.w_cost * (ratio - 1.0) * self.batch.advantages[stream]))

    def constraint_value(self, ratio):
        if self.mode is Mode.UNCONSTRAINED:
            return None
        z = self.stream_change(ratio, "cost")
        if self.mode in (Mode.RECOVERY, Mode.EXPECTED_COST):
            return self.c + z
        return self.c + self.stream_change(ratio, "aug") - risk.dhat_offset(self.moments.mu, z, self.spec)
