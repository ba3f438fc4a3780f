"""Chebyshev surrogate for a Value-at-Risk constraint on the episode cost.

The constraint ``P(C >= rho) <= eps`` is replaced by the one-sided Chebyshev
condition ``(1/eps - 1) * var - (rho - mean)**2 <= 0``, which is then written
as an expected return of a per-step augmented cost bounded by a
policy-dependent limit ``d(mu) = mu**2 / eps + rho**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class Mode(str, Enum):
    VAR = "var"
    RECOVERY = "recovery"
    EXPECTED_COST = "expected_cost"
    UNCONSTRAINED = "unconstrained"


@dataclass(frozen=True)
class ConstraintSpec:
    rho: float = 15.0
    epsilon: float = 0.05
    mode: Mode = Mode.VAR
    # limit on the expected cost for Mode.EXPECTED_COST
    limit: float | None = None

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def beta(self) -> float:
        return 1.0 / self.epsilon - 1.0


@dataclass(frozen=True)
class MomentEstimates:
    mu: float
    j_aug: float
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("moment estimates need at least one episode")
        if not (math.isfinite(self.mu) and math.isfinite(self.j_aug)):
            raise ValueError("moment estimates must be finite")


@dataclass(frozen=True)
class ConstraintEval:
    c_offset: float
    d_value: float

    @property
    def feasible(self) -> bool:
        return self.c_offset <= 0.0


def chebyshev_lhs(mu: float, sigma2: float, spec: ConstraintSpec) -> float:
    """Quadratic Chebyshev form; non-positive means the surrogate is satisfied."""
    return spec.beta * sigma2 - (spec.rho - mu) ** 2


def augmented_cost(c, y, discount, spec: ConstraintSpec, beta: float | None = None):
    """Per-step cost whose discounted sum is ``beta * C**2 + 2 * rho * C``.

    ``discount`` is the cost discount at the step, ``y`` the accumulated
    discounted cost before it. Works elementwise on arrays.
    """
    beta = spec.beta if beta is None else beta
    return beta * discount * c * c + 2.0 * (beta * y + spec.rho) * c


def accumulated_costs(costs, cost_gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(y_t, discount_t)`` before each step of a cost sequence."""
    costs = np.asarray(costs, dtype=float)
    discount = cost_gamma ** np.arange(len(costs))
    y = np.concatenate([[0.0], np.cumsum(discount * costs)[:-1]]) if len(costs) else costs
    return y, discount


def square_return_decomposition_check(costs, cost_gamma: float) -> tuple[float, float]:
    """Squared discounted return computed directly and as a sum of local terms."""
    costs = np.asarray(costs, dtype=float)
    y, discount = accumulated_costs(costs, cost_gamma)
    lhs = float(np.sum(discount * costs)) ** 2
    rhs = float(np.sum(discount * (discount * costs**2 + 2.0 * y * costs)))
    return lhs, rhs


def d_bound(mu: float, spec: ConstraintSpec) -> float:
    return mu * mu / spec.epsilon + spec.rho**2


def constraint_eval(moments: MomentEstimates, spec: ConstraintSpec) -> ConstraintEval:
    d = d_bound(moments.mu, spec)
    return ConstraintEval(c_offset=moments.j_aug - d, d_value=d)


def recovery_needed(mu: float, spec: ConstraintSpec) -> bool:
    return mu >= spec.rho


def dhat_linear_coeff(mu_k: float, spec: ConstraintSpec) -> float:
    """Coefficient on the horizon-scaled expected cost advantage in grad d_hat.

    The quadratic term in the advantage has zero gradient at the current policy.
    """
    return 2.0 * mu_k / spec.epsilon


def dhat_offset(mu_k: float, z_scaled: float, spec: ConstraintSpec) -> float:
    """``d_hat - d(pi_k)`` for a horizon-scaled expected cost advantage ``z_scaled``."""
    return (2.0 * mu_k * z_scaled + z_scaled * z_scaled) / spec.epsilon


def effective_horizon(cost_gamma: float, mean_episode_length: float | None = None) -> float:
    """``1 / (1 - gamma_c)``, or the mean episode length when ``gamma_c == 1``."""
    if cost_gamma < 1.0:
        return 1.0 / (1.0 - cost_gamma)
    if mean_episode_length is None:
        raise ValueError("undiscounted costs need the empirical mean episode length")
    return float(mean_episode_length)


def worst_case_bound(alpha_aug: float, alpha_cost: float, mu_k: float, delta: float,
                     cost_gamma: float, epsilon: float) -> float | None:
    """Worst-case Chebyshev violation after a trust-region step.

    Returns ``None`` when ``cost_gamma == 1``, where the bound is undefined.
    """
    if cost_gamma >= 1.0:
        return None
    k = math.sqrt(2.0 * delta) * cost_gamma / (1.0 - cost_gamma) ** 2
    m = mu_k + alpha_cost / (1.0 - cost_gamma)
    return k * (alpha_aug + 2.0 * alpha_cost / epsilon * m)
