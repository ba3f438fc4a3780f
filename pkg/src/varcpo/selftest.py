"""Numerical identity suites behind the Chebyshev surrogate.

Each suite draws random instances, computes both sides of an identity (or a
probability and its bound) and reports the worst discrepancy found.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import risk
from .risk import ConstraintSpec


@dataclass
class SuiteResult:
    name: str
    passed: bool
    checked: int
    worst: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.checked} cases, worst {self.worst:.3g}{' ' + self.detail if self.detail else ''}"


def _random_spec(rng) -> ConstraintSpec:
    return ConstraintSpec(rho=float(rng.uniform(1.0, 50.0)), epsilon=float(rng.uniform(0.01, 0.5)))


def square_return_suite(n: int = 1000, seed: int = 0, tol: float = 1e-9) -> SuiteResult:
    """Squared discounted return equals the sum of per-step local terms."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        length = int(rng.integers(1, 60))
        costs = rng.exponential(rng.uniform(0.1, 10.0), size=length) * (rng.random(length) < 0.7)
        gamma = 1.0 if rng.random() < 0.2 else float(rng.uniform(0.5, 1.0))
        direct, decomposed = risk.square_return_decomposition_check(costs, gamma)
        worst = max(worst, abs(direct - decomposed) / (1.0 + abs(direct)))
    return SuiteResult("square-return decomposition", worst < tol, n, worst)


def random_trajectory_distribution(rng, max_trajectories: int = 8, max_length: int = 15):
    """Finite set of cost sequences with probabilities."""
    k = int(rng.integers(1, max_trajectories + 1))
    trajs = [rng.exponential(rng.uniform(0.1, 3.0), size=int(rng.integers(1, max_length + 1)))
             for _ in range(k)]
    probs = rng.dirichlet(np.ones(k))
    return trajs, probs


def augmented_identity_suite(n: int = 200, seed: int = 1, tol: float = 1e-9,
                             beta_shift: float = 0.0) -> SuiteResult:
    """Expected augmented return minus ``d(mu)`` equals the Chebyshev quadratic form.

    ``beta_shift`` perturbs the beta used in the augmented cost, which must
    make the suite fail.
    """
    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    while checked < n:
        spec = _random_spec(rng)
        gamma = 1.0 if rng.random() < 0.3 else float(rng.uniform(0.8, 1.0))
        trajs, probs = random_trajectory_distribution(rng)
        returns, aug = [], []
        for costs in trajs:
            y, disc = risk.accumulated_costs(costs, gamma)
            returns.append(float(np.sum(disc * costs)))
            aug.append(float(np.sum(disc * risk.augmented_cost(costs, y, disc, spec, spec.beta + beta_shift))))
        returns = np.array(returns)
        mu = float(probs @ returns)
        if mu >= spec.rho:
            continue
        var = float(probs @ (returns - mu) ** 2)
        lhs = float(probs @ np.array(aug)) - risk.d_bound(mu, spec)
        rhs = risk.chebyshev_lhs(mu, var, spec)
        worst = max(worst, abs(lhs - rhs) / (1.0 + abs(rhs)))
        checked += 1
    return SuiteResult("augmented-return identity", worst < tol, n, worst)


def chebyshev_validity_suite(n: int = 1000, seed: int = 2) -> SuiteResult:
    """Distributions satisfying the surrogate have ``P(C >= rho) <= eps``.

    Each distribution is squeezed toward a mean below ``rho`` until the
    quadratic form is non-positive, sometimes exactly onto the boundary;
    every fourth case is the two-point distribution that makes the bound tight.
    """
    rng = np.random.default_rng(seed)
    worst = -np.inf
    failures = 0
    for i in range(n):
        spec = _random_spec(rng)
        if i % 4 == 3:
            mean = float(rng.uniform(0.0, spec.rho * 0.99))
            eps = spec.epsilon
            # mass eps at rho, the rest placed so the mean is preserved
            low = (mean - eps * spec.rho) / (1.0 - eps)
            values = np.array([low, spec.rho])
            probs = np.array([1.0 - eps, eps])
        else:
            k = int(rng.integers(2, 12))
            values = rng.uniform(0.0, 3.0 * spec.rho, size=k)
            probs = rng.dirichlet(np.ones(k))
            mean = float(rng.uniform(0.0, spec.rho * 0.999))
            centered = values - probs @ values
            var = float(probs @ centered**2)
            limit = (spec.rho - mean) ** 2 / spec.beta
            scale = np.sqrt(limit / var) if var > 0 else 1.0
            scale *= 1.0 if rng.random() < 0.3 else float(rng.uniform(0.0, 1.0))
            values = mean + scale * centered
        mu = float(probs @ values)
        var = float(probs @ (values - mu) ** 2)
        if risk.chebyshev_lhs(mu, var, spec) > 0.0:
            # rounding pushed the boundary case over; shrink a hair
            values = mu + (1.0 - 1e-12) * (values - mu)
            var = float(probs @ (values - mu) ** 2)
        tail = float(probs[values >= spec.rho].sum())
        excess = tail - spec.epsilon
        worst = max(worst, excess)
        failures += excess > 1e-12
    return SuiteResult("chebyshev validity", failures == 0, n, worst,
                       f"({failures} counterexamples, worst is P(C>=rho) - eps)")


def run_selftest(scale: float = 1.0, beta_shift: float = 0.0) -> list[SuiteResult]:
    """All suites; ``scale`` multiplies the default case counts."""
    def count(n):
        return max(1, int(round(n * scale)))
    return [
        square_return_suite(count(1000)),
        augmented_identity_suite(count(200), beta_shift=beta_shift),
        chebyshev_validity_suite(count(1000)),
    ]
