import numpy as np
import pytest

from varcpo import risk
from varcpo.exact import ExactEvaluator, TrajectoryTree, exact_varcpo_step, lake_cmdp
from varcpo.risk import ConstraintSpec

SPEC = ConstraintSpec(rho=8.0, epsilon=0.2)
THETA = np.array([[1.0, -0.5], [0.3, 0.2], [-0.4, 0.9]])


@pytest.fixture(scope="module")
def ev():
    return ExactEvaluator(lake_cmdp(horizon=6), SPEC)


def test_tree_probabilities_sum_to_one(ev):
    for p in ev.tree.reach_probs(THETA):
        assert p.sum() == pytest.approx(1.0)
    assert len(TrajectoryTree(lake_cmdp(horizon=3)).leaves.state) == 27


def test_root_values_equal_returns(ev):
    s = ev.summary(THETA)
    for stream, target in (("reward", s.reward_return), ("cost", s.mu), ("aug", s.j_aug)):
        V, _ = ev.q_values(THETA, stream)
        assert V[0][0] == pytest.approx(target, rel=1e-12)


def test_expected_augmented_return_minus_bound_is_quadratic_form(ev):
    s = ev.summary(THETA)
    assert s.j_aug - risk.d_bound(s.mu, SPEC) == pytest.approx(risk.chebyshev_lhs(s.mu, s.variance, SPEC))


@pytest.mark.parametrize("stream", ["reward", "cost", "aug"])
def test_surrogate_gradient_is_policy_gradient(ev, stream):
    def value(theta):
        s = ev.summary(theta)
        return {"reward": s.reward_return, "cost": s.mu, "aug": s.j_aug}[stream]

    g = ev.surrogate_grad(THETA, stream)
    fd = np.zeros_like(THETA)
    for idx in np.ndindex(THETA.shape):
        e = np.zeros_like(THETA)
        e[idx] = 1e-6
        fd[idx] = (value(THETA + e) - value(THETA - e)) / 2e-6
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-7)


def test_surrogate_is_exact_at_current_policy(ev):
    for stream in ("reward", "cost", "aug"):
        assert ev.surrogate_change(THETA, THETA, stream) == pytest.approx(0.0, abs=1e-10)
    assert ev.max_expected_advantage(THETA, THETA, "cost") == pytest.approx(0.0, abs=1e-10)


def test_mean_kl_second_order_matches_fisher(ev):
    v = np.random.default_rng(0).normal(size=THETA.shape)
    h = 1e-3
    kl = ev.mean_kl(THETA, THETA + h * v)
    quad = 0.5 * h * h * v.ravel() @ ev.fisher(THETA) @ v.ravel()
    assert kl == pytest.approx(quad, rel=1e-2)


def test_exact_step_respects_trust_region(ev):
    theta = np.array([[3.0, 0.0]] * 3)
    new, rec = exact_varcpo_step(ev, theta, delta=0.01)
    assert rec.report.kl <= 0.01 + 1e-12
    assert rec.bound is not None and rec.constraint_after <= rec.bound
