"""The eight end-to-end acceptance criteria, each at its stated tolerance.

Criteria 6 and 7 train real agents and take tens of minutes together.
"""

import filecmp
import math
from pathlib import Path

import numpy as np
import pytest

from oracles import (fd_grad, kl_fd_fvp, random_spd, random_step_problem, rel_err, step_oracle,
                     with_params)
from varcpo import risk
from varcpo.config import load_config
from varcpo.exact import ExactEvaluator, lake_cmdp, run_exact_updates
from varcpo.experiments import final_summary, read_rows, recovery_trace, run_recovery, run_seeds
from varcpo.nets import CategoricalPolicy, GaussianPolicy, ValueHead
from varcpo.risk import ConstraintSpec
from varcpo.selftest import random_trajectory_distribution
from varcpo.solver import StepProblem, conjugate_gradient, solve_step
from varcpo.trainer import train

SEEDS = range(5)
STUDY_STEPS = 200_000
ALGOS = ("varcpo", "cpo", "unconstrained")
DELTA = 0.01
CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="module")
def icylake_study(tmp_path_factory):
    out = tmp_path_factory.mktemp("icylake")
    return {algo: run_seeds(load_config(CONFIGS / f"icylake_{algo}.cfg"), SEEDS, out / algo,
                            total_steps=STUDY_STEPS)
            for algo in ALGOS}


def test_criterion_1_identities(criterion):
    rng = np.random.default_rng(100)
    worst_sq = 0.0
    for _ in range(1000):
        costs = rng.exponential(rng.uniform(0.1, 10.0), size=int(rng.integers(1, 60)))
        gamma = 1.0 if rng.random() < 0.2 else float(rng.uniform(0.5, 1.0))
        direct = sum(gamma**t * c for t, c in enumerate(costs)) ** 2
        y, disc = risk.accumulated_costs(costs, gamma)
        decomposed = float(np.sum(disc * (disc * costs**2 + 2.0 * y * costs)))
        worst_sq = max(worst_sq, abs(direct - decomposed) / (1.0 + abs(direct)))

    worst_aug, checked = 0.0, 0
    while checked < 200:
        spec = ConstraintSpec(rho=float(rng.uniform(1.0, 50.0)), epsilon=float(rng.uniform(0.01, 0.5)))
        gamma = 1.0 if rng.random() < 0.3 else float(rng.uniform(0.8, 1.0))
        trajs, probs = random_trajectory_distribution(rng)
        returns = np.array([sum(gamma**t * c for t, c in enumerate(tr)) for tr in trajs])
        mu = float(probs @ returns)
        if mu >= spec.rho:
            continue
        aug = []
        for tr in trajs:
            y, disc = risk.accumulated_costs(tr, gamma)
            aug.append(float(np.sum(disc * risk.augmented_cost(tr, y, disc, spec))))
        var = float(probs @ (returns - mu) ** 2)
        quad = spec.beta * var - (spec.rho - mu) ** 2
        lhs = float(probs @ np.array(aug)) - (mu * mu / spec.epsilon + spec.rho**2)
        worst_aug = max(worst_aug, abs(lhs - quad) / (1.0 + abs(quad)))
        checked += 1
    ok = worst_sq < 1e-9 and worst_aug < 1e-9
    assert criterion(1, "identity suite", ok,
                     f"square-return worst {worst_sq:.2e} (1000 cases), augmented worst {worst_aug:.2e} (200 cases)")


def test_criterion_2_chebyshev_validity(criterion):
    rng = np.random.default_rng(200)
    failures, worst = 0, -math.inf
    for i in range(1000):
        spec = ConstraintSpec(rho=float(rng.uniform(1.0, 50.0)), epsilon=float(rng.uniform(0.01, 0.5)))
        if i % 4 == 0:
            # tight case: mass eps exactly at rho
            mean = float(rng.uniform(0.0, 0.99 * spec.rho))
            values = np.array([(mean - spec.epsilon * spec.rho) / (1 - spec.epsilon), spec.rho])
            probs = np.array([1 - spec.epsilon, spec.epsilon])
        else:
            k = int(rng.integers(2, 12))
            probs = rng.dirichlet(np.ones(k))
            raw = rng.uniform(0.0, 3.0 * spec.rho, size=k)
            centered = raw - probs @ raw
            mean = float(rng.uniform(0.0, 0.999 * spec.rho))
            limit = (spec.rho - mean) ** 2 / spec.beta
            scale = math.sqrt(limit / float(probs @ centered**2)) * float(rng.uniform(0.0, 1.0) ** 0.3)
            values = mean + scale * centered
        mu = float(probs @ values)
        var = float(probs @ (values - mu) ** 2)
        if risk.chebyshev_lhs(mu, var, spec) > 0.0:
            values = mu + (1.0 - 1e-12) * (values - mu)
            var = float(probs @ (values - mu) ** 2)
        assert risk.chebyshev_lhs(mu, var, spec) <= 0.0
        excess = float(probs[values >= spec.rho].sum()) - spec.epsilon
        worst = max(worst, excess)
        failures += excess > 1e-12
    assert criterion(2, "chebyshev validity", failures == 0,
                     f"{failures} counterexamples in 1000, max P(C>=rho)-eps = {worst:.2e}")


def test_criterion_3_solver(criterion, icylake_study):
    rng = np.random.default_rng(300)
    worst_obj, compared = 0.0, 0
    while compared < 100:
        g, b, c, delta, H = random_step_problem(rng)
        best = step_oracle(g, b, c, delta, H)
        if best is None:
            continue
        x, _ = solve_step(StepProblem(g, b, c, delta, lambda v: H @ v), cg_iters=10, cg_tol=1e-14)
        worst_obj = max(worst_obj, abs(float(g @ x) - best))
        compared += 1

    worst_cg = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 40))
        A = random_spd(rng, n)
        rhs = rng.normal(size=n)
        res = conjugate_gradient(lambda v: A @ v, rhs, iters=4 * n, tol=1e-10)
        worst_cg = max(worst_cg, np.linalg.norm(A @ res.x - rhs) / np.linalg.norm(rhs))

    kls = [float(r["kl"]) for paths in icylake_study.values() for p in paths
           for r in read_rows(p) if r["accepted"] == "1"]
    max_kl = max(kls)
    ok = worst_obj < 1e-3 and worst_cg < 1e-6 and max_kl <= 1.5 * DELTA
    assert criterion(3, "solver correctness", ok,
                     f"objective gap {worst_obj:.2e}, CG residual {worst_cg:.2e}, "
                     f"max KL {max_kl:.4f} over {len(kls)} accepted steps (limit {1.5 * DELTA})")


def test_criterion_4_gradient_fidelity(criterion):
    rng = np.random.default_rng(400)
    worst_grad = worst_fvp = 0.0
    for i in range(100):
        cat = CategoricalPolicy(3, 3, (5, 4), rng)
        cat.set_params(rng.normal(scale=0.7, size=cat.params.shape))
        x = rng.normal(size=(1, 3))
        a = int(rng.integers(3))
        fd = fd_grad(lambda th: with_params(cat, th, lambda: cat.log_prob(x, np.array([a]))[0]), cat.get_params())
        worst_grad = max(worst_grad, rel_err(cat.log_prob_grad(x, a), fd))

        gauss = GaussianPolicy(2, 2, (4, 4), rng)
        theta = rng.normal(scale=0.5, size=gauss.params.shape)
        theta[-2:] = rng.uniform(-1.0, 0.5, size=2)
        gauss.set_params(theta)
        xg = rng.normal(size=(1, 2))
        act = rng.normal(size=(1, 2))
        fd = fd_grad(lambda th: with_params(gauss, th, lambda: gauss.log_prob(xg, act)[0]), gauss.get_params())
        worst_grad = max(worst_grad, rel_err(gauss.log_prob_grad(xg, act), fd))

        val = ValueHead(3, (5, 4), rng, scale=float(rng.uniform(0.5, 3.0)))
        val.set_params(rng.normal(scale=0.5, size=val.params.shape))
        xv, t = rng.normal(size=(4, 3)), rng.normal(size=4)
        fd = fd_grad(lambda th: with_params(val, th, lambda: val.mse(xv, t)), val.get_params())
        worst_grad = max(worst_grad, rel_err(val.value_grad(xv, t)[1], fd))

        pol = cat if i % 2 == 0 else gauss
        xs = rng.normal(size=(5, pol.architecture[0]))
        v = rng.normal(size=pol.params.shape)
        worst_fvp = max(worst_fvp, rel_err(pol.fisher_vector_product(xs, v), kl_fd_fvp(pol, xs, v)))
    ok = worst_grad < 1e-4 and worst_fvp < 1e-3
    assert criterion(4, "gradient fidelity", ok,
                     f"worst gradient rel err {worst_grad:.2e}, worst FVP rel err {worst_fvp:.2e} (100 instances)")


def test_criterion_5_worst_case_bound(criterion):
    ev = ExactEvaluator(lake_cmdp(), ConstraintSpec(rho=8.0, epsilon=0.2))
    assert ev.cmdp.cost_gamma == 0.9
    rng = np.random.default_rng(0)
    records = []
    while len(records) < 100:
        theta = rng.normal(size=(ev.cmdp.n_states, ev.cmdp.n_actions)) * 1.5
        if ev.constraint(theta) > 0.0:
            continue  # the bound presumes the current policy is feasible
        records += run_exact_updates(ev, theta, steps=10, delta=DELTA)[1]
    violations = sum(r.constraint_after > r.bound for r in records)
    accepted = sum(r.report.accepted for r in records)
    slack = min(r.bound - r.constraint_after for r in records)
    ok = violations == 0 and all(r.bound is not None for r in records)
    assert criterion(5, "worst-case bound", ok,
                     f"{violations} of {len(records)} steps exceed the bound ({accepted} accepted), "
                     f"min slack {slack:.3g}")


def test_criterion_6_icylake(criterion, icylake_study):
    finals = {algo: [final_summary(p) for p in paths] for algo, paths in icylake_study.items()}

    def mean(algo, field):
        return float(np.mean([getattr(f, field) for f in finals[algo]]))

    steps = max(f.env_steps for fs in finals.values() for f in fs)
    a = mean("varcpo", "ice_visitation") < 0.05 and mean("varcpo", "cost_p95") <= 15.0
    b = all(15.0 < mean(algo, "cost_p95") and abs(mean(algo, "cost_p95") - 22.5) <= 2.5
            and mean(algo, "ice_visitation") > 0.5 for algo in ("cpo", "unconstrained"))
    c = all(mean(algo, "success_rate") > 0.95 for algo in ALGOS)
    detail = "; ".join(f"{algo} ice {mean(algo, 'ice_visitation'):.3f} p95 {mean(algo, 'cost_p95'):.1f} "
                       f"success {mean(algo, 'success_rate'):.3f}" for algo in ALGOS)
    ok = a and b and c and steps <= 1_000_000
    assert criterion(6, "icylake headline", ok, f"(a) {a} (b) {b} (c) {c}; {detail}")


def test_criterion_7_recovery(criterion, tmp_path, configs_dir):
    pre = load_config(configs_dir / "icylake_costseeking.cfg")
    var = load_config(configs_dir / "icylake_varcpo.cfg")
    csv = run_recovery(pre, var, tmp_path, iterations=30)
    trace = recovery_trace(csv, var.rho)
    checks = trace.checks()
    ok = len(checks) == 5 and all(checks.values())
    detail = ", ".join(f"{k}={v}" for k, v in checks.items())
    assert criterion(7, "recovery mode", ok,
                     f"mu {trace.mu[0]:.1f} -> below {var.rho} at iteration {trace.first_safe}; {detail}")


def test_criterion_8_determinism(criterion, tmp_path, configs_dir):
    cfg = load_config(configs_dir / "icylake_varcpo.cfg")
    assert cfg.workers == 1
    cfg.total_steps = 5 * cfg.batch_steps
    paths = []
    for name in ("a", "b"):
        cfg.output_dir = str(tmp_path / name)
        paths.append(tmp_path / name / "metrics.csv")
        train(cfg)
    same = filecmp.cmp(paths[0], paths[1], shallow=False)
    rows = len(read_rows(paths[0]))
    assert criterion(8, "determinism", same and rows == 5, f"two seed-{cfg.seed} runs byte-identical: {same}")
