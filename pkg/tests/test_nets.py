import math

import numpy as np
import pytest

from oracles import fd_grad, kl_fd_fvp, rel_err, with_params
from varcpo.nets import (MLP, CategoricalPolicy, GaussianPolicy, ValueHead, load_approximator,
                         save_approximator)

def randomized(obj, rng, scale=0.5):
    obj.set_params(rng.normal(scale=scale, size=obj.params.shape))
    return obj


def test_initial_categorical_policy_is_uniform():
    pol = CategoricalPolicy(5, 4, (8, 8), np.random.default_rng(0))
    p = pol.forward_policy(np.random.default_rng(1).normal(size=(3, 5)))
    assert np.allclose(p, 0.25)
    assert np.array_equal(p, pol.forward_policy(np.random.default_rng(1).normal(size=(3, 5))))


def test_uniform_policy_score_of_chosen_logit():
    pol = CategoricalPolicy(3, 4, (6,), np.random.default_rng(0))
    x = np.ones((1, 3))
    g = pol.log_prob_grad(x, 2)
    # the bias of the output layer is the last block: d log pi(2) / d logit_j = 1[j=2] - 1/4
    assert np.allclose(g[-4:], [-0.25, -0.25, 0.75, -0.25])


def test_input_dimension_checked():
    pol = CategoricalPolicy(3, 2, (4,), np.random.default_rng(0))
    with pytest.raises(ValueError):
        pol.forward_policy(np.ones((2, 5)))
    with pytest.raises(ValueError):
        pol.set_params(np.zeros(3))


def test_categorical_score_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        pol = randomized(CategoricalPolicy(3, 4, (5, 4), rng), rng)
        x = rng.normal(size=(1, 3))
        a = int(rng.integers(4))
        g = pol.log_prob_grad(x, a)
        fd = fd_grad(lambda th: with_params(pol, th, lambda: pol.log_prob(x, [a])[0]), pol.get_params())
        worst = max(worst, rel_err(g, fd))
    assert worst < 1e-4


def test_gaussian_score_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        pol = GaussianPolicy(2, 2, (5, 4), rng)
        theta = rng.normal(scale=0.5, size=pol.params.shape)
        theta[-2:] = rng.uniform(-1.0, 0.5, size=2)
        pol.set_params(theta)
        x = rng.normal(size=(1, 2))
        a = rng.normal(size=(1, 2))
        g = pol.log_prob_grad(x, a)
        fd = fd_grad(lambda th: with_params(pol, th, lambda: pol.log_prob(x, a)[0]), pol.get_params())
        worst = max(worst, rel_err(g, fd))
    assert worst < 1e-4


def test_value_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        v = randomized(ValueHead(3, (5, 4), rng, scale=float(rng.uniform(0.5, 3))), rng)
        x = rng.normal(size=(4, 3))
        t = rng.normal(size=4)
        _, g = v.value_grad(x, t)
        fd = fd_grad(lambda th: with_params(v, th, lambda: v.mse(x, t)), v.get_params())
        worst = max(worst, rel_err(g, fd))
    assert worst < 1e-4


@pytest.mark.parametrize("kind", ["categorical", "gaussian"])
def test_fisher_vector_product_matches_kl_hessian(kind):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        if kind == "categorical":
            pol = randomized(CategoricalPolicy(3, 3, (4, 4), rng), rng)
        else:
            pol = GaussianPolicy(2, 2, (4, 4), rng)
            theta = rng.normal(scale=0.5, size=pol.params.shape)
            theta[-2:] = rng.uniform(-1.0, 0.5, size=2)
            pol.set_params(theta)
        x = rng.normal(size=(5, pol.architecture[0]))
        v = rng.normal(size=pol.params.shape)
        worst = max(worst, rel_err(pol.fisher_vector_product(x, v), kl_fd_fvp(pol, x, v)))
    assert worst < 1e-3


def test_kl_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    pol = randomized(CategoricalPolicy(3, 3, (4,), rng), rng)
    x = rng.normal(size=(6, 3))
    old = randomized(pol.copy(), rng).dist(x)
    g = pol.kl_grad(old, x)
    fd = fd_grad(lambda th: with_params(pol, th, lambda: float(pol.kl_from(old, x).mean())), pol.get_params())
    assert rel_err(g, fd) < 1e-4


def test_fisher_is_symmetric_psd_and_linear():
    rng = np.random.default_rng(5)
    pol = randomized(CategoricalPolicy(4, 3, (6, 5), rng), rng)
    x = rng.normal(size=(20, 4))
    assert np.all(pol.fisher_vector_product(x, np.zeros(pol.params.shape)) == 0)
    for _ in range(20):
        u, v = rng.normal(size=(2, pol.params.size))
        fu, fv = pol.fisher_vector_product(x, u), pol.fisher_vector_product(x, v)
        assert abs(u @ fv - v @ fu) < 1e-8 * (1 + abs(u @ fv))
        assert v @ fv >= -1e-12
    assert np.allclose(pol.fisher_vector_product(x, v, damping=0.1), fv + 0.1 * v)


def test_kl_examples():
    pol = CategoricalPolicy(1, 2, (3,), np.random.default_rng(0))
    x = np.ones((1, 1))
    # logits (0, log 1/9) give probabilities (0.9, 0.1)
    pol.net.layers()[-1][1][:] = [0.0, math.log(1 / 9)]
    assert np.allclose(pol.dist(x), [[0.9, 0.1]])
    kl = pol.kl_from(np.array([[0.5, 0.5]]), x)[0]
    assert kl == pytest.approx(0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1))
    assert kl == pytest.approx(0.5108, abs=1e-4)
    assert pol.kl_from(pol.dist(x), x)[0] == pytest.approx(0.0, abs=1e-15)


def test_score_identity_and_normalization():
    rng = np.random.default_rng(6)
    pol = randomized(CategoricalPolicy(3, 4, (5,), rng), rng, scale=2.0)
    x = rng.normal(size=(1, 3))
    p = pol.dist(x)[0]
    assert p.sum() == pytest.approx(1.0, abs=1e-8)
    total = sum(p[a] * pol.log_prob_grad(x, a) for a in range(4))
    assert np.allclose(total, 0.0, atol=1e-12)


def test_gaussian_log_std_clamped():
    pol = GaussianPolicy(2, 1, (4,), np.random.default_rng(0), log_std_bounds=(-2.0, 1.0))
    theta = pol.get_params()
    theta[-1] = 50.0
    pol.set_params(theta)
    assert pol.log_std[0] == 1.0
    mean, ls = pol.dist(np.zeros((3, 2)))
    assert np.all(np.isfinite(ls)) and np.all(ls == 1.0)


def test_value_head_zero_init_and_descent():
    rng = np.random.default_rng(7)
    v = ValueHead(3, (16, 16), rng)
    x = rng.normal(size=(64, 3))
    assert np.all(v.value_forward(x) == 0.0)
    t = np.sin(x[:, 0]) + x[:, 1]
    losses = []
    for _ in range(100):
        loss, g = v.value_grad(x, t)
        losses.append(loss)
        v.params[:] -= 0.05 * g
    assert losses[-1] < losses[0]


@pytest.mark.parametrize("make", [
    lambda rng: CategoricalPolicy(5, 4, (8, 8), rng),
    lambda rng: GaussianPolicy(3, 2, (8,), rng),
    lambda rng: ValueHead(5, (8, 8), rng, scale=225.0),
])
def test_checkpoint_round_trip_is_exact(tmp_path, make):
    rng = np.random.default_rng(8)
    obj = randomized(make(rng), rng)
    path = tmp_path / "model.txt"
    save_approximator(obj, path)
    back = load_approximator(path)
    assert type(back) is type(obj)
    assert np.array_equal(back.get_params(), obj.get_params())
    assert back.architecture == obj.architecture
    save_approximator(back, tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("hello\n")
    with pytest.raises(ValueError):
        load_approximator(p)


def test_mlp_jvp_matches_finite_difference():
    rng = np.random.default_rng(9)
    net = MLP([3, 5, 2], rng=rng, zero_last=False)
    x = rng.normal(size=(4, 3))
    v = rng.normal(size=net.size)
    _, acts = net.forward(x)
    theta = net.params.copy()
    net.params[:] = theta + 1e-6 * v
    up, _ = net.forward(x)
    net.params[:] = theta - 1e-6 * v
    dn, _ = net.forward(x)
    net.params[:] = theta
    assert rel_err(net.jvp(acts, v), (up - dn) / 2e-6) < 1e-6
