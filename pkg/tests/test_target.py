import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from scoredistill.errors import ConfigurationError, DimensionError
from scoredistill.schedule import predict_x0
from scoredistill.target import (UNCONDITIONAL, MixtureTarget, Prompt, cfg_eps, eps_star,
                                 perturbed_score, pushforward, standard_normal)

RIGHT = Prompt((1,), 7.5)


def scipy_log_density(target, x, a, selected=None):
    """Perturbed mixture density built from scipy's Gaussian pdf."""
    idx = range(target.n_components) if not selected else selected
    w = np.array([target.weights[k] for k in idx])
    w = w / w.sum()
    total = 0.0
    for wk, k in zip(w, idx):
        var = a * target.scales[k] ** 2 + 1 - a
        total += wk * multivariate_normal(np.sqrt(a) * target.means[k], var * np.eye(target.dim)).pdf(x)
    return np.log(total)


def central_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_standard_normal_score_is_minus_x(sched, gauss2, rng):
    for t in (0, 1, 250, 999, 1000):
        x = rng.normal(size=(5, 2))
        np.testing.assert_allclose(perturbed_score(gauss2, x, t, UNCONDITIONAL, sched), -x,
                                   rtol=1e-13, atol=1e-13)


def test_single_gaussian_clean_score(sched):
    mu, s = np.array([1.0, -2.0]), 0.7
    tgt = MixtureTarget(np.array([1.0]), mu[None], np.array([s]))
    x = np.array([0.3, 0.4])
    np.testing.assert_allclose(perturbed_score(tgt, x, 0, UNCONDITIONAL, sched), -(x - mu) / s ** 2)


def test_symmetric_bimodal_origin(sched, bimodal):
    np.testing.assert_allclose(perturbed_score(bimodal, np.zeros(2), 0, UNCONDITIONAL, sched),
                               0.0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(t=st.integers(0, 1000), seed=st.integers(0, 2 ** 31), cond=st.booleans())
def test_score_matches_finite_differences(sched, bimodal, t, seed, cond):
    r = np.random.default_rng(seed)
    x = r.normal(size=2) * 2.5
    prompt = RIGHT if cond else UNCONDITIONAL
    a = sched.alpha_bar[t]
    fd = central_grad(lambda y: scipy_log_density(bimodal, y, a, prompt.selected), x)
    got = perturbed_score(bimodal, x, t, prompt, sched)
    assert np.linalg.norm(got - fd) <= 1e-6 * max(np.linalg.norm(fd), 1.0)


def test_eps_star_standard_normal(sched, gauss2, rng):
    x = rng.normal(size=(10, 2))
    for t in (1, 400, 1000):
        np.testing.assert_allclose(eps_star(gauss2, x, t, UNCONDITIONAL, sched), sched.sigma[t] * x,
                                   rtol=1e-13)


def test_eps_star_vanishes_with_sigma(sched, bimodal):
    x = np.array([2.0, 0.1])
    assert np.linalg.norm(eps_star(bimodal, x, 1, UNCONDITIONAL, sched)) < 0.1
    np.testing.assert_array_equal(bimodal.eps(x, 1.0), 0.0)


def test_eps_star_bimodal_against_quadrature(sched, bimodal):
    t = 500
    a = sched.alpha_bar[t]
    x = np.sqrt(a) * bimodal.means[1]
    fd = central_grad(lambda y: scipy_log_density(bimodal, y, a), x)
    np.testing.assert_allclose(eps_star(bimodal, x, t, UNCONDITIONAL, sched),
                               -sched.sigma[t] * fd, rtol=1e-6, atol=1e-9)


def test_eps_x0_duality(sched, bimodal, rng):
    for t in (5, 300, 900):
        x = rng.normal(size=(20, 2)) * 2
        e = eps_star(bimodal, x, t, UNCONDITIONAL, sched)
        sc = perturbed_score(bimodal, x, t, UNCONDITIONAL, sched)
        a, s2 = sched.alpha_bar[t], sched.sigma[t] ** 2
        np.testing.assert_allclose(predict_x0(x, t, e, sched), (x + s2 * sc) / np.sqrt(a),
                                   rtol=1e-10, atol=1e-10)


def test_cfg_scales(sched, bimodal, rng):
    x, t = rng.normal(size=(4, 2)), 350
    cond = eps_star(bimodal, x, t, RIGHT, sched)
    uncond = eps_star(bimodal, x, t, UNCONDITIONAL, sched)
    np.testing.assert_array_equal(cfg_eps(bimodal, x, t, Prompt((1,), 1.0), sched), cond)
    np.testing.assert_array_equal(cfg_eps(bimodal, x, t, Prompt((1,), 0.0), sched), uncond)
    np.testing.assert_allclose(cfg_eps(bimodal, x, t, RIGHT, sched), uncond + 7.5 * (cond - uncond))
    with pytest.raises(ConfigurationError):
        cfg_eps(bimodal, x, t, UNCONDITIONAL, sched)


def test_cfg_direct_arithmetic():
    cond, uncond = np.array([1.0, 0.0]), np.zeros(2)
    np.testing.assert_array_equal(uncond + 7.5 * (cond - uncond), [7.5, 0.0])


def test_cfg_collapse_when_all_selected(sched, bimodal, rng):
    x = rng.normal(size=(6, 2))
    outs = [cfg_eps(bimodal, x, 420, Prompt((0, 1), w), sched) for w in (0.0, 1.0, 7.5, 100.0)]
    for o in outs[1:]:
        np.testing.assert_allclose(o, outs[0], rtol=1e-12, atol=1e-14)


def test_pushforward(bimodal, rng):
    np.testing.assert_array_equal(pushforward(bimodal, np.eye(2)).means, bimodal.means)
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    np.testing.assert_allclose(pushforward(bimodal, rot).means[1], [0.0, 3.0], atol=1e-15)
    with pytest.raises(ConfigurationError):
        pushforward(bimodal, np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_pushforward_preserves_density(rng):
    from scipy.stats import ortho_group
    tgt = MixtureTarget(np.array([0.2, 0.3, 0.5]), rng.normal(size=(3, 4)), np.array([0.5, 1.0, 0.3]))
    R = ortho_group.rvs(4, random_state=7)
    moved = pushforward(tgt, R)
    x = rng.normal(size=(100, 4))
    np.testing.assert_allclose(moved.log_prob(x @ R.T), tgt.log_prob(x), rtol=1e-10)
    np.testing.assert_allclose([scipy_log_density(moved, R @ p, 1.0) for p in x[:10]],
                               [scipy_log_density(tgt, p, 1.0) for p in x[:10]], rtol=1e-10)


def test_batched_pushforward_matches_individual(bimodal, sched, rng):
    from scipy.stats import ortho_group
    Rs = ortho_group.rvs(2, size=5, random_state=3)
    x = rng.normal(size=(5, 2))
    batched = eps_star(pushforward(bimodal, Rs), x, 600, RIGHT, sched)
    single = np.stack([eps_star(pushforward(bimodal, R), xi, 600, RIGHT, sched) for R, xi in zip(Rs, x)])
    np.testing.assert_allclose(batched, single, rtol=1e-13)


def test_log_sum_exp_stability(sched, bimodal):
    far = np.array([1e4, -3e3])
    sc = perturbed_score(bimodal, far, 0, UNCONDITIONAL, sched)
    assert np.all(np.isfinite(sc))
    np.testing.assert_allclose(sc, -(far - bimodal.means[1]) / 0.25)


def test_validation():
    with pytest.raises(ConfigurationError):
        MixtureTarget(np.array([0.5, 0.6]), np.zeros((2, 2)), np.ones(2))
    with pytest.raises(ConfigurationError):
        MixtureTarget(np.array([1.0]), np.zeros((1, 2)), np.array([0.0]))
    with pytest.raises(ConfigurationError):
        MixtureTarget(np.array([0.5, 0.5]), np.zeros((3, 2)), np.ones(2))
    with pytest.raises(ConfigurationError):
        standard_normal(2).restrict(Prompt((3,)))
    with pytest.raises(ConfigurationError):
        Prompt((1,), -1.0)
    with pytest.raises(DimensionError):
        standard_normal(2).score(np.zeros(3))


def test_from_components_normalises():
    tgt = MixtureTarget.from_components([(2, [0, 0], 1.0), (6, [1, 1], 0.5)])
    np.testing.assert_allclose(tgt.weights, [0.25, 0.75])
    assert tgt.dim == 2


def test_sampling_moments(bimodal):
    x = bimodal.sample(200_000, np.random.default_rng(0))
    # mean 0; second moment 9 + 0.25 along the axis of separation
    np.testing.assert_allclose(x.mean(0), 0.0, atol=0.03)
    np.testing.assert_allclose((x ** 2).mean(0), [9.25, 0.25], rtol=0.01)
