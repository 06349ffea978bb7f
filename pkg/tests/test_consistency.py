from itertools import combinations

import numpy as np
import pytest

from scoredistill.consistency import (ConsistencyFn, consistency_eval, eps_from_origin,
                                      self_consistency_deviation)
from scoredistill.errors import ConfigurationError
from scoredistill.schedule import perturb, predict_x0
from scoredistill.solvers import Trajectory, oracle_trajectory
from scoredistill.target import UNCONDITIONAL

ORACLE = ConsistencyFn("oracle")
TRAJ_TIMES = [950, 850, 750, 650, 550, 450, 350, 250, 150, 50]


def batched_deviations(cf, target, traj, sched):
    """Per-row max pairwise deviation for a batch of trajectories."""
    outs = [consistency_eval(cf, target, x, t, sched) for t, x in zip(traj.timesteps, traj.points)]
    return np.max([np.linalg.norm(a - b, axis=-1) for a, b in combinations(outs, 2)], axis=0)


def test_identity_for_standard_normal(sched, gauss2, rng):
    for _ in range(100):
        x, t = rng.normal(size=2) * 2, int(rng.integers(1, 1001))
        assert np.linalg.norm(consistency_eval(ORACLE, gauss2, x, t, sched) - x) <= 1e-6


def test_more_steps_closer_to_oracle(sched, bimodal, rng):
    x = rng.normal(size=(500, 2))
    exact = consistency_eval(ORACLE, bimodal, x, 800, sched)
    err = {k: np.linalg.norm(consistency_eval(ConsistencyFn(k), bimodal, x, 800, sched) - exact,
                             axis=1).mean() for k in (1, 4)}
    assert err[1] > err[4]


def test_small_t_stays_near_input(sched, bimodal, rng):
    x = bimodal.sample(200, rng)
    for cf in (ORACLE, ConsistencyFn(1)):
        moved = np.linalg.norm(consistency_eval(cf, bimodal, x, 1, sched) - x, axis=1)
        assert moved.max() <= 20 * sched.sigma[1]


def test_clean_limit_rate(sched, bimodal, rng):
    """Origin prediction error for perturbed samples shrinks like sigma_t."""
    x0 = bimodal.sample(400, rng)
    eps = rng.normal(size=x0.shape)
    ratios = []
    for t in (1, 2, 4, 8, 16):
        f = consistency_eval(ORACLE, bimodal, perturb(x0, t, eps, sched), t, sched)
        ratios.append(np.linalg.norm(f - x0, axis=1).mean() / sched.sigma[t])
    assert max(ratios) < 2 * min(ratios)
    assert np.linalg.norm(consistency_eval(ORACLE, bimodal, perturb(x0, 1, eps, sched), 1, sched) - x0,
                          axis=1).mean() < 0.02


def test_eps_from_origin(sched, rng):
    x, t = rng.normal(size=3), 420
    np.testing.assert_allclose(eps_from_origin(x, t, x / np.sqrt(sched.alpha_bar[t]), sched), 0.0,
                               atol=1e-15)
    e = rng.normal(size=3)
    np.testing.assert_allclose(eps_from_origin(x, t, predict_x0(x, t, e, sched), sched), e, rtol=1e-12)
    x0 = rng.normal(size=3)
    np.testing.assert_allclose(eps_from_origin(perturb(x0, t, e, sched), t, x0, sched), e, rtol=1e-12)
    with pytest.raises(ConfigurationError):
        eps_from_origin(x, 0, x, sched)


def test_self_consistency_oracle_vs_one_step(sched, bimodal, rng):
    traj = oracle_trajectory(bimodal, rng.normal(size=2), TRAJ_TIMES, UNCONDITIONAL, sched)
    exact = self_consistency_deviation(ORACLE, bimodal, traj, sched)
    assert exact <= 1e-4
    assert self_consistency_deviation(ConsistencyFn(1), bimodal, traj, sched) > exact


def test_fidelity_monotone_on_average(sched, bimodal, rng):
    traj = oracle_trajectory(bimodal, rng.normal(size=(100, 2)), TRAJ_TIMES, UNCONDITIONAL, sched)
    dev = {k: batched_deviations(ConsistencyFn(k), bimodal, traj, sched).mean()
           for k in ("oracle", 4, 1)}
    assert dev["oracle"] <= dev[4] <= dev[1]


def test_preconditions(sched, bimodal):
    with pytest.raises(ConfigurationError):
        self_consistency_deviation(ORACLE, bimodal, Trajectory([500], [np.zeros(2)]), sched)
    with pytest.raises(ConfigurationError):
        consistency_eval(ORACLE, bimodal, np.zeros(2), 0, sched)
    for bad in (0, -2, 1.5, True, "fast"):
        with pytest.raises(ConfigurationError):
            ConsistencyFn(bad)
    assert ConsistencyFn(3).forwards == 3 and ORACLE.forwards == 1
