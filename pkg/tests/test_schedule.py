import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoredistill.errors import ConfigurationError, DimensionError
from scoredistill.schedule import build_schedule, gamma, perturb, predict_x0, weighting

# product of (1 - beta_k) over linspace(1e-4, 0.02, 1000), evaluated once with a plain loop
ALPHA_BAR_1000 = 4.035829765375676e-05


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_invariants(kind):
    s = build_schedule(kind, 1000, 1e-4, 0.02 if kind == "linear" else 0.999)
    assert s.alpha_bar[0] == 1.0
    assert s.beta[0] == 0.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))
    np.testing.assert_allclose(s.sigma ** 2 + s.alpha_bar, 1.0, atol=1e-12, rtol=0)
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(1 - s.beta), rtol=1e-14)


def test_linear_values(sched):
    assert sched.alpha_bar[1] == pytest.approx(0.9999, abs=1e-15)
    assert sched.alpha_bar[1000] == pytest.approx(ALPHA_BAR_1000, rel=1e-9)


@pytest.mark.parametrize("args", [("linear", 1, 1e-4, 0.02), ("linear", 10, 0.0, 0.02),
                                  ("linear", 10, 0.03, 0.02), ("linear", 10, 1e-4, 1.0),
                                  ("quadratic", 10, 1e-4, 0.02)])
def test_bad_schedule(args):
    with pytest.raises(ConfigurationError):
        build_schedule(*args)


def test_schedule_is_read_only(sched):
    with pytest.raises(ValueError):
        sched.alpha_bar[3] = 0.5


def test_gamma(sched):
    assert gamma(sched, 0) == 0.0
    t = sched.nearest_timestep(0.25)
    a = sched.alpha_bar[t]
    assert gamma(sched, t) == pytest.approx(np.sqrt(1 - a) / np.sqrt(a), rel=1e-14)
    # the definition at alpha_bar = 0.25 and 0.5 directly
    assert np.sqrt(0.75) / 0.5 == pytest.approx(1.7320508, abs=1e-7)
    assert np.sqrt(0.5) / np.sqrt(0.5) == 1.0


def test_weighting(sched):
    assert weighting(sched, 400) == 1.0
    assert weighting(sched, 400, "sigma2") == pytest.approx(1 - sched.alpha_bar[400])
    assert weighting(sched, 400, "alpha_bar") == sched.alpha_bar[400]
    with pytest.raises(ConfigurationError):
        weighting(sched, 400, "snr")


def test_perturb_examples(sched):
    np.testing.assert_array_equal(perturb(np.zeros(3), 500, np.zeros(3), sched), np.zeros(3))
    x0 = np.array([1.5, -2.0])
    np.testing.assert_array_equal(perturb(x0, 0, np.array([9.0, 9.0]), sched), x0)
    t = 300
    a = sched.alpha_bar[t]
    out = perturb(np.array([1.0, 0.0]), t, np.array([0.0, 2.0]), sched)
    np.testing.assert_allclose(out, [np.sqrt(a), np.sqrt(1 - a) * 2.0], rtol=1e-15)
    with pytest.raises(DimensionError):
        perturb(np.zeros(2), 3, np.zeros(3), sched)


def test_unscaled_perturb(sched):
    x0, eps = np.array([1.0, 2.0]), np.array([0.5, -0.5])
    np.testing.assert_allclose(perturb(x0, 700, eps, sched, scaled=False),
                               x0 + sched.sigma[700] * eps)


@settings(max_examples=200, deadline=None)
@given(t=st.integers(1, 1000), seed=st.integers(0, 2 ** 31))
def test_round_trip(sched, t, seed):
    r = np.random.default_rng(seed)
    x0, eps = r.normal(size=4) * 3, r.normal(size=4)
    back = predict_x0(perturb(x0, t, eps, sched), t, eps, sched)
    # error scales with gamma(t) |eps| through the cancellation
    scale = np.abs(x0).max() + gamma(sched, t) * np.abs(eps).max()
    assert np.abs(back - x0).max() <= 1e-12 * scale


def test_snr_strictly_decreasing(sched):
    snr = [sched.snr(t) for t in range(1, 1001)]
    assert np.all(np.diff(snr) < 0)


def test_continuous_extension(sched):
    for t in (1, 17, 500, 1000):
        assert sched.alpha_bar_at(float(t)) == pytest.approx(sched.alpha_bar[t], rel=1e-13)
    mid = sched.alpha_bar_at(10.5)
    assert sched.alpha_bar[11] < mid < sched.alpha_bar[10]
    # the rate on (k-1, k] is the forward difference of log alpha_bar
    assert sched.beta_rate(10.5) == pytest.approx(-np.log(1 - sched.beta[11]), rel=1e-12)
    h = 1e-6
    fd = -(np.log(sched.alpha_bar_at(10.5 + h)) - np.log(sched.alpha_bar_at(10.5 - h))) / (2 * h)
    assert sched.beta_rate(10.5) == pytest.approx(fd, rel=1e-6)
