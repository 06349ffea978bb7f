"""Discrete variance-preserving noise schedules.

Timesteps are integer indices ``t in [0, K]`` with ``alpha_bar[0] == 1``.
Forward process::

    x_t = sqrt(alpha_bar_t) * x_0 + sigma_t * eps,   sigma_t = sqrt(1 - alpha_bar_t)

For ODE integration the schedule is extended to real ``t`` by interpolating
``log(alpha_bar)`` linearly between grid points, so ``d log(alpha_bar)/dt`` is
the forward difference of the grid on each unit interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError

WEIGHTINGS = ("unit", "sigma2", "alpha_bar")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    K: int
    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    @property
    def log_alpha_bar(self) -> np.ndarray:
        return np.log(self.alpha_bar)

    def check_timestep(self, t: int, minimum: int = 0) -> int:
        if int(t) != t or not (minimum <= t <= self.K):
            raise ConfigurationError(f"timestep {t!r} outside [{minimum}, {self.K}]")
        return int(t)

    def alpha_bar_at(self, t: float) -> float:
        """alpha_bar at a real-valued timestep (log-linear between grid points)."""
        if not (0.0 <= t <= self.K):
            raise ConfigurationError(f"timestep {t!r} outside [0, {self.K}]")
        return float(np.exp(np.interp(t, np.arange(self.K + 1), self.log_alpha_bar)))

    def beta_rate(self, t: float) -> float:
        """-d log(alpha_bar)/dt on the unit interval (ceil(t) - 1, ceil(t)]."""
        if not (0.0 < t <= self.K):
            raise ConfigurationError(f"rate undefined at t={t!r}")
        k = int(np.ceil(t))
        return float(self.log_alpha_bar[k - 1] - self.log_alpha_bar[k])

    def sigma_dot(self, t: float) -> float:
        """Forward difference of sigma on the unit interval containing t."""
        if not (0.0 < t <= self.K):
            raise ConfigurationError(f"sigma derivative undefined at t={t!r}")
        k = int(np.ceil(t))
        return float(self.sigma[k] - self.sigma[k - 1])

    def snr(self, t: int) -> float:
        a = self.alpha_bar[t]
        return float(a / (1.0 - a)) if a < 1.0 else float("inf")

    def nearest_timestep(self, alpha_bar: float) -> int:
        return int(np.argmin(np.abs(self.alpha_bar - alpha_bar)))


def build_schedule(kind: str = "linear", K: int = 1000, beta_min: float = 1e-4,
                   beta_max: float = 0.02) -> NoiseSchedule:
    """Build a K-step schedule.

    ``linear`` spaces beta evenly over [beta_min, beta_max]; ``cosine`` uses the
    squared-cosine alpha_bar curve with per-step betas clipped to the same range.
    """
    if K < 2:
        raise ConfigurationError(f"K must be >= 2, got {K}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigurationError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, K, dtype=np.float64)
    elif kind == "cosine":
        offset = 0.008
        steps = np.arange(K + 1, dtype=np.float64) / K
        f = np.cos((steps + offset) / (1 + offset) * np.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], beta_min, beta_max)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}")

    beta = np.concatenate([[0.0], betas])
    alpha_bar = np.cumprod(1.0 - beta)
    sigma = np.sqrt(1.0 - alpha_bar)
    for arr in (beta, alpha_bar, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(kind=kind, K=K, beta=beta, alpha_bar=alpha_bar, sigma=sigma)


def gamma(sched: NoiseSchedule, t: int) -> float:
    """Noise-to-signal ratio sigma_t / sqrt(alpha_bar_t); zero at t = 0."""
    t = sched.check_timestep(t)
    return float(sched.sigma[t] / np.sqrt(sched.alpha_bar[t]))


def weighting(sched: NoiseSchedule, t: int, kind: str = "unit") -> float:
    t = sched.check_timestep(t)
    if kind == "unit":
        return 1.0
    if kind == "sigma2":
        return float(sched.sigma[t] ** 2)
    if kind == "alpha_bar":
        return float(sched.alpha_bar[t])
    raise ConfigurationError(f"unknown weighting {kind!r}; expected one of {WEIGHTINGS}")


def perturb(x0, t: int, eps, sched: NoiseSchedule, scaled: bool = True) -> np.ndarray:
    """Forward-noise ``x0`` to timestep ``t``.

    ``scaled=False`` gives ``x0 + sigma_t * eps`` (no signal attenuation).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape[-1:] != eps.shape[-1:]:
        raise DimensionError(f"x0 has shape {x0.shape}, eps has shape {eps.shape}")
    t = sched.check_timestep(t)
    if not scaled:
        return x0 + sched.sigma[t] * eps
    return np.sqrt(sched.alpha_bar[t]) * x0 + sched.sigma[t] * eps


def predict_x0(x_t, t: int, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    """x0 estimate ``(x_t - sigma_t * eps_hat) / sqrt(alpha_bar_t)``."""
    t = sched.check_timestep(t)
    return (np.asarray(x_t) - sched.sigma[t] * np.asarray(eps_hat)) / np.sqrt(sched.alpha_bar[t])
