"""Score-distillation gradient estimators.

Every estimator returns a :class:`GuidanceEstimate`.  Its render-space gradient
is ``omega(t) * (eps_hat - eps_ref)``, where ``eps_ref`` is the noise the
prediction is compared against:

* sds_ddpm, sds_lcm, sds_lcm_gc: the injected noise ``eps``
* ism: the unconditional prediction at the previous inversion step
* vsd: the prediction of a Gaussian fitted to the particle renders

``x0_ref`` is the clean point consistent with ``x_t`` and ``eps_ref``, so the
x-prediction form ``omega/gamma * (x0_ref - x0_hat)`` equals the gradient exactly.
For the plain SDS forms ``x0_ref`` is the render itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .consistency import ConsistencyFn, consistency_eval, eps_from_origin
from .errors import ConfigurationError, DimensionError
from .schedule import NoiseSchedule, gamma, perturb, predict_x0, weighting
from .solvers import invert_chain
from .target import UNCONDITIONAL, MixtureTarget, Prompt, eps_star, guided_eps

ESTIMATORS = ("sds_ddpm", "sds_lcm", "sds_lcm_gc", "ism", "vsd")


@dataclass
class GuidanceEstimate:
    eps_hat: np.ndarray
    x0_hat: np.ndarray
    t_used: int
    pixel_gradient: np.ndarray
    estimator: str
    eps_ref: np.ndarray
    x_t: np.ndarray
    weight: float = 1.0
    forwards: int = 1

    def x0_ref(self, sched: NoiseSchedule) -> np.ndarray:
        return predict_x0(self.x_t, self.t_used, self.eps_ref, sched)

    def x_form_gradient(self, sched: NoiseSchedule) -> np.ndarray:
        """The same gradient written through x0 predictions."""
        return self.weight / gamma(sched, self.t_used) * (self.x0_ref(sched) - self.x0_hat)


def _estimate(name, x_t, t, eps_hat, eps_ref, sched, omega, forwards=1):
    w = weighting(sched, t, omega)
    return GuidanceEstimate(
        eps_hat=eps_hat,
        x0_hat=predict_x0(x_t, t, eps_hat, sched),
        t_used=t,
        pixel_gradient=w * (eps_hat - eps_ref),
        estimator=name,
        eps_ref=eps_ref,
        x_t=x_t,
        weight=w,
        forwards=forwards,
    )


def sds_ddpm(target: MixtureTarget, x0, t: int, eps, prompt: Prompt, sched: NoiseSchedule,
             omega: str = "unit") -> GuidanceEstimate:
    """Plain SDS: one-step noise prediction at a single timestep."""
    t = sched.check_timestep(t, minimum=1)
    eps = np.asarray(eps, dtype=np.float64)
    x_t = perturb(x0, t, eps, sched)
    return _estimate("sds_ddpm", x_t, t, guided_eps(target, x_t, t, prompt, sched), eps, sched, omega)


def sds_lcm(target: MixtureTarget, x0, s: int, eps, prompt: Prompt, cf: ConsistencyFn,
            sched: NoiseSchedule, omega: str = "unit") -> GuidanceEstimate:
    """SDS with the noise prediction implied by a consistency-function origin."""
    s = sched.check_timestep(s, minimum=1)
    eps = np.asarray(eps, dtype=np.float64)
    x_s = perturb(x0, s, eps, sched)
    x0_hat = consistency_eval(cf, target, x_s, s, sched)
    eps_hat = eps_from_origin(x_s, s, x0_hat, sched)
    est = _estimate("sds_lcm", x_s, s, eps_hat, eps, sched, omega, cf.forwards)
    est.x0_hat = x0_hat
    return est


def calibrate(target: MixtureTarget, x_s, s: int, t: int, prompt: Prompt, cf: ConsistencyFn,
              sched: NoiseSchedule, jump: str = "ddim"):
    """Two-stage guidance calibration.

    Predict at (x_s, s), jump deterministically to t > s holding that prediction
    fixed, then predict again at (x_t, t).  ``jump="printed"`` uses the
    alternative coefficient form kept for comparison.
    Returns ``(x_t, eps_hat_t, x0_hat_t)``.
    """
    if t <= s:
        raise ConfigurationError(f"calibration needs t > s, got s={s}, t={t}")
    s = sched.check_timestep(s, minimum=1)
    t = sched.check_timestep(t)
    x0_hat_s = consistency_eval(cf, target, x_s, s, sched)
    eps_hat_s = eps_from_origin(x_s, s, x0_hat_s, sched)
    ra_s, ra_t = np.sqrt(sched.alpha_bar[s]), np.sqrt(sched.alpha_bar[t])
    if jump == "ddim":
        x_t = ra_t * x0_hat_s + sched.sigma[t] * eps_hat_s
    elif jump == "printed":
        x_t = ra_t * (x_s + ra_s * eps_hat_s) / ra_s + sched.sigma[t] * eps_hat_s
    else:
        raise ConfigurationError(f"unknown calibration jump {jump!r}")
    x0_hat_t = consistency_eval(cf, target, x_t, t, sched)
    return x_t, eps_from_origin(x_t, t, x0_hat_t, sched), x0_hat_t


def sds_lcm_gc(target: MixtureTarget, x0, s: int, t: int, eps, prompt: Prompt, cf: ConsistencyFn,
               sched: NoiseSchedule, omega: str = "unit", jump: str = "ddim") -> GuidanceEstimate:
    """SDS with calibrated guidance; weighted and compared at the larger timestep t."""
    eps = np.asarray(eps, dtype=np.float64)
    x_s = perturb(x0, s, eps, sched)
    x_t, eps_hat_t, x0_hat_t = calibrate(target, x_s, s, t, prompt, cf, sched, jump)
    est = _estimate("sds_lcm_gc", x_t, t, eps_hat_t, eps, sched, omega, 2 * cf.forwards)
    est.x0_hat = x0_hat_t
    return est


def ism(target: MixtureTarget, x0, t: int, delta_T: int, prompt: Prompt, sched: NoiseSchedule,
        omega: str = "unit") -> GuidanceEstimate:
    """Interval score matching on a DDIM-inverted trajectory (residual term dropped)."""
    if delta_T < 1 or t % delta_T or t < 2 * delta_T:
        raise ConfigurationError(f"t={t} must be a multiple of delta_T={delta_T} and >= 2*delta_T")
    t = sched.check_timestep(t)

    def uncond(x, k):
        return eps_star(target, x, k, UNCONDITIONAL, sched)

    chain = invert_chain(x0, t, delta_T, uncond, sched)
    x_t = chain.points[-1]
    # the last inversion step used eps(x_s, uncond, s) with s = t - delta_T
    eps_prev = chain.eps[-1]
    eps_hat = guided_eps(target, x_t, t, prompt, sched)
    return _estimate("ism", x_t, t, eps_hat, eps_prev, sched, omega, chain.forwards + 1)


def fit_render_gaussian(renders):
    """Mean and isotropic variance (maximum likelihood) of a set of renders."""
    r = np.asarray(renders, dtype=np.float64)
    mean = r.mean(axis=-2)
    var = np.mean((r - mean[..., None, :]) ** 2, axis=(-2, -1))
    return mean, var


def vsd(target: MixtureTarget, x0, t: int, eps, prompt: Prompt, particle_renders,
        sched: NoiseSchedule, omega: str = "unit") -> GuidanceEstimate:
    """Variational score distillation with an analytic stand-in for the render model.

    With at most one render the render-model prediction is the injected noise.
    """
    t = sched.check_timestep(t, minimum=1)
    eps = np.asarray(eps, dtype=np.float64)
    x_t = perturb(x0, t, eps, sched)
    renders = np.asarray(particle_renders, dtype=np.float64)
    if renders.shape[-1] != x_t.shape[-1]:
        raise DimensionError("render dimension mismatch")
    if renders.ndim < 2 or renders.shape[-2] <= 1:
        eps_lora = eps
    else:
        mean, var = fit_render_gaussian(renders)
        a, sig = sched.alpha_bar[t], sched.sigma[t]
        eps_lora = sig * (x_t - np.sqrt(a) * mean) / (a * var + sig ** 2)[..., None]
    return _estimate("vsd", x_t, t, guided_eps(target, x_t, t, prompt, sched), eps_lora, sched, omega)
