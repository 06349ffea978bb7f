"""Probability-flow ODE, reverse SDE and DDIM machinery on the analytic targets.

The VP probability-flow ODE in timestep units is::

    dx/dt = -1/2 beta(t) (x + score_t(x)),     beta(t) = -d log(alpha_bar)/dt

Because the score depends on t only through alpha_bar, the same trajectories
are traced in the noise-to-signal variable ``g = sigma / sqrt(alpha_bar)``::

    dx/dg = -(g / (1 + g^2)) (x + score(x; alpha_bar = 1 / (1 + g^2)))

which is smooth in g.  The adaptive oracle integrates that form.  Fixed-step
methods work in DDIM coordinates ``y = x / sqrt(alpha_bar)``, where
``dy/dg = eps(x)``; a single Euler step there is exactly one DDIM jump.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConfigurationError, DimensionError, DivergenceError
from .schedule import NoiseSchedule, predict_x0
from .target import UNCONDITIONAL, MixtureTarget, Prompt

ODE_VARIANTS = ("euler", "heun", "rk4", "adaptive")
FLOWS = ("vp", "literal")


@dataclass(frozen=True)
class OdeMethod:
    variant: str = "adaptive"
    tol: float = 1e-8
    substeps: int = 1

    def __post_init__(self):
        if self.variant not in ODE_VARIANTS:
            raise ConfigurationError(f"unknown ODE method {self.variant!r}")
        if self.tol <= 0:
            raise ConfigurationError("tol must be positive")
        if self.substeps < 1:
            raise ConfigurationError("substeps must be >= 1")


ADAPTIVE = OdeMethod("adaptive")


@dataclass
class Trajectory:
    timesteps: list = field(default_factory=list)
    points: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.timesteps) != len(self.points):
            raise DimensionError("timesteps and points differ in length")
        d = np.diff(np.asarray(self.timesteps, dtype=float))
        if d.size and not (np.all(d > 0) or np.all(d < 0)):
            raise ConfigurationError("trajectory timesteps must be strictly monotone")
        shapes = {np.shape(p) for p in self.points}
        if len(shapes) > 1:
            raise DimensionError(f"inconsistent point shapes {shapes}")

    def __len__(self):
        return len(self.points)


def _noise_ratio(alpha_bar: float) -> float:
    return float(np.sqrt((1.0 - alpha_bar) / alpha_bar))


# -- fields -----------------------------------------------------------------

def pf_ode_field(target: MixtureTarget, x, t: float, prompt: Prompt, sched: NoiseSchedule,
                 flow: str = "vp") -> np.ndarray:
    """dx/dt of the probability-flow ODE at (x, t).

    ``flow="literal"`` drops the VP drift and returns ``-sigma_dot sigma score``.
    """
    if not (0 < t <= sched.K):
        raise ConfigurationError(f"PF-ODE field needs 0 < t <= K, got {t}")
    cond = target.restrict(prompt)
    a = sched.alpha_bar_at(t)
    x = np.asarray(x, dtype=np.float64)
    if flow == "vp":
        return -0.5 * sched.beta_rate(t) * (x + cond.score(x, a))
    if flow == "literal":
        sig = np.sqrt(1.0 - a)
        return -sched.sigma_dot(t) * sig * cond.score(x, a)
    raise ConfigurationError(f"unknown flow {flow!r}")


def _dx_dg(cond: MixtureTarget, x, g: float) -> np.ndarray:
    a = 1.0 / (1.0 + g * g)
    return -(g * a) * (x + cond.score(x, a))


# -- integration --------------------------------------------------------------

def _adaptive(cond: MixtureTarget, x, g0: float, g1: float, tol: float) -> np.ndarray:
    if g0 == g1:
        return x.copy()
    shape = x.shape

    def rhs(g, flat):
        return _dx_dg(cond, flat.reshape(shape), g).ravel()

    sol = solve_ivp(rhs, (g0, g1), x.ravel(), method="RK45", rtol=tol, atol=tol)
    if sol.status != 0 or not np.all(np.isfinite(sol.y[:, -1])):
        raise DivergenceError(f"adaptive PF-ODE integration failed: {sol.message}")
    return sol.y[:, -1].reshape(shape)


def _adaptive_literal(cond: MixtureTarget, x, t0: float, t1: float, sched, tol: float):
    shape = x.shape

    def rhs(t, flat):
        t = min(max(t, 1e-9), sched.K)
        a = sched.alpha_bar_at(t)
        return (-sched.sigma_dot(t) * np.sqrt(1 - a) * cond.score(flat.reshape(shape), a)).ravel()

    sol = solve_ivp(rhs, (t0, t1), x.ravel(), method="RK45", rtol=tol, atol=tol)
    if sol.status != 0:
        raise DivergenceError(f"literal PF-ODE integration failed: {sol.message}")
    return sol.y[:, -1].reshape(shape)


def _fixed_step(cond: MixtureTarget, x, t0: float, t1: float, method: OdeMethod,
                sched: NoiseSchedule) -> np.ndarray:
    ts = np.linspace(t0, t1, method.substeps + 1)
    alphas = [sched.alpha_bar_at(float(t)) for t in ts]
    y = x / np.sqrt(alphas[0])
    g = _noise_ratio(alphas[0])

    def f(y, g):
        a = 1.0 / (1.0 + g * g)
        return cond.eps(y * np.sqrt(a), a)

    for a_next in alphas[1:]:
        g_next = _noise_ratio(a_next)
        h = g_next - g
        if method.variant == "euler":
            y = y + h * f(y, g)
        elif method.variant == "heun":
            k1 = f(y, g)
            k2 = f(y + h * k1, g_next)
            y = y + 0.5 * h * (k1 + k2)
        else:
            k1 = f(y, g)
            k2 = f(y + 0.5 * h * k1, g + 0.5 * h)
            k3 = f(y + 0.5 * h * k2, g + 0.5 * h)
            k4 = f(y + h * k3, g_next)
            y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        g = g_next
    return y * np.sqrt(alphas[-1])


def integrate_pf_ode(target: MixtureTarget, x_t, t: float, t_end: float, method: OdeMethod,
                     prompt: Prompt, sched: NoiseSchedule, flow: str = "vp") -> np.ndarray:
    """Carry x_t along its probability-flow trajectory from t down to t_end."""
    if not (0 <= t_end < t <= sched.K):
        raise ConfigurationError(f"need 0 <= t_end < t <= K, got t={t}, t_end={t_end}")
    cond = target.restrict(prompt)
    x = np.asarray(x_t, dtype=np.float64)
    if flow == "literal":
        if method.variant != "adaptive":
            raise ConfigurationError("literal flow comparison supports only the adaptive method")
        return _adaptive_literal(cond, x, float(t), float(t_end), sched, method.tol)
    if flow != "vp":
        raise ConfigurationError(f"unknown flow {flow!r}")
    if method.variant == "adaptive":
        g0 = _noise_ratio(sched.alpha_bar_at(float(t)))
        g1 = _noise_ratio(sched.alpha_bar_at(float(t_end)))
        return _adaptive(cond, x, g0, g1, method.tol)
    return _fixed_step(cond, x, float(t), float(t_end), method, sched)


def oracle_trajectory(target: MixtureTarget, x_start, timesteps, prompt: Prompt,
                      sched: NoiseSchedule, tol: float = 1e-8) -> Trajectory:
    """Points of one PF-ODE trajectory at the given decreasing timesteps."""
    ts = [int(t) for t in timesteps]
    pts = [np.asarray(x_start, dtype=np.float64)]
    method = OdeMethod("adaptive", tol=tol)
    for t0, t1 in zip(ts[:-1], ts[1:]):
        pts.append(integrate_pf_ode(target, pts[-1], t0, t1, method, prompt, sched))
    return Trajectory(ts, pts)


# -- reverse SDE --------------------------------------------------------------

def reverse_sde_step(target: MixtureTarget, x, t: int, dt: int, rng: np.random.Generator,
                     prompt: Prompt, sched: NoiseSchedule, flow: str = "vp",
                     noise=None) -> np.ndarray:
    """One Euler-Maruyama step of the reverse-time SDE from t to t - dt.

    ``flow="vp"`` uses drift ``1/2 beta (x + 2 score)`` and diffusion ``sqrt(beta)``;
    ``flow="literal"`` uses drift ``sigma_dot sigma score`` and diffusion
    ``sqrt(sigma_dot sigma)``.  ``noise`` overrides the standard-normal draw.
    """
    if dt < 1 or t - dt < 0 or t > sched.K:
        raise ConfigurationError(f"invalid reverse step t={t}, dt={dt}")
    x = np.asarray(x, dtype=np.float64)
    cond = target.restrict(prompt)
    a = sched.alpha_bar[t]
    z = rng.standard_normal(x.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    score = cond.score(x, a)
    if flow == "vp":
        b = sched.beta_rate(t)
        return x + dt * 0.5 * b * (x + 2.0 * score) + np.sqrt(b * dt) * z
    if flow == "literal":
        c = sched.sigma_dot(t) * sched.sigma[t]
        return x + dt * c * score + np.sqrt(c * dt) * z
    raise ConfigurationError(f"unknown flow {flow!r}")


def sample_reverse_sde(target: MixtureTarget, n: int, rng: np.random.Generator,
                       prompt: Prompt = UNCONDITIONAL, sched: NoiseSchedule | None = None,
                       dt: int = 1) -> np.ndarray:
    """Ancestral samples: start from N(0, I) at t = K and step down to 0."""
    x = rng.standard_normal((n, target.dim))
    t = sched.K
    while t > 0:
        step = min(dt, t)
        x = reverse_sde_step(target, x, t, step, rng, prompt, sched)
        t -= step
    return x


# -- DDIM ------------------------------------------------------------------------

def ddim_step(x_t, t: int, s: int, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic jump t -> s < t holding the noise prediction fixed."""
    if s >= t:
        raise ConfigurationError(f"DDIM denoising needs s < t, got s={s}, t={t}")
    s = sched.check_timestep(s)
    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    return np.sqrt(sched.alpha_bar[s]) * x0_hat + sched.sigma[s] * np.asarray(eps_hat)


def ddim_invert_step(x_s, s: int, t: int, eps_uncond, sched: NoiseSchedule) -> np.ndarray:
    """Inversion jump s -> t >= s using the prediction made at the source."""
    if t < s:
        raise ConfigurationError(f"DDIM inversion needs t >= s, got s={s}, t={t}")
    t = sched.check_timestep(t)
    x0_hat = predict_x0(x_s, s, eps_uncond, sched)
    return np.sqrt(sched.alpha_bar[t]) * x0_hat + sched.sigma[t] * np.asarray(eps_uncond)


@dataclass
class InversionChain:
    timesteps: list
    points: list
    eps: list          # eps[i] drove the jump points[i] -> points[i + 1]
    forwards: int = 0


def invert_chain(x0, t_end: int, delta: int, eps_fn, sched: NoiseSchedule,
                 implicit_iters: int = 0, implicit_tol: float = 1e-12) -> InversionChain:
    """DDIM-invert ``x0`` through 0, delta, 2 delta, ..., t_end.

    ``eps_fn(x, t)`` is the noise model.  With ``implicit_iters == 0`` each jump
    uses the prediction at its source point.  Otherwise each jump is refined by
    fixed-point iteration so that its prediction is the one made at the
    destination, which makes fresh-prediction DDIM denoising its exact inverse.
    """
    if delta < 1 or t_end % delta:
        raise ConfigurationError(f"t_end={t_end} is not a multiple of delta={delta}")
    ts = list(range(0, t_end + 1, delta))
    pts = [np.asarray(x0, dtype=np.float64)]
    used = []
    forwards = 0
    for s, t in zip(ts[:-1], ts[1:]):
        e = eps_fn(pts[-1], s)
        forwards += 1
        x_next = ddim_invert_step(pts[-1], s, t, e, sched)
        for _ in range(implicit_iters):
            e = eps_fn(x_next, t)
            forwards += 1
            refined = ddim_invert_step(pts[-1], s, t, e, sched)
            done = np.max(np.abs(refined - x_next)) <= implicit_tol * (1 + np.max(np.abs(refined)))
            x_next = refined
            if done:
                break
        used.append(e)
        pts.append(x_next)
    return InversionChain(ts, pts, used, forwards)


def denoise_chain(x_t, timesteps, eps_fn, sched: NoiseSchedule) -> np.ndarray:
    """Chained DDIM denoising over decreasing ``timesteps`` with fresh predictions."""
    x = np.asarray(x_t, dtype=np.float64)
    ts = list(timesteps)
    for t, s in zip(ts[:-1], ts[1:]):
        x = ddim_step(x, t, s, eps_fn(x, t), sched)
    return x


def energy_distance(a, b, unbiased: bool = True, chunk: int = 2048) -> float:
    """sqrt(2E|A-B| - E|A-A'| - E|B-B'|) between two sample sets.

    ``unbiased=False`` averages the within-set terms over all n^2 pairs, which
    matches ``scipy.stats.energy_distance`` in one dimension.
    """
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)

    def total_dist(p, q):
        total = 0.0
        for i in range(0, len(p), chunk):
            block = p[i:i + chunk]
            sq = (np.sum(block ** 2, 1)[:, None] + np.sum(q ** 2, 1)[None, :]
                  - 2.0 * block @ q.T)
            total += np.sqrt(np.maximum(sq, 0.0)).sum()
        return total

    def within(p):
        n = len(p)
        return total_dist(p, p) / (n * (n - 1) if unbiased else n * n)

    d2 = 2.0 * total_dist(a, b) / (len(a) * len(b)) - within(a) - within(b)
    return float(np.sqrt(max(d2, 0.0)))
