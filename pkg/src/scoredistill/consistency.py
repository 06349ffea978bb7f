"""Consistency functions: map a noisy point to the origin of its PF-ODE trajectory.

``fidelity="oracle"`` integrates the flow adaptively and is exact up to the
integrator tolerance.  An integer fidelity ``k`` takes k uniform DDIM steps to
t = 0 with the ideal noise prediction.  ``k = 1`` is the one-step posterior-mean
estimate, the stand-in for an under-trained single-step model.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ConfigurationError
from .schedule import NoiseSchedule
from .solvers import OdeMethod, Trajectory, integrate_pf_ode
from .target import UNCONDITIONAL, MixtureTarget, Prompt


@dataclass(frozen=True)
class ConsistencyFn:
    fidelity: object = "oracle"   # "oracle" or a positive int step count
    prompt: Prompt = UNCONDITIONAL
    tol: float = 1e-8

    def __post_init__(self):
        if self.fidelity == "oracle":
            return
        if isinstance(self.fidelity, bool) or not isinstance(self.fidelity, (int, np.integer)) \
                or self.fidelity < 1:
            raise ConfigurationError(f"fidelity must be 'oracle' or an int >= 1, got {self.fidelity!r}")

    @property
    def method(self) -> OdeMethod:
        if self.fidelity == "oracle":
            return OdeMethod("adaptive", tol=self.tol)
        return OdeMethod("euler", substeps=int(self.fidelity))

    @property
    def forwards(self) -> int:
        """Model evaluations charged per call (the oracle counts as one)."""
        return 1 if self.fidelity == "oracle" else int(self.fidelity)


def consistency_eval(cf: ConsistencyFn, target: MixtureTarget, x_t, t: int,
                     sched: NoiseSchedule) -> np.ndarray:
    t = sched.check_timestep(t, minimum=1)
    return integrate_pf_ode(target, x_t, t, 0, cf.method, cf.prompt, sched)


def eps_from_origin(x_t, t: int, x0_hat, sched: NoiseSchedule) -> np.ndarray:
    """Noise implied by an origin estimate: (x_t - sqrt(alpha_bar) x0_hat) / sigma."""
    t = sched.check_timestep(t)
    if t == 0:
        raise ConfigurationError("noise is undefined at t = 0")
    return (np.asarray(x_t) - np.sqrt(sched.alpha_bar[t]) * np.asarray(x0_hat)) / sched.sigma[t]


def self_consistency_deviation(cf: ConsistencyFn, target: MixtureTarget, traj: Trajectory,
                               sched: NoiseSchedule) -> float:
    """Largest distance between origin predictions made along one trajectory."""
    if len(traj) < 2:
        raise ConfigurationError("need at least two trajectory points")
    outs = [consistency_eval(cf, target, x, t, sched) for t, x in zip(traj.timesteps, traj.points)]
    return max(float(np.linalg.norm(a - b)) for a, b in combinations(outs, 2))
