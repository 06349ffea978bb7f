"""Dual timestep strategy: a geometry phase then an appearance phase.

Inside each phase the timestep falls from the phase's upper bound to its
lower bound as ``t_max - (t_max - t_min) * sqrt(id / interval)``.  Iterations
``0..T_cut`` are geometry (inclusive) and ``T_cut+1..n_total-1`` appearance;
each phase is re-based so that ``id`` runs over ``0..interval`` and both
endpoints are hit exactly.  ``T_cut = 0`` disables the geometry phase.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError

GEOMETRY = "geometry"
APPEARANCE = "appearance"


@dataclass(frozen=True)
class PhasePlan:
    n_total: int = 2000
    T_cut: int = 400
    t_cut: int = 350
    t_geo_max: int = 980
    t_app_min: int = 20
    K: int = 1000
    noise_policy: str = "fixed"       # "fixed" or "fresh"
    noise_seed: int = 0
    sampling: str = "decreasing"      # "decreasing" or "random" within the phase band

    def __post_init__(self):
        if self.n_total < 0:
            raise ConfigurationError("n_total must be >= 0")
        if not (0 <= self.T_cut and (self.T_cut < self.n_total or self.n_total == 0)):
            raise ConfigurationError(f"need 0 <= T_cut < n_total, got {self.T_cut}, {self.n_total}")
        if not (1 <= self.t_app_min <= self.t_cut <= self.t_geo_max <= self.K):
            raise ConfigurationError(
                f"need 1 <= t_app_min <= t_cut <= t_geo_max <= K, got "
                f"{self.t_app_min}, {self.t_cut}, {self.t_geo_max}, {self.K}")
        if self.noise_policy not in ("fixed", "fresh"):
            raise ConfigurationError(f"unknown noise policy {self.noise_policy!r}")
        if self.sampling not in ("decreasing", "random"):
            raise ConfigurationError(f"unknown timestep sampling {self.sampling!r}")

    @property
    def has_geometry(self) -> bool:
        return self.T_cut > 0

    def phase_bounds(self, phase: str):
        """(first iteration, last iteration, t_max, t_min) of a phase."""
        if phase == GEOMETRY:
            return 0, self.T_cut, self.t_geo_max, self.t_cut
        first = self.T_cut + 1 if self.has_geometry else 0
        return first, self.n_total - 1, self.t_cut, self.t_app_min


PRESETS = {
    "long": PhasePlan(n_total=5000, T_cut=1000),
    "desk": PhasePlan(n_total=2000, T_cut=400),
}


def preset(name: str, **overrides) -> PhasePlan:
    try:
        return replace(PRESETS[name], **overrides)
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _check_iter(plan: PhasePlan, it: int):
    if not (0 <= it < plan.n_total):
        raise ConfigurationError(f"iteration {it} outside [0, {plan.n_total})")


def phase_of(plan: PhasePlan, it: int) -> str:
    _check_iter(plan, it)
    return GEOMETRY if plan.has_geometry and it <= plan.T_cut else APPEARANCE


def decreasing_timestep(t_max: float, t_min: float, idx: int, interval: int) -> float:
    frac = 0.0 if interval <= 0 else idx / interval
    return t_max - (t_max - t_min) * np.sqrt(frac)


def timestep_at(plan: PhasePlan, it: int, rng: np.random.Generator | None = None) -> int:
    """Timestep s for iteration ``it`` (``rng`` is used only with random sampling)."""
    phase = phase_of(plan, it)
    first, last, t_max, t_min = plan.phase_bounds(phase)
    if plan.sampling == "random":
        if rng is None:
            raise ConfigurationError("random timestep sampling needs an rng")
        return int(rng.integers(t_min, t_max + 1))
    s = decreasing_timestep(t_max, t_min, it - first, last - first)
    return int(min(max(int(np.floor(s + 0.5)), 1), plan.K))


def paired_timestep(plan: PhasePlan, s: int) -> int:
    if s < 1:
        raise ConfigurationError(f"s must be >= 1, got {s}")
    return min(2 * s, plan.K)


def noise_for(plan: PhasePlan, it: int, shape, rng: np.random.Generator) -> np.ndarray:
    """Noise for one iteration: the seed-derived vector (fixed) or a fresh draw."""
    shape = (shape,) if np.ndim(shape) == 0 else tuple(shape)
    if any(n < 1 for n in shape):
        raise ConfigurationError(f"invalid noise shape {shape}")
    if plan.noise_policy == "fixed":
        return np.random.default_rng(plan.noise_seed).standard_normal(shape)
    return rng.standard_normal(shape)
