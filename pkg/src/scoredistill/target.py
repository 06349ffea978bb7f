"""Isotropic Gaussian mixtures standing in for a pretrained diffusion model.

Component ``k`` is ``N(mu_k, scale_k^2 I)``.  Under the VP forward process it
becomes ``N(sqrt(a) mu_k, (a scale_k^2 + 1 - a) I)`` with ``a = alpha_bar_t``,
so scores and ideal noise predictions are available in closed form.

Means may carry leading batch axes, shape ``(..., m, dim)``.  That is how a
batch of camera pushforwards is represented: row ``i`` of a batch of points is
scored against row ``i`` of the means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, DimensionError
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class Prompt:
    """Conditioning: a subset of component indices, or () for unconditional."""

    selected: tuple[int, ...] = ()
    cfg_scale: float = 7.5

    def __post_init__(self):
        object.__setattr__(self, "selected", tuple(int(i) for i in self.selected))
        if self.cfg_scale < 0:
            raise ConfigurationError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if len(set(self.selected)) != len(self.selected):
            raise ConfigurationError(f"duplicate indices in prompt {self.selected}")

    @property
    def unconditional(self) -> bool:
        return not self.selected


UNCONDITIONAL = Prompt()


@dataclass(frozen=True)
class MixtureTarget:
    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray
    _log_weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        sc = np.asarray(self.scales, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ConfigurationError("weights must be a non-empty 1-d array")
        if mu.ndim < 2 or mu.shape[-2] != w.size:
            raise ConfigurationError(f"means shape {mu.shape} does not match {w.size} components")
        if sc.shape != w.shape:
            raise ConfigurationError(f"scales shape {sc.shape} does not match weights {w.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"weights must be positive and sum to 1, got {w}")
        if np.any(sc <= 0):
            raise ConfigurationError("component scales must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "scales", sc)
        object.__setattr__(self, "_log_weights", np.log(w))

    @classmethod
    def from_components(cls, components) -> "MixtureTarget":
        """Build from ``[(weight, mean, scale), ...]``; weights are normalised."""
        w = np.array([c[0] for c in components], dtype=np.float64)
        if np.any(w <= 0):
            raise ConfigurationError("component weights must be positive")
        return cls(w / w.sum(), np.array([c[1] for c in components], dtype=np.float64),
                   np.array([c[2] for c in components], dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def restrict(self, prompt: Prompt) -> "MixtureTarget":
        """Sub-mixture selected by the prompt, with renormalised weights."""
        if prompt.unconditional:
            return self
        idx = np.asarray(prompt.selected)
        if idx.min() < 0 or idx.max() >= self.n_components:
            raise ConfigurationError(f"prompt {prompt.selected} references missing components")
        w = self.weights[idx]
        return MixtureTarget(w / w.sum(), self.means[..., idx, :], self.scales[idx])

    def _component_terms(self, x, alpha_bar: float):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"point dimension {x.shape[-1]} != target dimension {self.dim}")
        var = alpha_bar * self.scales ** 2 + (1.0 - alpha_bar)
        diff = x[..., None, :] - np.sqrt(alpha_bar) * self.means
        logp = (self._log_weights - 0.5 * np.sum(diff ** 2, axis=-1) / var
                - 0.5 * self.dim * np.log(2.0 * np.pi * var))
        return diff, var, logp

    def log_prob(self, x, alpha_bar: float = 1.0) -> np.ndarray:
        """Log density of the mixture perturbed to noise level ``alpha_bar``."""
        _, _, logp = self._component_terms(x, alpha_bar)
        return logsumexp(logp, axis=-1)

    def score(self, x, alpha_bar: float = 1.0) -> np.ndarray:
        diff, var, logp = self._component_terms(x, alpha_bar)
        resp = np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))
        return -np.sum((resp / var)[..., None] * diff, axis=-2)

    def eps(self, x, alpha_bar: float) -> np.ndarray:
        """Ideal noise prediction ``-sigma * score`` at noise level ``alpha_bar``."""
        if alpha_bar >= 1.0:
            return np.zeros(np.shape(x))
        return -np.sqrt(1.0 - alpha_bar) * self.score(x, alpha_bar)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.means.ndim != 2:
            raise ConfigurationError("sampling needs an unbatched target")
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        return self.means[comp] + self.scales[comp, None] * rng.standard_normal((n, self.dim))


def bimodal_benchmark(scale: float = 0.5, separation: float = 3.0) -> MixtureTarget:
    """Two equal-weight 2-d components at (+-separation, 0)."""
    return MixtureTarget(np.array([0.5, 0.5]),
                         np.array([[-separation, 0.0], [separation, 0.0]]),
                         np.array([scale, scale]))


def standard_normal(dim: int = 2) -> MixtureTarget:
    return MixtureTarget(np.array([1.0]), np.zeros((1, dim)), np.array([1.0]))


def perturbed_score(target: MixtureTarget, x, t: int, prompt: Prompt,
                    sched: NoiseSchedule) -> np.ndarray:
    """Exact grad log p_t(x | prompt)."""
    t = sched.check_timestep(t)
    return target.restrict(prompt).score(x, sched.alpha_bar[t])


def eps_star(target: MixtureTarget, x_t, t: int, prompt: Prompt,
             sched: NoiseSchedule) -> np.ndarray:
    """Ideal epsilon prediction for the prompt-restricted mixture."""
    t = sched.check_timestep(t)
    return target.restrict(prompt).eps(x_t, sched.alpha_bar[t])


def cfg_eps(target: MixtureTarget, x_t, t: int, prompt: Prompt,
            sched: NoiseSchedule) -> np.ndarray:
    """Classifier-free guidance mix of conditional and unconditional predictions."""
    if prompt.unconditional:
        raise ConfigurationError("classifier-free guidance needs a conditional prompt")
    cond = eps_star(target, x_t, t, prompt, sched)
    uncond = eps_star(target, x_t, t, UNCONDITIONAL, sched)
    return uncond + prompt.cfg_scale * (cond - uncond)


def guided_eps(target: MixtureTarget, x_t, t: int, prompt: Prompt,
               sched: NoiseSchedule) -> np.ndarray:
    """The model output used by the SDS-family losses: CFG when conditional."""
    if prompt.unconditional or prompt.cfg_scale == 1.0:
        return eps_star(target, x_t, t, prompt, sched)
    return cfg_eps(target, x_t, t, prompt, sched)


def pushforward(target: MixtureTarget, R) -> MixtureTarget:
    """Image of the mixture under an orthonormal map (or a batch of them)."""
    R = np.asarray(R, dtype=np.float64)
    d = target.dim
    if R.shape[-2:] != (d, d):
        raise DimensionError(f"map shape {R.shape} incompatible with dimension {d}")
    gram = np.einsum("...ki,...kj->...ij", R, R)
    if not np.allclose(gram, np.eye(d), atol=1e-10, rtol=0):
        raise ConfigurationError("pushforward map must be orthonormal")
    # a batch of maps (n, d, d) against means (m, d) gives means (n, m, d)
    means = np.einsum("...ij,...mj->...mi", R, target.means)
    return MixtureTarget(target.weights, means, target.scales)
