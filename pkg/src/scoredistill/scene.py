"""Particle scenes, orthonormal cameras and the optimiser step.

A render is ``R @ particle``; its Jacobian with respect to the particle is R,
so a render-space gradient g becomes ``R.T @ g`` on the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ortho_group

from .errors import ConfigurationError, DimensionError, DivergenceError


@dataclass
class SceneParams:
    particles: np.ndarray

    def __post_init__(self):
        p = np.array(self.particles, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1:
            raise DimensionError(f"particles must have shape (count, dim), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise DivergenceError("non-finite particle coordinates")
        self.particles = p

    @property
    def count(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    def copy(self) -> "SceneParams":
        return SceneParams(self.particles.copy())


@dataclass(frozen=True)
class Camera:
    id: int
    R: np.ndarray = field(repr=False)

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise DimensionError(f"camera matrix must be square, got {R.shape}")
        if not np.allclose(R.T @ R, np.eye(R.shape[0]), atol=1e-10, rtol=0):
            raise ConfigurationError(f"camera {self.id} is not orthonormal")
        object.__setattr__(self, "R", R)


def identity_camera(dim: int) -> Camera:
    return Camera(0, np.eye(dim))


def make_cameras(count: int, dim: int, seed: int) -> list[Camera]:
    """Seeded random orthonormal cameras; camera 0 is the identity."""
    rng = np.random.default_rng(seed)
    cams = [identity_camera(dim)]
    for i in range(1, count):
        R = ortho_group.rvs(dim, random_state=rng) if dim > 1 else np.array([[rng.choice([-1.0, 1.0])]])
        cams.append(Camera(i, R))
    return cams


def init_particles(count: int, dim: int, center, spread: float, rng: np.random.Generator) -> SceneParams:
    """Gaussian cloud of particles around ``center``; ``spread = 0`` stacks them on it."""
    center = np.broadcast_to(np.asarray(center, dtype=np.float64), (dim,))
    return SceneParams(center + spread * rng.standard_normal((count, dim)))


def render(theta: SceneParams, idx: int, cam: Camera) -> np.ndarray:
    if not (0 <= idx < theta.count):
        raise IndexError(f"particle {idx} out of range for {theta.count} particles")
    return cam.R @ theta.particles[idx]


def render_all(theta: SceneParams, rotations: np.ndarray) -> np.ndarray:
    """Render every particle with its own camera matrix, ``rotations[i]``."""
    return np.einsum("nij,nj->ni", rotations, theta.particles)


@dataclass
class OptimState:
    method: str = "adam"
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    steps: np.ndarray | None = None

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimiser {self.method!r}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")

    def _ensure(self, shape):
        if self.m is None:
            self.m = np.zeros(shape)
            self.v = np.zeros(shape)
            self.steps = np.zeros(shape[0], dtype=np.int64)

    def step(self, params: np.ndarray, idx, grad: np.ndarray) -> np.ndarray:
        """Updated rows ``params[idx]`` after one step with gradient ``grad``."""
        if self.method == "sgd":
            return params[idx] - self.learning_rate * grad
        self._ensure(params.shape)
        self.steps[idx] += 1
        self.m[idx] = self.beta1 * self.m[idx] + (1 - self.beta1) * grad
        self.v[idx] = self.beta2 * self.v[idx] + (1 - self.beta2) * grad ** 2
        n = self.steps[idx]
        if np.ndim(n):
            n = n[:, None]
        m_hat = self.m[idx] / (1 - self.beta1 ** n)
        v_hat = self.v[idx] / (1 - self.beta2 ** n)
        return params[idx] - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def param_gradient(cam: Camera, pixel_gradient) -> np.ndarray:
    return cam.R.T @ np.asarray(pixel_gradient, dtype=np.float64)


def apply_guidance(theta: SceneParams, idx: int, cam: Camera, g_est, opt: OptimState) -> SceneParams:
    """Chain the render-space gradient through the camera and take one step."""
    pix = np.asarray(g_est.pixel_gradient, dtype=np.float64)
    if pix.shape != (theta.dim,):
        raise DimensionError(f"pixel gradient shape {pix.shape} != ({theta.dim},)")
    if not (0 <= idx < theta.count):
        raise IndexError(f"particle {idx} out of range")
    grad = param_gradient(cam, pix)
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(f"non-finite gradient for particle {idx}: {grad}")
    out = theta.copy()
    out.particles[idx] = opt.step(theta.particles, idx, grad)
    return out


def apply_guidance_all(theta: SceneParams, rotations: np.ndarray, pixel_gradients: np.ndarray,
                       opt: OptimState) -> SceneParams:
    """Batched update: particle i rendered with rotations[i] gets pixel_gradients[i]."""
    grads = np.einsum("nji,nj->ni", rotations, pixel_gradients)
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.all(np.isfinite(grads), axis=1))
        raise DivergenceError(f"non-finite gradient for particles {bad.tolist()}")
    idx = np.arange(theta.count)
    return SceneParams(opt.step(theta.particles, idx, grads))
