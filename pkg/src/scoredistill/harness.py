"""End-to-end optimisation runs and the metrics computed from them."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import ExperimentConfig
from .consistency import ConsistencyFn
from .errors import ConfigurationError, DivergenceError
from .guidance import ism, sds_ddpm, sds_lcm, sds_lcm_gc, vsd
from .scene import OptimState, SceneParams, apply_guidance_all, init_particles, make_cameras, render_all
from .schedule import build_schedule
from .scheduler import GEOMETRY, noise_for, paired_timestep, phase_of, timestep_at
from .target import MixtureTarget, Prompt, pushforward

log = logging.getLogger(__name__)

SCALAR_COLUMNS = ("iter", "particle", "phase", "s", "t", "estimator", "camera",
                  "grad_norm", "x0_gap", "mode_dist")
VECTOR_COLUMNS = ("x0_hat", "theta")


@dataclass
class RunRecord:
    """Per-(iteration, particle) rows plus final metrics.

    ``x0_hat`` is stored in parameter space (the render-space estimate mapped
    back through the camera); ``theta`` is the particle after the update.
    """

    config: dict
    config_hash: str
    dim: int
    columns: dict
    metrics: dict = field(default_factory=dict)
    failed: bool = False
    failure: str | None = None
    wall_time: float = field(default=0.0, compare=False)

    @property
    def n_rows(self) -> int:
        return len(self.columns["iter"])

    @property
    def n_particles(self) -> int:
        return int(self.config["scene"]["particles"])

    @property
    def n_iters(self) -> int:
        return self.n_rows // self.n_particles if self.n_particles else 0

    def per_iteration(self, name: str) -> np.ndarray:
        """Column reshaped to (iterations, particles, ...)."""
        col = np.asarray(self.columns[name])
        return col.reshape((self.n_iters, self.n_particles) + col.shape[1:])

    def __eq__(self, other):
        if not isinstance(other, RunRecord):
            return NotImplemented
        if (self.config, self.config_hash, self.dim, self.failed, self.failure) != \
                (other.config, other.config_hash, other.dim, other.failed, other.failure):
            return False
        if set(self.columns) != set(other.columns):
            return False
        for k in self.columns:
            a, b = np.asarray(self.columns[k]), np.asarray(other.columns[k])
            if a.shape != b.shape or not np.array_equal(a, b):
                return False
        return _metrics_equal(self.metrics, other.metrics)


def _metrics_equal(a: dict, b: dict) -> bool:
    if set(a) != set(b):
        return False
    for k in a:
        x, y = a[k], b[k]
        if isinstance(x, float) and isinstance(y, float) and np.isnan(x) and np.isnan(y):
            continue
        if x != y:
            return False
    return True


def empty_columns(dim: int) -> dict:
    cols = {k: np.zeros(0) for k in SCALAR_COLUMNS}
    cols["phase"] = np.zeros(0, dtype="<U10")
    cols["estimator"] = np.zeros(0, dtype="<U10")
    for k in ("iter", "particle", "s", "t", "camera"):
        cols[k] = np.zeros(0, dtype=np.int64)
    for k in VECTOR_COLUMNS:
        cols[k] = np.zeros((0, dim))
    return cols


# -- metrics --------------------------------------------------------------------

def mode_distance(theta: SceneParams, target: MixtureTarget, prompt: Prompt) -> float:
    """Mean over particles of the distance to the nearest selected mean."""
    return float(np.mean(particle_mode_distances(theta.particles, target, prompt)))


def particle_mode_distances(points, target: MixtureTarget, prompt: Prompt) -> np.ndarray:
    if prompt.unconditional:
        raise ConfigurationError("mode distance needs a conditional prompt")
    means = target.means[list(prompt.selected)]
    d = np.linalg.norm(np.asarray(points)[:, None, :] - means[None], axis=-1)
    return d.min(axis=1)


def _trace(record_or_trace) -> np.ndarray:
    """x0 estimates as (iterations, particles, dim)."""
    if isinstance(record_or_trace, RunRecord):
        return record_or_trace.per_iteration("x0_hat")
    tr = np.asarray(record_or_trace, dtype=np.float64)
    if tr.ndim == 2:
        tr = tr[:, None, :]
    return tr


def windowed_variance(record_or_trace, window: int) -> np.ndarray:
    """Trace of the sample covariance in each sliding window, averaged over particles."""
    if window < 2:
        raise ConfigurationError("window must be >= 2")
    tr = _trace(record_or_trace)
    if tr.shape[0] < window:
        raise ConfigurationError(f"record has {tr.shape[0]} iterations, shorter than window {window}")
    win = sliding_window_view(tr, window, axis=0)      # (n_win, particles, dim, window)
    return win.var(axis=-1, ddof=1).sum(axis=-1).mean(axis=-1)


def guidance_variance(record_or_trace, window: int) -> float:
    return float(windowed_variance(record_or_trace, window).mean())


def consistency_gap(record: RunRecord, tail: float = 0.1) -> float:
    """Mean distance between the x0 estimate and the render over the final iterations."""
    gaps = record.per_iteration("x0_gap")
    if gaps.shape[0] == 0:
        return float("nan")
    start = int(np.floor(gaps.shape[0] * (1.0 - tail)))
    return float(gaps[start:].mean())


def consistency_gap_curve(record: RunRecord, start: float = 0.5, blocks: int = 5) -> np.ndarray:
    """Block means of the x0/render gap over the iterations after ``start``."""
    gaps = record.per_iteration("x0_gap").mean(axis=1)
    tail = gaps[int(np.floor(len(gaps) * start)):]
    return np.array([b.mean() for b in np.array_split(tail, blocks)])


# -- the run loop -----------------------------------------------------------------

def _build(cfg: ExperimentConfig):
    sched = build_schedule(cfg.schedule.kind, cfg.schedule.K, cfg.schedule.beta_min,
                           cfg.schedule.beta_max)
    comps = [(c["weight"], c["mean"], c["scale"]) for c in cfg.target.components]
    target = MixtureTarget.from_components(comps)
    prompt = Prompt(cfg.prompt_indices(), cfg.cfg_scale)
    target.restrict(prompt)
    return sched, target, prompt


def _ism_timestep(t: int, delta: int, K: int) -> int:
    t = int(round(t / delta)) * delta
    return min(max(t, 2 * delta), K - K % delta)


def run(cfg: ExperimentConfig, out_dir=None) -> RunRecord:
    """Optimise a particle scene with the configured estimator.

    Each iteration samples one camera per particle, renders, draws the
    phase timestep and noise, evaluates the estimator for all particles at once
    and applies one optimiser step.  With ``sds_lcm_gc`` the geometry phase
    uses uncalibrated guidance at s and the appearance phase calibrated
    guidance at t = 2s.  Every random stream derives from ``cfg.seed`` and is
    consumed identically for all estimators.

    A run that hits a non-finite state stops early and is returned with
    ``failed`` set; when ``out_dir`` is given the partial record is also written
    there as ``<config hash>.partial.json``.
    """
    started = time.perf_counter()
    sched, target, prompt = _build(cfg)
    plan = cfg.phase_plan()
    ss = np.random.SeedSequence(cfg.seed)
    cam_seed, init_ss, iter_ss, t_ss = ss.spawn(4)
    cams = make_cameras(cfg.cameras, target.dim, int(cam_seed.generate_state(1)[0]))
    rotations = np.stack([c.R for c in cams])
    theta = init_particles(cfg.scene.particles, target.dim, cfg.scene.center, cfg.scene.spread,
                           np.random.default_rng(init_ss))
    opt = OptimState(cfg.optimizer.method, cfg.optimizer.learning_rate,
                     cfg.optimizer.beta1, cfg.optimizer.beta2)
    rng = np.random.default_rng(iter_ss)
    rng_t = np.random.default_rng(t_ss)
    cf = ConsistencyFn(cfg.fidelity, prompt)
    P, d = theta.count, target.dim

    rows = {k: [] for k in SCALAR_COLUMNS + VECTOR_COLUMNS}
    record = RunRecord(cfg.to_dict(), cfg.config_hash(), d, empty_columns(d))
    record.metrics["initial_mode_distance"] = mode_distance(theta, target, prompt)

    try:
        for it in range(plan.n_total):
            phase = phase_of(plan, it)
            s = timestep_at(plan, it, rng_t)
            t = paired_timestep(plan, s)
            cam_idx = rng.integers(len(cams), size=P)
            eps = noise_for(plan, it, (P, d), rng)
            R = rotations[cam_idx]
            x0 = render_all(theta, R)
            view = pushforward(target, R)

            if cfg.estimator == "sds_ddpm":
                est = sds_ddpm(view, x0, s, eps, prompt, sched, cfg.omega)
            elif cfg.estimator == "sds_lcm" or (cfg.estimator == "sds_lcm_gc" and phase == GEOMETRY):
                est = sds_lcm(view, x0, s, eps, prompt, cf, sched, cfg.omega)
            elif cfg.estimator == "sds_lcm_gc":
                est = sds_lcm_gc(view, x0, s, t, eps, prompt, cf, sched, cfg.omega,
                                 cfg.calibration_jump)
            elif cfg.estimator == "ism":
                est = ism(view, x0, _ism_timestep(s, cfg.delta_T, sched.K), cfg.delta_T,
                          prompt, sched, cfg.omega)
            else:
                renders = np.einsum("nij,pj->npi", R, theta.particles)
                est = vsd(view, x0, s, eps, prompt, renders, sched, cfg.omega)

            x0_hat_theta = np.einsum("nji,nj->ni", R, est.x0_hat)
            gap = np.linalg.norm(est.x0_hat - x0, axis=1)
            theta = apply_guidance_all(theta, R, est.pixel_gradient, opt)

            rows["iter"].append(np.full(P, it))
            rows["particle"].append(np.arange(P))
            rows["phase"].append(np.full(P, phase))
            rows["s"].append(np.full(P, s))
            rows["t"].append(np.full(P, est.t_used))
            rows["estimator"].append(np.full(P, est.estimator))
            rows["camera"].append(cam_idx)
            rows["grad_norm"].append(np.linalg.norm(est.pixel_gradient, axis=1))
            rows["x0_gap"].append(gap)
            rows["mode_dist"].append(particle_mode_distances(theta.particles, target, prompt))
            rows["x0_hat"].append(x0_hat_theta)
            rows["theta"].append(theta.particles.copy())
    except DivergenceError as exc:
        log.error("run aborted: %s", exc)
        record.failed = True
        record.failure = str(exc)

    if rows["iter"]:
        record.columns = {k: np.concatenate(v) for k, v in rows.items()}
        record.columns["phase"] = record.columns["phase"].astype("<U10")
        record.columns["estimator"] = record.columns["estimator"].astype("<U10")
    record.metrics.update(final_metrics(record, theta, target, prompt, cfg.metrics_window))
    record.wall_time = time.perf_counter() - started
    if record.failed and out_dir is not None:
        from .records import emit
        path = emit(record, "json", Path(out_dir) / f"{record.config_hash}.partial.json")
        log.error("partial record written to %s", path)
    return record


def final_metrics(record: RunRecord, theta: SceneParams, target, prompt, window: int) -> dict:
    out = {"mode_distance": mode_distance(theta, target, prompt)}
    n = record.n_iters
    out["guidance_variance"] = guidance_variance(record, window) if n >= window else float("nan")
    out["consistency_gap"] = consistency_gap(record) if n else float("nan")
    return out
