"""Acceptance checks: one function per criterion, each returning a ``Verdict``.

Every check builds its inputs from a fixed seed, measures the quantity at the
stated tolerance and never adjusts the threshold.  ``run_all`` is what the CLI
``verify`` command and the acceptance test module call.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.stats import ortho_group

from .config import default_config
from .consistency import ConsistencyFn, consistency_eval
from .guidance import calibrate, ism, sds_ddpm, sds_lcm, sds_lcm_gc, vsd
from .harness import consistency_gap_curve, guidance_variance, run
from .schedule import build_schedule, gamma, perturb
from .scene import Camera, param_gradient
from .scheduler import PRESETS, decreasing_timestep, timestep_at
from .solvers import denoise_chain, energy_distance, invert_chain, oracle_trajectory, sample_reverse_sde
from .target import UNCONDITIONAL, Prompt, bimodal_benchmark, eps_star, standard_normal

SEED = 20240601


@dataclass
class Verdict:
    number: int
    name: str
    passed: bool
    summary: str
    seconds: float = 0.0
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.number:2d} {self.name}: {self.summary} ({self.seconds:.1f}s)"


def _rng(offset: int = 0) -> np.random.Generator:
    return np.random.default_rng(SEED + offset)


def _sched():
    return build_schedule("linear", 1000, 1e-4, 0.02)


def identity_consistency() -> Verdict:
    sched, target, rng = _sched(), standard_normal(2), _rng(1)
    cf = ConsistencyFn("oracle")
    worst = 0.0
    for _ in range(100):
        x, t = rng.normal(size=2) * 2.0, int(rng.integers(1, sched.K + 1))
        worst = max(worst, float(np.linalg.norm(consistency_eval(cf, target, x, t, sched) - x)))
    return Verdict(1, "identity consistency function", worst <= 1e-6,
                   f"max |f(x,t) - x| = {worst:.2e} (<= 1e-6)", values={"max_error": worst})


def _row_deviations(outs) -> np.ndarray:
    return np.max([np.linalg.norm(a - b, axis=-1) for a, b in combinations(outs, 2)], axis=0)


def self_consistency() -> Verdict:
    sched, target, rng = _sched(), bimodal_benchmark(), _rng(2)
    times = np.linspace(1000, 10, 10).round().astype(int).tolist()
    # 100 trajectories integrated as one batch; per-row deviations afterwards
    traj = oracle_trajectory(target, rng.normal(size=(100, 2)), times, UNCONDITIONAL, sched)
    dev = {}
    for fid in ("oracle", 1):
        cf = ConsistencyFn(fid)
        outs = [consistency_eval(cf, target, x, t, sched) for t, x in zip(traj.timesteps, traj.points)]
        dev[fid] = _row_deviations(outs)
    worst = float(dev["oracle"].max())
    frac = float(np.mean(dev[1] > dev["oracle"]))
    ok = worst <= 1e-4 and frac >= 0.95
    return Verdict(2, "self-consistency", ok,
                   f"oracle max deviation {worst:.2e} (<= 1e-4); k=1 larger in {frac:.0%} (>= 95%)",
                   values={"oracle_max": worst, "k1_larger_fraction": frac})


def eps_x_equivalence() -> Verdict:
    """10^4 evaluations, 2000 per estimator, of gamma(t)(eps_hat - eps_ref) = x0_ref - x0_hat."""
    sched, target, rng = _sched(), bimodal_benchmark(), _rng(3)
    prompt, cf = Prompt((1,), 7.5), ConsistencyFn(1, Prompt((1,), 7.5))
    worst, count = 0.0, 0
    per = {}
    for name in ("sds_ddpm", "sds_lcm", "sds_lcm_gc", "ism", "vsd"):
        errs = []
        for _ in range(40):
            x0 = rng.normal(size=(50, 2)) * 2.5
            eps = rng.normal(size=(50, 2))
            s = int(rng.integers(1, 500))
            if name == "sds_ddpm":
                est = sds_ddpm(target, x0, s, eps, prompt, sched)
            elif name == "sds_lcm":
                est = sds_lcm(target, x0, s, eps, prompt, cf, sched)
            elif name == "sds_lcm_gc":
                est = sds_lcm_gc(target, x0, s, 2 * s, eps, prompt, cf, sched)
            elif name == "ism":
                est = ism(target, x0, 20 * int(rng.integers(2, 50)), 20, prompt, sched)
            else:
                renders = x0[:, None, :] + rng.normal(size=(50, 8, 2))
                est = vsd(target, x0, s, eps, prompt, renders, sched)
            lhs = gamma(sched, est.t_used) * (est.eps_hat - est.eps_ref)
            rhs = est.x0_ref(sched) - est.x0_hat
            scale = np.maximum(np.linalg.norm(lhs, axis=1), np.finfo(float).tiny)
            errs.append(np.linalg.norm(lhs - rhs, axis=1) / scale)
        e = np.concatenate(errs)
        per[name] = float(e.max())
        worst = max(worst, per[name])
        count += e.size
    return Verdict(3, "eps/x prediction equivalence", worst <= 1e-10,
                   f"max relative error {worst:.2e} over {count} evaluations (<= 1e-10)",
                   values={"max_relative": worst, "per_estimator": per, "evaluations": count})


def sds_closed_form_mean() -> Verdict:
    sched, target, rng = _sched(), standard_normal(2), _rng(4)
    t = sched.nearest_timestep(0.5)
    a = sched.alpha_bar[t]
    x0 = np.array([1.2, -0.7])
    eps = rng.normal(size=(100_000, 2))
    diff = sds_ddpm(target, np.broadcast_to(x0, eps.shape), t, eps, UNCONDITIONAL, sched).pixel_gradient
    mean, se = diff.mean(axis=0), diff.std(axis=0, ddof=1) / np.sqrt(len(diff))
    expected = np.sqrt(a * (1 - a)) * x0
    z = np.abs(mean - expected) / se
    return Verdict(4, "SDS closed-form mean", bool(np.all(z <= 3)),
                   f"t={t} (alpha_bar={a:.4f}); |mean - closed form| = {np.round(z, 2).tolist()} SE (<= 3)",
                   values={"z": z.tolist(), "t": t})


def schedule_endpoints() -> Verdict:
    bad = []
    for name, plan in PRESETS.items():
        checks = {0: plan.t_geo_max, plan.T_cut: plan.t_cut, plan.T_cut + 1: plan.t_cut,
                  plan.n_total - 1: plan.t_app_min}
        bad += [(name, it, want, timestep_at(plan, it)) for it, want in checks.items()
                if timestep_at(plan, it) != want]
    mid = decreasing_timestep(980, 350, 250, 1000)
    ok = not bad and mid == 665
    return Verdict(5, "decreasing schedule endpoints", ok,
                   f"presets {sorted(PRESETS)} endpoints exact: {not bad}; midpoint = {mid:g} (665)",
                   values={"mismatches": bad, "midpoint": mid})


def inversion_round_trip() -> Verdict:
    sched, target, rng = _sched(), bimodal_benchmark(), _rng(6)
    x0 = target.sample(1000, rng)

    def uncond(x, t):
        return eps_star(target, x, t, UNCONDITIONAL, sched)

    down = list(range(980, -1, -20))
    chain = invert_chain(x0, 980, 20, uncond, sched, implicit_iters=50)
    err = float(np.abs(denoise_chain(chain.points[-1], down, uncond, sched) - x0).max())
    naive = invert_chain(x0, 980, 20, uncond, sched)
    naive_err = float(np.abs(denoise_chain(naive.points[-1], down, uncond, sched) - x0).max())
    return Verdict(6, "DDIM inversion round trip", err <= 1e-4,
                   f"endpoint error {err:.2e} (<= 1e-4); source-prediction inversion gives {naive_err:.2e}",
                   values={"error": err, "explicit_error": naive_err, "forwards": chain.forwards})


def calibration_efficacy(trials: int = 1000) -> Verdict:
    sched, target, rng = _sched(), bimodal_benchmark(), _rng(7)
    s, t = 350, 700
    one, oracle = ConsistencyFn(1), ConsistencyFn("oracle")
    x0 = target.sample(trials, rng)
    x_s = perturb(x0, s, rng.normal(size=x0.shape), sched)
    origin = consistency_eval(oracle, target, x_s, s, sched)
    plain = consistency_eval(one, target, x_s, s, sched)
    _, _, calibrated = calibrate(target, x_s, s, t, UNCONDITIONAL, one, sched)
    d_plain = np.linalg.norm(plain - origin, axis=1)
    d_cal = np.linalg.norm(calibrated - origin, axis=1)
    frac = float(np.mean(d_cal < d_plain))
    improvement = float(np.mean(d_plain - d_cal))
    return Verdict(7, "calibration efficacy", frac >= 0.8,
                   f"calibrated closer in {frac:.1%} of {trials} (>= 80%); mean improvement {improvement:+.4f} "
                   f"(uncalibrated {d_plain.mean():.4f}, calibrated {d_cal.mean():.4f})",
                   values={"fraction": frac, "mean_improvement": improvement,
                           "uncalibrated_error": float(d_plain.mean()), "calibrated_error": float(d_cal.mean())})


def consistency_claim() -> Verdict:
    lcm = run(default_config(estimator="sds_lcm", fidelity="oracle", plan={"noise_policy": "fixed"}))
    ddpm = run(default_config(estimator="sds_ddpm", plan={"noise_policy": "fresh"}))
    w = lcm.config["metrics_window"]
    v_lcm, v_ddpm = guidance_variance(lcm, w), guidance_variance(ddpm, w)
    curve = consistency_gap_curve(lcm)
    monotone = bool(np.all(np.diff(curve) < 0))
    ok = v_lcm < v_ddpm and monotone and not (lcm.failed or ddpm.failed)
    return Verdict(8, "consistency claim", ok,
                   f"guidance variance sds_lcm(oracle, fixed) {v_lcm:.4g} vs sds_ddpm(fresh) {v_ddpm:.4g}; "
                   f"gap over last half {np.round(curve, 4).tolist()} decreasing: {monotone}",
                   values={"var_lcm": v_lcm, "var_ddpm": v_ddpm, "gap_curve": curve.tolist()})


def end_to_end(seeds: int = 20) -> Verdict:
    base = default_config()
    scale = float(base.target.components[1]["scale"])
    main = run(base)
    md = main.metrics["mode_distance"]
    # adversarial start: the particle cloud sits on the unselected component
    bad_mode = base.target.components[0]
    scene = {"center": list(bad_mode["mean"]), "spread": float(bad_mode["scale"])}
    wins, pairs = 0, []
    for k in range(seeds):
        two = run(default_config(seed=k, scene=scene))
        flat = run(default_config(seed=k, scene=scene, plan={"T_cut": 0}))
        a, b = two.metrics["mode_distance"], flat.metrics["mode_distance"]
        pairs.append((a, b))
        wins += b >= a
    frac = wins / seeds
    ok = md < 0.1 * scale and frac >= 0.7 and not main.failed
    return Verdict(9, "end-to-end dual-phase run", ok,
                   f"mode distance {md:.4f} vs bound {0.1 * scale:.4f}; single-phase worse or equal in "
                   f"{frac:.0%} of {seeds} seeds (>= 70%)",
                   values={"mode_distance": md, "bound": 0.1 * scale, "two_phase_benefit": frac,
                           "pairs": pairs})


def chain_rule() -> Verdict:
    rng, h = _rng(10), 1e-5
    worst = 0.0
    for trial in range(100):
        dim = int(rng.integers(2, 7))
        R = ortho_group.rvs(dim, random_state=rng)
        theta, grad = rng.normal(size=dim), rng.normal(size=dim)
        anchor = R @ theta - grad

        def loss(p):
            return 0.5 * np.sum((R @ p - anchor) ** 2)

        fd = np.array([(loss(theta + h * e) - loss(theta - h * e)) / (2 * h) for e in np.eye(dim)])
        got = param_gradient(Camera(trial, R), grad)
        worst = max(worst, float(np.linalg.norm(got - fd) / np.linalg.norm(fd)))
    return Verdict(10, "chain rule vs finite differences", worst < 1e-5,
                   f"max relative error {worst:.2e} over 100 (theta, camera) (< 1e-5)",
                   values={"max_relative": worst})


def reverse_sde_marginal(n: int = 10_000) -> Verdict:
    sched, target = _sched(), bimodal_benchmark()
    samples = sample_reverse_sde(target, n, _rng(11), UNCONDITIONAL, sched)
    exact = target.sample(n, _rng(111))
    # the V-statistic is biased upward, so it is the conservative choice for an upper bound
    ed = energy_distance(samples, exact, unbiased=False)
    ed_u = energy_distance(samples, exact)
    return Verdict(11, "reverse-SDE marginal", ed < 0.05,
                   f"energy distance {ed:.4f} over {n} samples (< 0.05); U-statistic form {ed_u:.4f}",
                   values={"energy_distance": ed, "energy_distance_unbiased": ed_u})


def vsd_reduction() -> Verdict:
    sched, target, rng = _sched(), bimodal_benchmark(), _rng(12)
    prompt = Prompt((1,), 7.5)
    same = True
    for _ in range(200):
        x0, eps, t = rng.normal(size=2) * 2, rng.normal(size=2), int(rng.integers(1, 1001))
        a = sds_ddpm(target, x0, t, eps, prompt, sched)
        b = vsd(target, x0, t, eps, prompt, [x0], sched)
        same &= bool(np.array_equal(a.pixel_gradient, b.pixel_gradient)
                     and np.array_equal(a.eps_hat, b.eps_hat) and np.array_equal(a.x0_hat, b.x0_hat))
    return Verdict(12, "VSD single-particle reduction", same,
                   f"bit-identical to sds_ddpm on 200 shared draws: {same}")


CRITERIA = {
    1: identity_consistency,
    2: self_consistency,
    3: eps_x_equivalence,
    4: sds_closed_form_mean,
    5: schedule_endpoints,
    6: inversion_round_trip,
    7: calibration_efficacy,
    8: consistency_claim,
    9: end_to_end,
    10: chain_rule,
    11: reverse_sde_marginal,
    12: vsd_reduction,
}


def check(number: int) -> Verdict:
    start = time.perf_counter()
    verdict = CRITERIA[number]()
    verdict.seconds = time.perf_counter() - start
    return verdict


def run_all(numbers=None, echo=print) -> list[Verdict]:
    out = []
    for n in numbers or sorted(CRITERIA):
        v = check(n)
        if echo:
            echo(v.line())
        out.append(v)
    return out
