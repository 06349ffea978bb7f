"""Experiment configuration: nested dataclasses loaded from YAML or JSON.

Schema (all keys optional, defaults shown by ``default_config()``)::

    seed: 0
    target:
      components:                       # weight, mean, scale per component
        - {weight: 0.5, mean: [-3.0, 0.0], scale: 0.5}
        - {weight: 0.5, mean: [3.0, 0.0], scale: 0.5}
      prompts: {left: [0], right: [1]}  # named component subsets
    prompt: right                       # name, list of indices, or null
    cfg_scale: 7.5
    schedule: {kind: linear, K: 1000, beta_min: 1.0e-4, beta_max: 0.02}
    estimator: sds_lcm_gc               # sds_ddpm | sds_lcm | sds_lcm_gc | ism | vsd
    fidelity: 1                         # "oracle" or k-step count for the consistency model
    omega: unit                         # unit | sigma2 | alpha_bar
    delta_T: 20                         # ISM inversion stride
    calibration_jump: ddim              # ddim | printed
    plan: {n_total: 2000, T_cut: 400, t_cut: 350, t_geo_max: 980, t_app_min: 20,
           noise_policy: fixed, sampling: decreasing}
    scene: {particles: 64, center: [0.0, 0.0], spread: 0.5}
    optimizer: {method: adam, learning_rate: 0.01, beta1: 0.9, beta2: 0.99}
    cameras: 16
    metrics_window: 20
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .guidance import ESTIMATORS
from .scheduler import PRESETS, PhasePlan
from .schedule import WEIGHTINGS

DEFAULT_COMPONENTS = [
    {"weight": 0.5, "mean": [-3.0, 0.0], "scale": 0.5},
    {"weight": 0.5, "mean": [3.0, 0.0], "scale": 0.5},
]


@dataclass
class TargetConfig:
    components: list = field(default_factory=lambda: copy.deepcopy(DEFAULT_COMPONENTS))
    prompts: dict = field(default_factory=lambda: {"left": [0], "right": [1]})


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    K: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass
class SceneConfig:
    particles: int = 64
    center: list = field(default_factory=lambda: [0.0, 0.0])
    spread: float = 0.5


@dataclass
class OptimizerConfig:
    method: str = "adam"
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99


@dataclass
class ExperimentConfig:
    seed: int = 0
    target: TargetConfig = field(default_factory=TargetConfig)
    prompt: object = "right"
    cfg_scale: float = 7.5
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    estimator: str = "sds_lcm_gc"
    fidelity: object = 1
    omega: str = "unit"
    delta_T: int = 20
    calibration_jump: str = "ddim"
    plan: dict = field(default_factory=lambda: asdict(PRESETS["desk"]))
    scene: SceneConfig = field(default_factory=SceneConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    cameras: int = 16
    metrics_window: int = 20

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigurationError(f"unknown estimator {self.estimator!r}")
        if self.omega not in WEIGHTINGS:
            raise ConfigurationError(f"unknown weighting {self.omega!r}")
        if isinstance(self.prompt, str) and self.prompt not in self.target.prompts:
            raise ConfigurationError(f"prompt {self.prompt!r} not declared in target.prompts")
        if self.cameras < 1 or self.scene.particles < 1:
            raise ConfigurationError("need at least one camera and one particle")
        if self.metrics_window < 2:
            raise ConfigurationError("metrics_window must be >= 2")
        self.phase_plan()

    def phase_plan(self) -> PhasePlan:
        plan = dict(self.plan)
        plan.setdefault("K", self.schedule.K)
        plan.setdefault("noise_seed", self.seed)
        try:
            return PhasePlan(**plan)
        except TypeError as exc:
            raise ConfigurationError(f"bad plan section: {exc}") from None

    def prompt_indices(self) -> tuple:
        if self.prompt is None:
            return ()
        if isinstance(self.prompt, str):
            return tuple(self.target.prompts[self.prompt])
        return tuple(self.prompt)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        sections = {"target": TargetConfig, "schedule": ScheduleConfig,
                    "scene": SceneConfig, "optimizer": OptimizerConfig}
        for key, kind in sections.items():
            if key in data and not isinstance(data[key], kind):
                try:
                    data[key] = kind(**data[key])
                except TypeError as exc:
                    raise ConfigurationError(f"bad {key} section: {exc}") from None
        if "plan" in data:
            plan = asdict(PRESETS["desk"])
            plan.update(data["plan"])
            data["plan"] = plan
        return cls(**data)


def default_config(**overrides) -> ExperimentConfig:
    return ExperimentConfig.from_dict(overrides)


def apply_preset(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    out = copy.deepcopy(cfg)
    p = asdict(PRESETS[name])
    out.plan = {**out.plan, "n_total": p["n_total"], "T_cut": p["T_cut"]}
    out.validate()
    return out


def set_path(data: dict, dotted: str, value) -> dict:
    """Set ``a.b.c = value`` inside a nested dict, creating levels as needed."""
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return data


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return ExperimentConfig.from_dict(data)
