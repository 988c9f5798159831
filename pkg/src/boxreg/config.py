"""
Flat key-value experiment configuration.

A config file is a YAML (or JSON) mapping with one level of keys. Every key
is optional; missing keys take the library defaults. Unknown keys and bad
values are rejected with a :class:`ConfigError` naming the offending field.

Keys, grouped by the object they populate::

    mode, seed, steps, speed, dt, yaw_increment_scale       trajectory
    sensor_position, spacing, noise_sigma                    sensor
    noise_x, noise_y, noise_z, noise_roll, noise_pitch,
    noise_yaw                                                initial-box noise
    size, occlusion_fraction, points_per_frame               simulation
    closeness_weight, enclosure_weight, smoothness_weight,
    alignment_weight, top_k, l1_smoothing, optimize_z_axis   loss
    max_iterations, gradient_tolerance, loss_change_tolerance,
    lbfgs_history, armijo, shrink, max_backtracks,
    newton_fd_step, window_size, window_stride, continuation optimizer
    icp_surface_samples, icp_max_iterations, icp_tolerance   ICP baseline
    iou_samples, gradcheck_perturbations, gradcheck_scale,
    gradcheck_step, gradcheck_tolerance                      evaluation

``optimize_z_axis`` defaults to ``mode == "3d"``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .evaluation import IcpSettings
from .losses import LossConfig
from .optim import OptimizerSettings
from .simulate import DEFAULT_SIZE, NoiseScales, SensorModel, SimulationConfig, TrajectoryConfig


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field '{field_name}': {message}")
        self.field = field_name


_TRAJECTORY_KEYS = ("mode", "seed", "steps", "speed", "dt", "yaw_increment_scale")
_SENSOR_KEYS = {"sensor_position": "position", "spacing": "spacing", "noise_sigma": "noise_sigma"}
_NOISE_KEYS = {f"noise_{k}": k for k in ("x", "y", "z", "roll", "pitch", "yaw")}
_SIM_KEYS = ("size", "occlusion_fraction", "points_per_frame")
_LOSS_KEYS = tuple(f.name for f in fields(LossConfig))
_OPT_KEYS = tuple(f.name for f in fields(OptimizerSettings))
_ICP_KEYS = {"icp_surface_samples": "surface_samples", "icp_max_iterations": "max_iterations",
             "icp_tolerance": "tolerance"}


@dataclass
class EvalSettings:
    iou_samples: int = 200_000
    gradcheck_perturbations: int = 10
    gradcheck_scale: float = 0.05
    gradcheck_step: float = 1e-5
    gradcheck_tolerance: float = 1e-4

    def __post_init__(self):
        if self.iou_samples < 1:
            raise ValueError("must be >= 1")
        if self.gradcheck_perturbations < 0:
            raise ValueError("must be >= 0")
        if not (self.gradcheck_scale >= 0 and self.gradcheck_step > 0 and self.gradcheck_tolerance > 0):
            raise ValueError("gradcheck scale must be >= 0, step and tolerance > 0")


_EVAL_KEYS = tuple(f.name for f in fields(EvalSettings))

KNOWN_KEYS = frozenset(
    _TRAJECTORY_KEYS + tuple(_SENSOR_KEYS) + tuple(_NOISE_KEYS) + _SIM_KEYS + _LOSS_KEYS
    + _OPT_KEYS + tuple(_ICP_KEYS) + _EVAL_KEYS
)


@dataclass
class ExperimentConfig:
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    icp: IcpSettings = field(default_factory=IcpSettings)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    # keys that were set explicitly in the source mapping
    explicit: frozenset = frozenset()

    @property
    def mode(self) -> str:
        return self.simulation.trajectory.mode

    @property
    def seed(self) -> int:
        return self.simulation.trajectory.seed

    def with_mode(self, mode: str) -> "ExperimentConfig":
        """Copy whose loss follows ``mode`` unless ``optimize_z_axis`` was set explicitly."""
        flat = self.to_flat()
        flat["mode"] = mode
        keep = {k: flat[k] for k in self.explicit | {"mode"}}
        return from_mapping(keep)

    def to_flat(self) -> dict:
        sim = self.simulation
        out = {k: getattr(sim.trajectory, k) for k in _TRAJECTORY_KEYS}
        out.update({k: getattr(sim.sensor, attr) for k, attr in _SENSOR_KEYS.items()})
        out["sensor_position"] = list(out["sensor_position"])
        out.update({k: getattr(sim.noise, attr) for k, attr in _NOISE_KEYS.items()})
        out["size"] = list(sim.size)
        out["occlusion_fraction"] = sim.occlusion_fraction
        out["points_per_frame"] = sim.points_per_frame
        out.update(asdict(self.loss))
        opt = asdict(self.optimizer)
        opt["continuation"] = list(opt["continuation"])
        out.update(opt)
        out.update({k: getattr(self.icp, attr) for k, attr in _ICP_KEYS.items()})
        out.update(asdict(self.evaluation))
        return out


def _build(name, factory, kwargs):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        # attribute the failure to the first given key the message mentions
        msg = str(exc)
        culprit = next((k for k in kwargs if k in msg), None) or name
        raise ConfigError(culprit, msg) from None


def _check_types(mapping: dict):
    for key, value in mapping.items():
        if key not in KNOWN_KEYS:
            raise ConfigError(key, "unknown key")
        if key in ("mode",):
            if not isinstance(value, str):
                raise ConfigError(key, f"expected a string, got {value!r}")
        elif key in ("optimize_z_axis",):
            if not isinstance(value, bool):
                raise ConfigError(key, f"expected true/false, got {value!r}")
        elif key in ("sensor_position", "size", "continuation"):
            if not isinstance(value, (list, tuple)) or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                raise ConfigError(key, f"expected a list of numbers, got {value!r}")
        elif isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")


def from_mapping(mapping: dict | None) -> ExperimentConfig:
    """Validate a flat mapping and build every settings object."""
    mapping = dict(mapping or {})
    _check_types(mapping)
    for key in ("seed", "steps", "top_k", "points_per_frame", "max_iterations", "lbfgs_history",
                "max_backtracks", "window_size", "window_stride", "icp_surface_samples",
                "icp_max_iterations", "iou_samples", "gradcheck_perturbations"):
        if key in mapping and mapping[key] != int(mapping[key]):
            raise ConfigError(key, f"expected an integer, got {mapping[key]!r}")
    pick = lambda keys: {k: mapping[k] for k in keys if k in mapping}  # noqa: E731

    if "steps" in mapping and mapping["steps"] < 3:
        raise ConfigError("steps", f"T >= 3 is required, got {mapping['steps']}")
    trajectory = _build("trajectory", TrajectoryConfig, pick(_TRAJECTORY_KEYS))
    sensor = _build("sensor", SensorModel, {a: mapping[k] for k, a in _SENSOR_KEYS.items() if k in mapping})
    noise = _build("noise", NoiseScales, {a: mapping[k] for k, a in _NOISE_KEYS.items() if k in mapping})
    sim_kwargs = pick(_SIM_KEYS)
    sim_kwargs.setdefault("size", DEFAULT_SIZE)
    simulation = _build("simulation", SimulationConfig,
                        dict(trajectory=trajectory, sensor=sensor, noise=noise, **sim_kwargs))

    loss_kwargs = pick(_LOSS_KEYS)
    loss_kwargs.setdefault("optimize_z_axis", trajectory.mode == "3d")
    loss = _build("loss", LossConfig, loss_kwargs)
    optimizer = _build("optimizer", OptimizerSettings, pick(_OPT_KEYS))
    icp = _build("icp", IcpSettings, {a: mapping[k] for k, a in _ICP_KEYS.items() if k in mapping}
                 | {"planar": trajectory.mode == "2d"})
    evaluation = _build("evaluation", EvalSettings, pick(_EVAL_KEYS))
    return ExperimentConfig(simulation, loss, optimizer, icp, evaluation, frozenset(mapping))


def load_config(path: str | Path | None, seed: int | None = None) -> ExperimentConfig:
    """Read a config file (YAML or JSON); ``seed`` overrides the file's seed."""
    mapping: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"cannot parse {path}: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("<file>", "top level must be a key-value mapping")
        mapping = loaded
    if seed is not None:
        mapping["seed"] = seed
    return from_mapping(mapping)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_flat(), indent=2, sort_keys=True)
