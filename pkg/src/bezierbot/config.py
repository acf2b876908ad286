"""TOML configuration for the command-line workflow.

Every section is optional; missing keys take the dataclass defaults.  Relative
paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli

from .avoidance import AvoidanceConfig
from .control import DEFAULT_DELTA_U, ControllerGains
from .node import TrainConfig
from .plant import PlantConfig, ViewSpec

TASKS = ("regulate", "track", "obstacle-regulate", "self-motion")
TRAJECTORIES = ("infinity", "eight")


class ConfigError(ValueError):
    pass


@dataclass
class CollectConfig:
    samples: int = 1000
    bound: float = 0.9
    shape_out: str = "data/shape.csv"
    position_out: str = "data/position.csv"


@dataclass
class ReferenceConfig:
    kind: str = "infinity"  # infinity | eight | random
    duration: float = 30.0
    amplitude_x: float = 0.04  # metres, lateral tip excursion along X
    amplitude_z: float = 0.04  # metres, along Z
    depth: float = -0.29  # tip Y coordinate held along the curve
    u_limit: float = 0.8  # actuation envelope for feasible references
    out: str = "refs/reference.csv"


PLACEMENTS = ("fixed", "trajectory", "en-route", "approach")


@dataclass
class ObstacleConfig:
    # fixed: static at ``position``; trajectory: waypoint CSV (t, x, y, z);
    # en-route: static, beside the start-to-target tip line;
    # approach: moves toward a body point of the held pose over the run
    placement: str = "fixed"
    trajectory: str = ""
    position: tuple = (0.04, -0.2, 0.04)
    radius: float = 6.0
    fraction: float = 0.5  # en-route: position along the tip line
    offset: float = 0.04  # en-route: metres sideways from the tip line
    body_fraction: float = 2 / 3  # approach: backbone point, 0 = base, 1 = tip
    direction: tuple = (1.0, 0.0, 1.0)  # approach: direction of motion
    start: float = 0.09  # approach: metres short of the body point at t = 0
    stop: float = 0.02  # approach: metres short at the end of the run

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"unknown obstacle placement {self.placement!r}; expected one of {PLACEMENTS}")
        if self.placement == "trajectory" and not self.trajectory:
            raise ConfigError("obstacle placement 'trajectory' needs a trajectory file")


@dataclass
class ExperimentConfig:
    task: str = "regulate"
    duration: float = 10.0
    dt: float = 0.05
    seed: int = 0
    reference: str = ""  # reference CSV; empty -> random feasible target from ``seed``
    target_u_limit: float | None = None  # envelope of random targets; None -> per-task default
    shape_model: str = "models/shape.json"
    position_model: str = "models/position.json"
    out_dir: str = "runs/run"
    snapshot_ticks: tuple = (0,)
    delta_u: float = DEFAULT_DELTA_U
    initial_u: tuple = ()  # empty -> straight for regulation, reference start otherwise
    gains: ControllerGains | None = None  # None -> per-task default
    avoidance: AvoidanceConfig = field(default_factory=AvoidanceConfig)
    obstacle: ObstacleConfig = field(default_factory=ObstacleConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.duration <= 0 or self.dt <= 0:
            raise ConfigError("duration and dt must be positive")

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass
class Config:
    plant: PlantConfig = field(default_factory=PlantConfig)
    view: ViewSpec = field(default_factory=lambda: ViewSpec(1))
    collect: CollectConfig = field(default_factory=CollectConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    base_dir: Path = field(default_factory=Path.cwd)

    def views(self) -> tuple[ViewSpec, ViewSpec]:
        return replace(self.view, view_id=1), replace(self.view, view_id=2)

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


def _build(cls, table: dict, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = set(table) - set(known)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    kw = {}
    for key, value in table.items():
        kw[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def from_dict(data: dict, base_dir: Path | None = None) -> Config:
    data = dict(data)
    exp = data.pop("experiment", {})
    if not isinstance(exp, dict):
        raise ConfigError("[experiment] must be a table")
    exp = dict(exp)
    sub = {}
    for key, cls in (("gains", ControllerGains), ("avoidance", AvoidanceConfig),
                     ("obstacle", ObstacleConfig)):
        if key in exp:
            sub[key] = _build(cls, exp.pop(key), f"experiment.{key}")
    experiment = _build(ExperimentConfig, exp, "experiment")
    experiment = replace(experiment, **sub)
    sections = {"plant": PlantConfig, "view": ViewSpec, "collect": CollectConfig,
                "train": TrainConfig, "reference": ReferenceConfig}
    unknown = set(data) - set(sections)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    kw = {}
    for key, cls in sections.items():
        table = data.get(key, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{key}] must be a table")
        table = dict(table)
        if key == "view":
            table.setdefault("view_id", 1)
        kw[key] = _build(cls, table, key)
    return Config(**kw, experiment=experiment, base_dir=base_dir or Path.cwd())


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    path = Path(path)
    try:
        data = tomli.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data, path.resolve().parent)
