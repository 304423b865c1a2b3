"""Experiment configuration bundle."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .camera import CameraModel
from .control import MpcConfig
from .kinematics import KinematicChain
from .regression import RegressionConfig
from .scene import ConfigError, JointSampler, _read_yaml, data_path, load_camera, load_chain


@dataclass
class PlacingTask:
    task_id: str
    start: np.ndarray
    goal: np.ndarray


@dataclass
class ExperimentConfig:
    chain: KinematicChain
    camera: CameraModel
    home: np.ndarray
    sampler: JointSampler
    objects: dict[str, np.ndarray]
    grasps: list[np.ndarray]
    seeds: list[int]
    master_seed: int
    pixel_sigma: float
    depth_sigma: float
    n_configs: int
    regression: RegressionConfig
    mpc: MpcConfig
    tasks: list[PlacingTask]
    placing_object: str
    baseline: dict
    output: Path
    goal_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    source: dict = field(default_factory=dict, repr=False)

    def config_hash(self) -> str:
        """Hash of the resolved configuration, independent of the output location."""
        doc = copy.deepcopy(self.source)
        doc.pop("output", None)
        text = yaml.safe_dump(doc, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def phi_true(self, obj: str | None = None, grasp: int = 0) -> np.ndarray:
        obj = obj or self.placing_object
        return self.objects[obj] + self.grasps[grasp]


SCHEMA_VERSION = 1

DEFAULT_BASELINE = {
    "n": 2000,
    "amplitude": 0.3,
    "freq_range": [0.05, 0.2],
    "dt": 0.2,
    "hidden": [64, 64],
    "activation": "tanh",
    "epochs": 2000,
    "lr": 1.0e-3,
    "momentum": 0.9,
    "batch": 64,
    "off_object_px": 15.0,
    "random_sequences": 20,
    "random_step": 0.05,
    "placing_epochs": 100,
    "placing_growth": 1.1,
}


def _arr(value, what: str, n: int | None = None) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{what}: expected numbers, got {value!r}") from e
    if n is not None and arr.shape != (n,):
        raise ConfigError(f"{what}: expected {n} numbers, got {value!r}")
    return arr


def load_experiment(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an experiment bundle; ``overrides`` replace top-level keys
    (nested mappings are merged one level deep)."""
    path = Path(path) if path is not None else data_path("experiment.yaml")
    doc = _read_yaml(path)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key] = {**doc[key], **value}
        else:
            doc[key] = value
    base = path.parent
    if doc.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {doc['schema_version']!r} "
                          f"(expected {SCHEMA_VERSION})")

    def resolve(name):
        p = Path(doc[name]) if name in doc else None
        if p is None:
            raise ConfigError(f"{path}: missing {name!r}")
        return p if p.is_absolute() else base / p

    try:
        chain = load_chain(resolve("chain"))
        cam = load_camera(resolve("camera"))
        dof = chain.dof
        home = _arr(doc["home"], "home", dof)
        s = doc.get("sampler", {})
        sampler = JointSampler(tuple(home), tuple(_arr(s["half_range"], "sampler.half_range", dof)),
                               float(s.get("margin_px", 10.0)),
                               tuple(_arr(s.get("depth_range", [0.5, 5.0]), "sampler.depth_range", 2)),
                               int(s.get("max_oversampling", 10)))
        objects = {str(k): _arr(v, f"objects.{k}").reshape(-1, 3) for k, v in doc["objects"].items()}
        grasps = [_arr(g, "grasps", 3) for g in doc.get("grasps", [[0, 0, 0]])]
        seeds = [int(x) for x in doc["seeds"]]
        if not seeds:
            raise ConfigError("seeds must not be empty")
        noise = doc.get("noise", {})
        reg = doc.get("regression", {})
        rcfg = RegressionConfig(learning_rate=float(reg.get("learning_rate", 0.1)),
                                max_steps=int(reg.get("max_steps", 2000)),
                                tol=None if reg.get("tol") is None else float(reg["tol"]),
                                optimizer=str(reg.get("optimizer", "plain-gd")),
                                scaled=bool(reg.get("scaled", True)))
        m = doc.get("mpc", {})
        mcfg = MpcConfig(horizon=int(m.get("horizon", 10)), epochs=int(m.get("epochs", 200)),
                         learning_rate=float(m.get("learning_rate", 1e-5)),
                         running_weight=float(m.get("running_weight", 0.0)),
                         action_weight=float(m.get("action_weight", 0.0)),
                         growth=float(m.get("growth", 1.0)),
                         accelerated=bool(m.get("accelerated", False)))
        weights = tuple(_arr(m.get("weights", [1, 1, 1]), "mpc.weights", 3))
        tasks = [PlacingTask(str(t["id"]), home + _arr(t["start_offset"], "tasks.start_offset", dof),
                             home + _arr(t["goal_offset"], "tasks.goal_offset", dof))
                 for t in doc.get("tasks", [])]
        placing_object = str(doc.get("placing_object", next(iter(objects))))
        if placing_object not in objects:
            raise ConfigError(f"placing_object {placing_object!r} is not among the objects")
        baseline = {**DEFAULT_BASELINE, **(doc.get("baseline") or {})}
    except KeyError as e:
        raise ConfigError(f"{path}: missing key {e}") from e
    for name in ("pixel_sigma", "depth_sigma"):
        if float(noise.get(name, 0.0)) < 0:
            raise ConfigError(f"noise.{name} must be non-negative")
    if int(reg.get("n_configs", 15)) < 1:
        raise ConfigError("regression.n_configs must be at least 1")
    cfg = ExperimentConfig(chain, cam, home, sampler, objects, grasps, seeds,
                           int(doc.get("master_seed", 0)), float(noise.get("pixel_sigma", 1.0)),
                           float(noise.get("depth_sigma", 0.0)), int(reg.get("n_configs", 15)),
                           rcfg, mcfg, tasks, placing_object, baseline,
                           Path(doc.get("output", "results")), weights, doc)
    return cfg
