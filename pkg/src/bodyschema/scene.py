"""Chain and camera description files, joint sampling and seed derivation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .camera import CameraModel
from .kinematics import KinematicChain, Link, VirtualLink
from .transforms import RigidTransform

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def data_path(name: str) -> Path:
    return Path(str(resources.files("bodyschema") / "data" / name))


def _read_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {version!r}")
    return doc


def _vec3(value, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,):
        raise ConfigError(f"{what}: expected 3 numbers, got {value!r}")
    return arr


def chain_from_dict(doc: dict) -> KinematicChain:
    try:
        links = []
        for i, entry in enumerate(doc["links"]):
            links.append(Link(
                name=str(entry.get("name", f"link{i}")),
                joint_type=entry.get("joint_type", "revolute"),
                joint_axis=_vec3(entry.get("axis", [0, 0, 1]), f"links[{i}].axis"),
                fixed_transform=RigidTransform.from_axis_angle(
                    _vec3(entry.get("rotation", [0, 0, 0]), f"links[{i}].rotation"),
                    _vec3(entry.get("translation", [0, 0, 0]), f"links[{i}].translation")),
            ))
        virtual = [VirtualLink(_vec3(v["translation"], f"virtual_links[{i}].translation"),
                               bool(v.get("learnable", True)))
                   for i, v in enumerate(doc.get("virtual_links") or [])]
        return KinematicChain(tuple(links), doc.get("ee_index"), tuple(virtual),
                              str(doc.get("name", "chain")))
    except (KeyError, TypeError) as e:
        raise ConfigError(f"malformed chain description: {e}") from e


def chain_to_dict(chain: KinematicChain) -> dict:
    links = []
    for link in chain.links:
        links.append({
            "name": link.name,
            "joint_type": link.joint_type,
            "axis": [float(v) for v in link.joint_axis],
            "translation": [float(v) for v in link.fixed_transform.translation],
            "rotation": [float(v) for v in link.fixed_transform.axis_angle],
        })
    return {
        "schema_version": SCHEMA_VERSION,
        "name": chain.name,
        "ee_index": chain.ee_index,
        "links": links,
        "virtual_links": [{"translation": [float(v) for v in vl.translation],
                           "learnable": vl.learnable} for vl in chain.virtual_links],
    }


def load_chain(path) -> KinematicChain:
    return chain_from_dict(_read_yaml(path))


def save_chain(chain: KinematicChain, path) -> None:
    Path(path).write_text(yaml.safe_dump(chain_to_dict(chain), sort_keys=False), encoding="utf-8")


def camera_from_dict(doc: dict) -> CameraModel:
    try:
        ext = doc["extrinsic"]
        return CameraModel(
            RigidTransform.from_axis_angle(_vec3(ext.get("rotation", [0, 0, 0]), "extrinsic.rotation"),
                                           _vec3(ext["translation"], "extrinsic.translation")),
            fx=float(doc["fx"]), fy=float(doc["fy"]), cx=float(doc["cx"]), cy=float(doc["cy"]),
            width=int(doc["width"]), height=int(doc["height"]))
    except (KeyError, TypeError) as e:
        raise ConfigError(f"malformed camera description: {e}") from e


def camera_to_dict(cam: CameraModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "extrinsic": {"translation": [float(v) for v in cam.extrinsic.translation],
                      "rotation": [float(v) for v in cam.extrinsic.axis_angle]},
    }


def load_camera(path) -> CameraModel:
    return camera_from_dict(_read_yaml(path))


def save_camera(cam: CameraModel, path) -> None:
    Path(path).write_text(yaml.safe_dump(camera_to_dict(cam), sort_keys=False), encoding="utf-8")


def default_chain() -> KinematicChain:
    return load_chain(data_path("kuka7.yaml"))


def default_camera() -> CameraModel:
    return load_camera(data_path("camera.yaml"))


def derive_seed(master_seed: int, scenario_id: str) -> int:
    """Per-scenario seed: first 8 bytes of sha256("<master>/<scenario id>")."""
    digest = hashlib.sha256(f"{int(master_seed)}/{scenario_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class JointSampler:
    """Uniform joint configurations in ``center +- half_range``, kept only when
    every watched point projects inside the image with depth in ``depth_range``."""

    center: tuple[float, ...]
    half_range: tuple[float, ...]
    margin_px: float = 10.0
    depth_range: tuple[float, float] = (0.5, 5.0)
    max_oversampling: int = 10

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return c + rng.uniform(-1.0, 1.0, size=c.shape) * np.asarray(self.half_range, dtype=float)

    def accepts(self, cam: CameraModel, obs) -> bool:
        obs = np.atleast_2d(obs)
        lo, hi = self.depth_range
        return bool(np.all(cam.in_image(obs, self.margin_px))
                    and np.all((obs[:, 2] > lo) & (obs[:, 2] < hi)))

    def describe(self) -> str:
        return (f"center={list(self.center)} half_range={list(self.half_range)} "
                f"margin={self.margin_px}px depth={list(self.depth_range)}")
