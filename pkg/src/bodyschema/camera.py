"""Pinhole projection of base-frame points into (pixel x, pixel y, depth)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import KinematicChain, as_phi, chain_frames
from .transforms import RigidTransform

EPS_Z = 1e-6


class BehindCameraError(ValueError):
    """A point projects onto or behind the image plane."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True, eq=False)
class CameraModel:
    extrinsic: RigidTransform
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def R(self) -> np.ndarray:
        return self.extrinsic.rotation_matrix

    def to_camera(self, points) -> np.ndarray:
        return self.extrinsic.apply(points)

    def in_image(self, obs, margin: float = 0.0) -> np.ndarray:
        obs = np.atleast_2d(obs)
        return ((obs[:, 0] >= margin) & (obs[:, 0] <= self.width - 1 - margin)
                & (obs[:, 1] >= margin) & (obs[:, 1] <= self.height - 1 - margin))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Base-to-camera extrinsic for a camera at ``eye`` whose optical (+z) axis
    points at ``target``; image y points down, away from ``up``."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_cb = np.stack([x, y, z])  # rows: camera axes in base coordinates
    return RigidTransform.from_matrix(R_cb, -R_cb @ eye)


def project_camera_points(cam: CameraModel, pc) -> np.ndarray:
    pc = np.atleast_2d(np.asarray(pc, dtype=float))
    z = pc[:, 2]
    bad = np.flatnonzero(~(z > EPS_Z))
    if bad.size:
        i = int(bad[0])
        raise BehindCameraError(f"point {i} is behind the camera (z = {z[i]:.3g} m)", index=i)
    return np.stack([cam.fx * pc[:, 0] / z + cam.cx,
                     cam.fy * pc[:, 1] / z + cam.cy,
                     z], axis=1)


def project_points(cam: CameraModel, points) -> np.ndarray:
    """Project base-frame points (N, 3) to observations (N, 3)."""
    return project_camera_points(cam, cam.to_camera(points))


def project(cam: CameraModel, p) -> np.ndarray:
    return project_points(cam, np.asarray(p, dtype=float).reshape(1, 3))[0]


def unproject(cam: CameraModel, obs) -> np.ndarray:
    """Camera-frame point for observation(s) ``(x, y, depth)``."""
    obs = np.asarray(obs, dtype=float)
    d = obs[..., 2]
    return np.stack([(obs[..., 0] - cam.cx) * d / cam.fx,
                     (obs[..., 1] - cam.cy) * d / cam.fy,
                     d], axis=-1)


def projection_jacobian(cam: CameraModel, pc) -> np.ndarray:
    """d(x, y, depth)/d(camera-frame point), shape (N, 3, 3)."""
    pc = np.atleast_2d(pc)
    X, Y, Z = pc[:, 0], pc[:, 1], pc[:, 2]
    J = np.zeros((pc.shape[0], 3, 3))
    J[:, 0, 0] = cam.fx / Z
    J[:, 0, 2] = -cam.fx * X / Z**2
    J[:, 1, 1] = cam.fy / Z
    J[:, 1, 2] = -cam.fy * Y / Z**2
    J[:, 2, 2] = 1.0
    return J


def project_chain(cam: CameraModel, chain: KinematicChain, theta, phi=None) -> np.ndarray:
    """Observations (K, 3) of the virtual joints, in ``phi`` order."""
    phi = chain.phi if phi is None else as_phi(phi)
    fr = chain_frames(chain, theta)
    pts = fr.p_ee + phi @ fr.R_ee.T
    try:
        return project_points(cam, pts)
    except BehindCameraError as e:
        raise BehindCameraError(f"virtual joint {e.index}: {e}", index=e.index) from None


def project_ee(cam: CameraModel, chain: KinematicChain, theta) -> np.ndarray:
    return project(cam, chain_frames(chain, theta).p_ee)
