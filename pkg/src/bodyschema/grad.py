"""Analytic projection Jacobians and the finite-difference oracle used to check them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .camera import CameraModel, project_camera_points, projection_jacobian
from .kinematics import ChainFrames, KinematicChain, as_phi, chain_frames, point_jacobians

FD_STEP = 1e-6


@dataclass
class GradientRecord:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if not np.isfinite(self.value):
            raise FloatingPointError(f"non-finite value {self.value}")
        for name, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name!r}")


@dataclass
class ProjectionLinearization:
    """Observations of K virtual joints together with their sensitivities."""

    obs: np.ndarray      # (K, 3)
    d_phi: np.ndarray    # (K, 3, 3): block k = d obs_k / d phi_k
    d_theta: np.ndarray  # (K, 3, dof)


def linearize_projection(cam: CameraModel, frames: ChainFrames, phi,
                         with_theta: bool = True) -> ProjectionLinearization:
    phi = as_phi(phi)
    pts = frames.p_ee + phi @ frames.R_ee.T
    pc = cam.to_camera(pts)
    obs = project_camera_points(cam, pc)
    P = projection_jacobian(cam, pc) @ cam.R  # (K, 3, 3), d obs / d base point
    d_phi = P @ frames.R_ee
    if with_theta:
        d_theta = P @ point_jacobians(frames, pts)
    else:
        d_theta = np.zeros((len(phi), 3, frames.axes.shape[0]))
    return ProjectionLinearization(obs, d_phi, d_theta)


def grad_projection_wrt_phi(cam: CameraModel, chain: KinematicChain, theta, phi) -> np.ndarray:
    """Jacobian (3K, 3K) of stacked observations w.r.t. stacked phi; block diagonal."""
    lin = linearize_projection(cam, chain_frames(chain, theta), phi, with_theta=False)
    K = lin.obs.shape[0]
    J = np.zeros((3 * K, 3 * K))
    for k in range(K):
        J[3 * k:3 * k + 3, 3 * k:3 * k + 3] = lin.d_phi[k]
    return J


def grad_projection_wrt_theta(cam: CameraModel, chain: KinematicChain, theta, phi) -> np.ndarray:
    """Jacobian (3K, dof) of stacked observations w.r.t. joint angles."""
    lin = linearize_projection(cam, chain_frames(chain, theta), phi)
    return lin.d_theta.reshape(-1, chain.dof)


def central_difference(f: Callable, x, h: float = FD_STEP) -> np.ndarray:
    """Central-difference derivative of ``f`` at ``x``.

    Scalar ``f`` gives a gradient with the shape of ``x``; vector ``f`` gives a
    Jacobian of shape ``(f.size, x.size)``.
    """
    x = np.array(x, dtype=float)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = np.asarray(f(xp.reshape(x.shape)), dtype=float)
        fm = np.asarray(f(xm.reshape(x.shape)), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError(f"f is not finite near coordinate {i}")
        cols.append((fp - fm) / (2.0 * h))
    if np.ndim(cols[0]) == 0:
        return np.array(cols).reshape(x.shape)
    return np.stack([c.reshape(-1) for c in cols], axis=1)


def finite_difference_check(f: Callable, x, analytic, h: float = FD_STEP,
                            floor: float = 1e-12) -> float:
    """Relative error ``||analytic - fd|| / (||fd|| + floor)`` (Frobenius norm).

    A norm-wise ratio keeps near-zero entries, whose finite difference is
    dominated by rounding noise, from dominating the measure.
    """
    fd = central_difference(f, x, h)
    analytic = np.asarray(analytic, dtype=float).reshape(fd.shape)
    if not np.all(np.isfinite(analytic)):
        raise FloatingPointError("analytic gradient is not finite")
    return float(np.linalg.norm(analytic - fd) / (np.linalg.norm(fd) + floor))
