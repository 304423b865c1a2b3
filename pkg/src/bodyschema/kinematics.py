"""Serial kinematic chains extended with translation-only virtual links."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .transforms import RigidTransform, axis_angle_matrix, compose

REVOLUTE = "revolute"
FIXED = "fixed"


class DimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Link:
    """One link of a serial chain.

    ``fixed_transform`` places the joint frame relative to the parent link;
    a revolute joint then rotates about ``joint_axis`` expressed in that frame.
    """

    name: str
    joint_type: str = REVOLUTE
    joint_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    fixed_transform: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if self.joint_type not in (REVOLUTE, FIXED):
            raise ValueError(f"link {self.name!r}: unknown joint type {self.joint_type!r}")
        axis = np.array(self.joint_axis, dtype=float).reshape(3)
        if self.joint_type == REVOLUTE:
            n = np.linalg.norm(axis)
            if n < 1e-12:
                raise ValueError(f"link {self.name!r}: zero joint axis")
            axis = axis / n
        axis.flags.writeable = False
        object.__setattr__(self, "joint_axis", axis)

    @property
    def is_revolute(self) -> bool:
        return self.joint_type == REVOLUTE


@dataclass(frozen=True, eq=False)
class VirtualLink:
    translation: np.ndarray
    learnable: bool = True

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.flags.writeable = False
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True, eq=False)
class KinematicChain:
    links: tuple[Link, ...]
    ee_index: int | None = None
    virtual_links: tuple[VirtualLink, ...] = ()
    name: str = "chain"

    def __post_init__(self):
        links = tuple(self.links)
        if not links:
            raise ValueError("a chain needs at least one link")
        ee = len(links) - 1 if self.ee_index is None else int(self.ee_index)
        if not 0 <= ee < len(links):
            raise ValueError(f"ee_index {ee} out of range for {len(links)} links")
        object.__setattr__(self, "links", links)
        object.__setattr__(self, "ee_index", ee)
        object.__setattr__(self, "virtual_links", tuple(self.virtual_links))

    @cached_property
    def dof(self) -> int:
        return sum(1 for link in self.links if link.is_revolute)

    @cached_property
    def _frame_steps(self) -> tuple:
        """Per link up to the end-effector: (offset, fixed rotation or None if
        identity, joint axis or None if fixed)."""
        steps = []
        for link in self.links[: self.ee_index + 1]:
            ft = link.fixed_transform
            R = ft.rotation_matrix
            steps.append((ft.translation, None if np.array_equal(R, np.eye(3)) else R,
                          link.joint_axis if link.is_revolute else None))
        return tuple(steps)

    @property
    def phi(self) -> np.ndarray:
        """Stacked virtual link translations, shape (K, 3)."""
        if not self.virtual_links:
            return np.zeros((0, 3))
        return np.stack([v.translation for v in self.virtual_links])

    def with_virtual_links(self, phi) -> KinematicChain:
        phi = as_phi(phi)
        return KinematicChain(self.links, self.ee_index,
                              tuple(VirtualLink(p) for p in phi), self.name)

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.dof:
            raise DimensionError(
                f"chain {self.name!r} has {self.dof} revolute joints, got {theta.shape[0]} angles")
        if not np.all(np.isfinite(theta)):
            raise ValueError("joint angles must be finite")
        return theta


def as_phi(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.size == 0:
        return np.zeros((0, 3))
    return phi.reshape(-1, 3)


def forward_kinematics(chain: KinematicChain, theta) -> list[RigidTransform]:
    """Base-frame pose of every link for joint angles ``theta``."""
    theta = chain.check_theta(theta)
    poses = []
    pose = RigidTransform.identity()
    j = 0
    for link in chain.links:
        pose = compose(pose, link.fixed_transform)
        if link.is_revolute:
            pose = compose(pose, RigidTransform.from_axis_angle(link.joint_axis * theta[j]))
            j += 1
        poses.append(pose)
    return poses


@dataclass
class ChainFrames:
    """Rotation matrices and origins of the links up to the end-effector,
    plus world-frame joint axes and origins for the Jacobian."""

    R_ee: np.ndarray
    p_ee: np.ndarray
    axes: np.ndarray     # (dof, 3), zero rows for joints past the end-effector
    origins: np.ndarray  # (dof, 3)


def chain_frames(chain: KinematicChain, theta) -> ChainFrames:
    theta = chain.check_theta(theta)
    R = np.eye(3)
    p = np.zeros(3)
    axes = np.zeros((chain.dof, 3))
    origins = np.zeros((chain.dof, 3))
    j = 0
    for offset, Rf, axis in chain._frame_steps:
        p = R @ offset + p
        if Rf is not None:
            R = R @ Rf
        if axis is not None:
            axes[j] = R @ axis
            origins[j] = p
            R = R @ axis_angle_matrix(axis, theta[j])
            j += 1
    return ChainFrames(R, p, axes, origins)


def ee_pose(chain: KinematicChain, theta) -> RigidTransform:
    return forward_kinematics(chain, theta)[chain.ee_index]


def virtual_link_positions(chain: KinematicChain, theta, phi=None) -> np.ndarray:
    """Base-frame positions (K, 3) of the virtual joints ``ee_pose * phi_k``."""
    phi = chain.phi if phi is None else as_phi(phi)
    fr = chain_frames(chain, theta)
    return fr.p_ee + phi @ fr.R_ee.T


def point_jacobians(frames: ChainFrames, points) -> np.ndarray:
    """d(point)/d(theta) for points rigidly attached to the end-effector.

    Returns shape (N, 3, dof): column j is ``axis_j x (p - origin_j)``.
    """
    pts = np.atleast_2d(points)
    lever = pts[:, None, :] - frames.origins[None, :, :]
    a = frames.axes
    out = np.empty((pts.shape[0], 3, a.shape[0]))
    # axis x lever, written out: np.cross is slow on many tiny arrays
    out[:, 0] = a[:, 1] * lever[..., 2] - a[:, 2] * lever[..., 1]
    out[:, 1] = a[:, 2] * lever[..., 0] - a[:, 0] * lever[..., 2]
    out[:, 2] = a[:, 0] * lever[..., 1] - a[:, 1] * lever[..., 0]
    return out


def link_origins(chain: KinematicChain, theta) -> np.ndarray:
    return np.stack([pose.translation for pose in forward_kinematics(chain, theta)])


def planar_arm(lengths: Sequence[float] = (0.5, 0.5), name: str = "planar") -> KinematicChain:
    """Revolute-about-z arm with links along x; the last entry is a fixed tip."""
    links = [Link("joint0", REVOLUTE, (0, 0, 1))]
    for i, length in enumerate(lengths[:-1], start=1):
        links.append(Link(f"joint{i}", REVOLUTE, (0, 0, 1),
                          RigidTransform.from_translation(length, 0.0, 0.0)))
    links.append(Link("tip", FIXED, (0, 0, 1),
                      RigidTransform.from_translation(lengths[-1], 0.0, 0.0)))
    return KinematicChain(tuple(links), name=name)
