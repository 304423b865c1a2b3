"""Gradient-based action optimization through the extended kinematic chain.

The predictive model is ``theta[t+1] = theta[t] + u[t]`` and
``z[t+1] = project(virtual joints at theta[t+1])``; the action sequence is
improved by gradient descent on a keypoint-space cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import BehindCameraError, CameraModel, project_chain
from .grad import GradientRecord, linearize_projection
from .kinematics import KinematicChain, as_phi, chain_frames


class RolloutError(BehindCameraError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass
class GoalSpec:
    z_goal: np.ndarray
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.z_goal = np.asarray(self.z_goal, dtype=float).reshape(-1, 3)


@dataclass
class Trajectory:
    thetas: np.ndarray     # (T+1, dof)
    keypoints: np.ndarray  # (T+1, K, 3)

    @property
    def horizon(self) -> int:
        return self.thetas.shape[0] - 1


@dataclass
class MpcConfig:
    horizon: int = 10
    epochs: int = 200
    learning_rate: float = 1e-5
    running_weight: float = 0.0
    action_weight: float = 0.0
    growth: float = 1.0
    accelerated: bool = False
    max_halvings: int = 60
    step_bound: float | None = None
    joint_limits: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def check_actions(u, dof: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim == 1 and dof == 1:
        u = u[:, None]
    if u.ndim != 2 or u.shape[1] != dof or u.shape[0] < 1:
        raise ValueError(f"action sequence must be T x {dof}, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("actions must be finite")
    return u


def rollout(chain: KinematicChain, cam: CameraModel, phi, theta0, u) -> Trajectory:
    """Open-loop prediction of joint angles and keypoints for actions ``u``."""
    theta0 = chain.check_theta(theta0)
    u = check_actions(u, chain.dof)
    thetas = theta0 + np.vstack([np.zeros(chain.dof), np.cumsum(u, axis=0)])
    kps = []
    for t, th in enumerate(thetas):
        try:
            kps.append(project_chain(cam, chain, th, phi))
        except BehindCameraError as e:
            raise RolloutError(f"step {t}: {e}", t) from None
    return Trajectory(thetas, np.array(kps))


def _step_weights(T: int, running_weight: float) -> np.ndarray:
    w = np.full(T + 1, float(running_weight))
    w[0] = 0.0
    w[T] = 1.0
    return w


def cost(traj: Trajectory, goal: GoalSpec, running_weight: float = 0.0,
         u=None, action_weight: float = 0.0) -> float:
    """Weighted squared keypoint distance of the final state to the goal, plus
    optional running and action-magnitude terms."""
    w = np.asarray(goal.weights, dtype=float)
    r = traj.keypoints - goal.z_goal
    per_step = np.sum(w * r * r, axis=(1, 2))
    total = float(np.dot(_step_weights(traj.horizon, running_weight), per_step))
    if u is not None and action_weight:
        total += action_weight * float(np.sum(np.asarray(u) ** 2))
    return total


def cost_and_grad(chain: KinematicChain, cam: CameraModel, phi, theta0, u, goal: GoalSpec,
                  running_weight: float = 0.0, action_weight: float = 0.0) -> GradientRecord:
    """Cost of the rollout of ``u`` and its gradient with respect to ``u``.

    Only states with a non-zero cost weight are projected.
    """
    theta0 = chain.check_theta(theta0)
    u = check_actions(u, chain.dof)
    phi = as_phi(phi)
    T = u.shape[0]
    thetas = theta0 + np.vstack([np.zeros(chain.dof), np.cumsum(u, axis=0)])
    sw = _step_weights(T, running_weight)
    w = np.asarray(goal.weights, dtype=float)
    dtheta = np.zeros((T + 1, chain.dof))
    value = 0.0
    for t in np.flatnonzero(sw):
        try:
            lin = linearize_projection(cam, chain_frames(chain, thetas[t]), phi)
        except BehindCameraError as e:
            raise RolloutError(f"step {t}: {e}", int(t)) from None
        r = lin.obs - goal.z_goal
        value += sw[t] * float(np.sum(w * r * r))
        dtheta[t] = sw[t] * np.einsum("kc,kcj->j", 2.0 * w * r, lin.d_theta)
    # u[t] moves every later state: grad_u[t] = sum_{s > t} dC/dtheta[s]
    grad_u = np.cumsum(dtheta[::-1], axis=0)[::-1][1:]
    if action_weight:
        value += action_weight * float(np.sum(u * u))
        grad_u = grad_u + 2.0 * action_weight * u
    return GradientRecord(value, {"u": grad_u})


def _project_actions(u: np.ndarray, theta0: np.ndarray, cfg: MpcConfig) -> np.ndarray:
    if cfg.step_bound is not None:
        u = np.clip(u, -cfg.step_bound, cfg.step_bound)
    if cfg.joint_limits is not None:
        lo, hi = (np.asarray(a, dtype=float) for a in cfg.joint_limits)
        path = np.clip(theta0 + np.cumsum(u, axis=0), lo, hi)
        u = np.diff(np.vstack([theta0, path]), axis=0)
    return u


@dataclass
class MpcResult:
    u: np.ndarray
    cost_history: list[float]
    trajectory: Trajectory
    initial_cost: float
    learning_rate: float = field(default=0.0)


def descend(fun, u0, cfg: MpcConfig, project=None) -> tuple[np.ndarray, GradientRecord, list[float], float]:
    """Monotone gradient descent on ``fun(u) -> GradientRecord`` (gradient key ``"u"``).

    A step is accepted only if the value does not increase; otherwise the step
    size is halved and the step retried. With ``cfg.accelerated`` a Nesterov
    momentum step is tried first and dropped (momentum restarted) whenever it
    would increase the value.
    """
    project = project or (lambda x: x)

    def evaluate(x):
        try:
            return fun(x)
        except (BehindCameraError, FloatingPointError):
            return None

    u = np.array(u0, dtype=float)
    rec = fun(u)
    history = []
    lr = cfg.learning_rate
    u_prev = u
    k = 0
    for _ in range(cfg.epochs):
        if cfg.accelerated and k > 0:
            y = project(u + (k - 1) / (k + 2) * (u - u_prev))
            ry = evaluate(y)
            if ry is not None:
                cand = project(y - lr * ry.grads["u"])
                new = evaluate(cand)
                if new is not None and new.value <= rec.value:
                    u_prev, u, rec = u, cand, new
                    k += 1
                    history.append(rec.value)
                    continue
            k = 0
        accepted = False
        for _ in range(cfg.max_halvings):
            cand = project(u - lr * rec.grads["u"])
            new = evaluate(cand)
            if new is not None and new.value <= rec.value:
                accepted = True
                break
            lr *= 0.5
        if accepted:
            u_prev, u, rec = u, cand, new
            k += 1
            lr *= cfg.growth
        elif not np.isfinite(rec.value):
            raise FloatingPointError("cost is not finite")
        history.append(rec.value)
    return u, rec, history, lr


def optimize_actions(chain: KinematicChain, cam: CameraModel, phi, theta0, goal: GoalSpec,
                     cfg: MpcConfig | None = None, u0=None) -> MpcResult:
    """Optimize the action sequence from zero actions; see ``descend``."""
    cfg = cfg or MpcConfig()
    theta0 = chain.check_theta(theta0)
    u = np.zeros((cfg.horizon, chain.dof)) if u0 is None else check_actions(u0, chain.dof).copy()

    def fun(x):
        return cost_and_grad(chain, cam, phi, theta0, x, goal, cfg.running_weight, cfg.action_weight)

    initial = fun(u).value
    u, _, history, lr = descend(fun, u, cfg, lambda x: _project_actions(x, theta0, cfg))
    return MpcResult(u, history, rollout(chain, cam, phi, theta0, u), initial, lr)


def rmse_px(z, z_goal) -> float:
    """Root mean square over keypoints and the two pixel components."""
    d = np.asarray(z, dtype=float)[..., :2] - np.asarray(z_goal, dtype=float)[..., :2]
    return float(np.sqrt(np.mean(d * d)))


@dataclass
class Scenario:
    """One placing run: plan with ``phi``, judge with ``phi_true``."""

    chain: KinematicChain
    cam: CameraModel
    phi: np.ndarray
    phi_true: np.ndarray
    theta0: np.ndarray
    z_goal: np.ndarray
    mpc: MpcConfig = field(default_factory=MpcConfig)
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    replan: bool = False
    task_id: str = "task"
    seed: int = 0
    grasp_id: int = 0


@dataclass
class TaskReport:
    task_id: str
    seed: int
    grasp_id: int
    rmse_px: float
    steps: int
    cost_history: list[float]
    u: np.ndarray
    final_theta: np.ndarray
    predicted_rmse_px: float


def run_task(sc: Scenario) -> TaskReport:
    goal = GoalSpec(sc.z_goal, sc.weights)
    if sc.replan:
        theta = np.asarray(sc.theta0, dtype=float)
        applied, history = [], []
        for t in range(sc.mpc.horizon):
            cfg = MpcConfig(**{**sc.mpc.__dict__, "horizon": sc.mpc.horizon - t})
            res = optimize_actions(sc.chain, sc.cam, sc.phi, theta, goal, cfg)
            applied.append(res.u[0])
            history.extend(res.cost_history)
            theta = theta + res.u[0]
        u = np.array(applied)
    else:
        res = optimize_actions(sc.chain, sc.cam, sc.phi, sc.theta0, goal, sc.mpc)
        u, history = res.u, res.cost_history
    final_theta = np.asarray(sc.theta0, dtype=float) + np.cumsum(u, axis=0)[-1]
    z_true = project_chain(sc.cam, sc.chain, final_theta, sc.phi_true)
    z_pred = project_chain(sc.cam, sc.chain, final_theta, sc.phi)
    return TaskReport(sc.task_id, sc.seed, sc.grasp_id, rmse_px(z_true, sc.z_goal),
                      len(history), history, u, final_theta, rmse_px(z_pred, sc.z_goal))
