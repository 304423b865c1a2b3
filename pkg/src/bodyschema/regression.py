"""Regression of virtual-joint translations from keypoint observations."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .camera import CameraModel
from .grad import GradientRecord, linearize_projection
from .keypoints import ObservationDataset
from .kinematics import KinematicChain, as_phi, chain_frames

PLAIN_GD = "plain-gd"
ADAM = "adam"


class RegressionDivergence(FloatingPointError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


def loss_trans(cam: CameraModel, chain: KinematicChain, theta, phi, z_obs,
               weights=(1.0, 1.0, 1.0), scale=(1.0, 1.0, 1.0)) -> GradientRecord:
    """Squared residual between projected virtual joints and observed keypoints.

    Residual components are divided by ``scale`` before squaring; the default
    keeps raw pixel and meter units.
    """
    phi = as_phi(phi)
    z_obs = np.asarray(z_obs, dtype=float).reshape(-1, 3)
    if z_obs.shape[0] != phi.shape[0]:
        raise ValueError(f"{z_obs.shape[0]} observations for {phi.shape[0]} virtual joints")
    lin = linearize_projection(cam, chain_frames(chain, theta), phi, with_theta=False)
    w = np.asarray(weights, dtype=float) / np.asarray(scale, dtype=float) ** 2
    r = lin.obs - z_obs
    g = np.einsum("kc,kcj->kj", 2.0 * w * r, lin.d_phi)
    return GradientRecord(float(np.sum(w * r * r)), {"phi": g})


class DatasetLoss:
    """Mean of ``loss_trans`` over all records, with the chain evaluated once per record."""

    def __init__(self, dataset: ObservationDataset, cam: CameraModel, chain: KinematicChain,
                 weights=(1.0, 1.0, 1.0), scaled: bool = True):
        if len(dataset) == 0:
            raise ValueError("cannot regress on an empty dataset")
        self.cam = cam
        self.frames = [chain_frames(chain, th) for th in dataset.thetas]
        self.z = dataset.keypoints
        self.K = dataset.K
        scale = np.array([cam.fx, cam.fy, 1.0]) if scaled else np.ones(3)
        self.w = np.asarray(weights, dtype=float) / scale**2
        # stack ee frames for a vectorized evaluation
        self.R_ee = np.stack([f.R_ee for f in self.frames])  # (N, 3, 3)
        self.p_ee = np.stack([f.p_ee for f in self.frames])  # (N, 3)
        self.M = cam.R @ self.R_ee                            # (N, 3, 3)
        self.c = self.p_ee @ cam.R.T + cam.extrinsic.translation  # (N, 3)

    def __call__(self, phi) -> GradientRecord:
        phi = as_phi(phi)
        cam = self.cam
        pc = self.c[:, None, :] + np.einsum("nij,kj->nki", self.M, phi)  # (N, K, 3)
        X, Y, Z = pc[..., 0], pc[..., 1], pc[..., 2]
        if np.any(Z <= 1e-6):
            raise FloatingPointError("virtual joint behind the camera")
        obs = np.stack([cam.fx * X / Z + cam.cx, cam.fy * Y / Z + cam.cy, Z], axis=-1)
        r = obs - self.z
        n = r.shape[0]
        value = float(np.sum(self.w * r * r)) / n
        gr = 2.0 * self.w * r / n  # d value / d obs
        # back through the pinhole: d obs / d pc
        gpc = np.empty_like(pc)
        gpc[..., 0] = gr[..., 0] * cam.fx / Z
        gpc[..., 1] = gr[..., 1] * cam.fy / Z
        gpc[..., 2] = (gr[..., 2] - gr[..., 0] * cam.fx * X / Z**2
                       - gr[..., 1] * cam.fy * Y / Z**2)
        g = np.einsum("nki,nij->kj", gpc, self.M)
        return GradientRecord(value, {"phi": g})


@dataclass
class RegressionConfig:
    learning_rate: float = 0.1
    max_steps: int = 2000
    tol: float | None = None
    optimizer: str = PLAIN_GD
    init_phi: np.ndarray | None = None
    scaled: bool = True
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    max_halvings: int = 60

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.tol is not None and self.tol < 0:
            raise ValueError("tol must be non-negative")
        if self.optimizer not in (PLAIN_GD, ADAM):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class RegressionResult:
    phi: np.ndarray
    loss_history: list[float]
    steps_taken: int
    converged: bool
    initial_loss: float
    tol: float
    phi_history: list[np.ndarray] = field(default_factory=list, repr=False)
    evaluations: int = 0

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1] if self.loss_history else self.initial_loss

    def phi_mse(self, truth) -> np.ndarray:
        """Squared distance ||phi - truth||^2 after every step (index 0 = initial)."""
        truth = as_phi(truth)
        return np.array([float(np.sum((p - truth) ** 2)) for p in self.phi_history])


def default_tolerance(dataset: ObservationDataset, cam: CameraModel, scaled: bool = True) -> float:
    """1e-10 for noiseless data, else 1.5x the expected per-record noise floor
    ``K * sum_c sigma_c^2`` (in raw pixel units with negligible depth noise
    this is ``3 K sigma_px^2``)."""
    sp = float(dataset.metadata.get("pixel_noise_sigma", 0.0))
    sd = float(dataset.metadata.get("depth_noise_sigma", 0.0))
    if sp == 0.0 and sd == 0.0:
        return 1e-10
    sx, sy = (cam.fx, cam.fy) if scaled else (1.0, 1.0)
    return 1.5 * dataset.K * ((sp / sx) ** 2 + (sp / sy) ** 2 + sd**2)


def regress(dataset: ObservationDataset, cam: CameraModel, chain: KinematicChain,
            cfg: RegressionConfig | None = None) -> RegressionResult:
    """Full-batch gradient descent on the mean translation loss.

    Plain GD halves the step until the loss does not increase, so the loss
    history is non-increasing.
    """
    cfg = cfg or RegressionConfig()
    f = DatasetLoss(dataset, cam, chain, cfg.weights, cfg.scaled)
    tol = default_tolerance(dataset, cam, cfg.scaled) if cfg.tol is None else cfg.tol
    phi = np.zeros((dataset.K, 3)) if cfg.init_phi is None else as_phi(cfg.init_phi).copy()
    if phi.shape[0] != dataset.K:
        raise ValueError(f"init_phi has {phi.shape[0]} joints, dataset has {dataset.K} keypoints")

    try:
        rec = f(phi)
    except FloatingPointError as e:
        raise RegressionDivergence(f"step 0: {e}", 0) from e
    evals = 1
    result = RegressionResult(phi.copy(), [], 0, rec.value <= tol, rec.value, tol, [phi.copy()])
    if result.converged:
        result.evaluations = evals
        return result

    lr = cfg.learning_rate
    m = np.zeros_like(phi)
    v = np.zeros_like(phi)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for step in range(1, cfg.max_steps + 1):
        g = rec.grads["phi"]
        if cfg.optimizer == ADAM:
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**step)
            vhat = v / (1 - b2**step)
            cand = phi - lr * mhat / (np.sqrt(vhat) + eps)
            try:
                new = f(cand)
            except FloatingPointError as e:
                raise RegressionDivergence(f"step {step}: {e}", step) from e
            evals += 1
        else:
            for _ in range(cfg.max_halvings):
                cand = phi - lr * g
                try:
                    new = f(cand)
                    evals += 1
                except FloatingPointError:
                    new = None
                if new is not None and new.value <= rec.value:
                    break
                lr *= 0.5
            else:
                if not np.isfinite(rec.value):
                    raise RegressionDivergence(f"loss not finite at step {step}", step)
                break  # no decrease possible: stalled at a minimum
        phi, rec = cand, new
        result.loss_history.append(rec.value)
        result.phi_history.append(phi.copy())
        result.steps_taken = step
        if rec.value <= tol:
            result.converged = True
            break
    result.phi = phi
    result.evaluations = evals
    return result


def regrasp_adapt(prev: RegressionResult, new_dataset: ObservationDataset, cam: CameraModel,
                  chain: KinematicChain, cfg: RegressionConfig | None = None) -> RegressionResult:
    """Regression on a new grasp, warm-started from the previous estimate."""
    cfg = cfg or RegressionConfig()
    if as_phi(prev.phi).shape[0] != new_dataset.K:
        raise ValueError("new grasp must keep the number of keypoints")
    warm = RegressionConfig(**{**cfg.__dict__, "init_phi": np.array(prev.phi, copy=True)})
    return regress(new_dataset, cam, chain, warm)


def linearized_covariance(dataset: ObservationDataset, cam: CameraModel, chain: KinematicChain,
                          phi, pixel_sigma: float, depth_sigma: float) -> np.ndarray:
    """Gauss-Newton covariance (3K x 3K) of the least-squares estimate at ``phi``
    under independent Gaussian keypoint noise."""
    phi = as_phi(phi)
    K = phi.shape[0]
    info = np.zeros((3 * K, 3 * K))
    inv_var = 1.0 / np.array([pixel_sigma**2, pixel_sigma**2, depth_sigma**2])
    for th in dataset.thetas:
        lin = linearize_projection(cam, chain_frames(chain, th), phi, with_theta=False)
        for k in range(K):
            J = lin.d_phi[k]
            info[3 * k:3 * k + 3, 3 * k:3 * k + 3] += J.T @ (inv_var[:, None] * J)
    return np.linalg.inv(info)


def write_regression_report(result: RegressionResult, out_dir, truth=None, header: str = "") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "phi": [[float(v) for v in row] for row in as_phi(result.phi)],
        "converged": bool(result.converged),
        "steps_taken": int(result.steps_taken),
        "initial_loss": float(result.initial_loss),
        "final_loss": float(result.final_loss),
        "tol": float(result.tol),
    }
    (out / "regression.yaml").write_text(header_comment(header) + yaml.safe_dump(doc, sort_keys=False),
                                         encoding="utf-8")
    buf = io.StringIO()
    if header:
        buf.write(header_comment(header))
    w = csv.writer(buf, lineterminator="\n")
    mse = result.phi_mse(truth) if truth is not None else None
    w.writerow(["step", "loss"] + (["phi_mse"] if mse is not None else []))
    losses = [result.initial_loss] + list(result.loss_history)
    for i, loss in enumerate(losses):
        row = [str(i), format(loss, ".17g")]
        if mse is not None:
            row.append(format(mse[i], ".17g"))
        w.writerow(row)
    (out / "loss_history.csv").write_text(buf.getvalue(), encoding="utf-8")


def header_comment(header: str) -> str:
    return "".join(f"# {line}\n" for line in header.splitlines()) if header else ""


def load_phi(path) -> np.ndarray:
    """Read ``phi`` from a regression report (a file or the directory holding one)."""
    path = Path(path)
    if path.is_dir():
        path = path / "regression.yaml"
    if not path.is_file():
        raise FileNotFoundError(f"regression report not found: {path}")
    doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    return as_phi(doc["phi"])
