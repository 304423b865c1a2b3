"""Experiment protocols built from an ``ExperimentConfig``.

Every random stream is seeded from ``derive_seed(master_seed, scenario id)``
so that runs are reproducible and independent of execution order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .baseline import (DynDataset, MlpModel, PredictorSpec, TrainHistory, compare_long_horizon,
                       gen_sine_data, held_out_nmse, mlp_optimize_actions, train_dynamics,
                       true_keypoints)
from .camera import BehindCameraError, project_chain, project_ee
from .config import ExperimentConfig
from .control import MpcConfig, Scenario, TaskReport, rmse_px, run_task
from .keypoints import ObservationDataset, OracleDetector, SamplingError, gen_dataset, observe
from .regression import RegressionConfig, RegressionResult, regress, regrasp_adapt
from .scene import JointSampler, derive_seed

RECOVERY_TARGET = 1e-6

# id -> (keypoint dims, detector keypoints off the object)
BASELINE_VARIANTS = {"a": (2, True), "b": (3, True), "c": (2, False), "d": (3, False)}


def scenario_seed(cfg: ExperimentConfig, *parts) -> int:
    return derive_seed(cfg.master_seed, "/".join(str(p) for p in parts))


def make_detector(cfg: ExperimentConfig, truth, seed: int, noisy: bool = True,
                  off_object_px: float = 0.0) -> OracleDetector:
    return OracleDetector(truth, cfg.pixel_sigma if noisy else 0.0,
                          cfg.depth_sigma if noisy else 0.0, seed, off_object_px)


def observation_dataset(cfg: ExperimentConfig, obj: str, seed: int, grasp: int = 0,
                        noisy: bool = False, n: int | None = None, tag: str = "obs") -> ObservationDataset:
    sid = scenario_seed(cfg, tag, obj, grasp, seed, "noisy" if noisy else "exact")
    det = make_detector(cfg, cfg.phi_true(obj, grasp), sid, noisy)
    ds = gen_dataset(det, cfg.camera, cfg.chain, cfg.n_configs if n is None else n, cfg.sampler)
    ds.metadata.update({"object": obj, "grasp": grasp, "scenario_seed": seed})
    return ds


def steps_to_target(result: RegressionResult, truth, target: float = RECOVERY_TARGET) -> int | None:
    """First step at which ``||phi - truth||^2 < target``, or None if never."""
    hits = np.flatnonzero(result.phi_mse(truth) < target)
    return int(hits[0]) if hits.size else None


def _sequence_dataset(cfg: ExperimentConfig, det: OracleDetector, n_seq: int, frames: int,
                      make_path, rng: np.random.Generator) -> ObservationDataset:
    """Concatenated in-view sequences; ``make_path(theta0, rng)`` gives the joint path."""
    truth = det.truth
    thetas, kps = [], []
    draws = 0
    budget = n_seq * cfg.sampler.max_oversampling
    while len(thetas) < n_seq * frames:
        if draws >= budget:
            raise SamplingError(f"only {len(thetas) // frames}/{n_seq} in-view sequences after "
                                f"{draws} draws; {cfg.sampler.describe()}")
        draws += 1
        path = make_path(cfg.sampler.draw(rng), rng)
        try:
            ok = all(cfg.sampler.accepts(cfg.camera, np.vstack([
                project_chain(cfg.camera, cfg.chain, th, truth), project_ee(cfg.camera, cfg.chain, th)]))
                for th in path)
        except BehindCameraError:
            ok = False
        if ok:
            thetas.extend(path)
            kps.extend(observe(det, cfg.camera, cfg.chain, th) for th in path)
    meta = {"seed": det.rng_seed, "pixel_noise_sigma": det.pixel_noise_sigma,
            "depth_noise_sigma": det.depth_noise_sigma, "sequences": n_seq,
            "sequence_length": frames, "draws": draws}
    return ObservationDataset(np.array(thetas), np.array(kps), meta)


def sim_protocol_dataset(cfg: ExperimentConfig, seed: int, n_configs: int = 60, rate_hz: float = 5.0,
                         duration_s: float = 5.0, wrist_amplitude: float = 0.3) -> ObservationDataset:
    """Random start configurations, then only the wrist (last three joints) moves
    sinusoidally, sampled at ``rate_hz`` for ``duration_s``."""
    frames = int(round(rate_hz * duration_s))
    t = np.arange(frames)[:, None] / rate_hz
    dof = cfg.chain.dof

    def path(theta0, rng):
        freq = rng.uniform(0.1, 0.4, size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
        p = np.repeat(theta0[None, :], frames, axis=0)
        p[:, dof - 3:] += wrist_amplitude * (np.sin(2 * np.pi * freq * t + phase) - np.sin(phase))
        return list(p)

    sid = scenario_seed(cfg, "gen-data", "sim", seed)
    det = make_detector(cfg, cfg.phi_true(), sid)
    ds = _sequence_dataset(cfg, det, n_configs, frames, path, np.random.default_rng(sid))
    ds.metadata.update({"protocol": "sim", "rate_hz": rate_hz, "object": cfg.placing_object})
    return ds


def hardware_protocol_dataset(cfg: ExperimentConfig, seed: int, n_seq: int = 50,
                              frames: int = 10) -> ObservationDataset:
    """Short random-action sequences from random start configurations."""
    step = float(cfg.baseline["random_step"])
    dof = cfg.chain.dof

    def path(theta0, rng):
        u = rng.uniform(-step, step, size=(frames - 1, dof))
        return list(theta0 + np.vstack([np.zeros(dof), np.cumsum(u, axis=0)]))

    sid = scenario_seed(cfg, "gen-data", "hardware", seed)
    det = make_detector(cfg, cfg.phi_true(), sid)
    ds = _sequence_dataset(cfg, det, n_seq, frames, path, np.random.default_rng(sid))
    ds.metadata.update({"protocol": "hardware", "object": cfg.placing_object})
    return ds


# -- ground-truth recovery --------------------------------------------------

@dataclass
class RecoveryRun:
    obj: str
    seed: int
    grasp: int
    result: RegressionResult
    truth: np.ndarray

    @property
    def steps(self) -> int | None:
        return steps_to_target(self.result, self.truth)

    @property
    def final_mse(self) -> float:
        return float(self.result.phi_mse(self.truth)[-1])


def _recovery_cfg(cfg: ExperimentConfig, noisy: bool) -> RegressionConfig:
    # noiseless data: run until the parameter target is met, not just the loss tolerance
    return RegressionConfig(**{**cfg.regression.__dict__,
                               "tol": cfg.regression.tol if noisy else 0.0})


def run_recovery(cfg: ExperimentConfig, objects=None, seeds=None, noisy: bool = False) -> list[RecoveryRun]:
    runs = []
    rcfg = _recovery_cfg(cfg, noisy)
    for obj in objects or list(cfg.objects):
        for seed in cfg.seeds if seeds is None else seeds:
            ds = observation_dataset(cfg, obj, seed, 0, noisy, tag="recovery")
            truth = cfg.phi_true(obj, 0)
            res = regress(ds, cfg.camera, cfg.chain, rcfg)
            runs.append(RecoveryRun(obj, seed, 0, res, truth))
    return runs


# -- re-grasping --------------------------------------------------------------

@dataclass
class RegraspRun:
    obj: str
    seed: int
    grasp: int
    warm: RegressionResult
    cold: RegressionResult
    truth: np.ndarray

    @property
    def warm_steps(self) -> int | None:
        return steps_to_target(self.warm, self.truth)

    @property
    def cold_steps(self) -> int | None:
        return steps_to_target(self.cold, self.truth)


def run_regrasp(cfg: ExperimentConfig, obj: str | None = None, seeds=None) -> list[RegraspRun]:
    """Adapt to every grasp after the first, warm-started from the previous one."""
    obj = obj or cfg.placing_object
    rcfg = _recovery_cfg(cfg, False)
    runs = []
    for seed in cfg.seeds if seeds is None else seeds:
        ds = observation_dataset(cfg, obj, seed, 0, tag="regrasp")
        prev = regress(ds, cfg.camera, cfg.chain, rcfg)
        for g in range(1, len(cfg.grasps)):
            ds = observation_dataset(cfg, obj, seed, g, tag="regrasp")
            warm = regrasp_adapt(prev, ds, cfg.camera, cfg.chain, rcfg)
            cold = regress(ds, cfg.camera, cfg.chain, rcfg)
            runs.append(RegraspRun(obj, seed, g, warm, cold, cfg.phi_true(obj, g)))
            prev = warm
    return runs


# -- visual placing -------------------------------------------------------------

@dataclass
class PlacingRun:
    model_id: str
    report: TaskReport
    wall_time: float


def regressed_phi(cfg: ExperimentConfig, seed: int, grasp: int = 0, noisy: bool = True) -> np.ndarray:
    """Virtual joints of the placing object regressed from (noisy) observations."""
    ds = observation_dataset(cfg, cfg.placing_object, seed, grasp, noisy, tag="placing")
    return regress(ds, cfg.camera, cfg.chain, cfg.regression).phi


def goal_keypoints(cfg: ExperimentConfig, theta_goal, grasp: int = 0) -> np.ndarray:
    return project_chain(cfg.camera, cfg.chain, theta_goal, cfg.phi_true(None, grasp))


PHI_SOURCES = ("noisy", "exact", "oracle")


def run_placing(cfg: ExperimentConfig, phi_source: str = "noisy", seeds=None, grasps=None,
                tasks=None, mpc: MpcConfig | None = None) -> list[PlacingRun]:
    """Kinematic placing with virtual joints regressed from noisy or noiseless
    observations, or set to the ground truth (``oracle``)."""
    if phi_source not in PHI_SOURCES:
        raise ValueError(f"phi source must be one of {PHI_SOURCES}, got {phi_source!r}")
    runs = []
    tasks = cfg.tasks if tasks is None else tasks
    grasps = range(len(cfg.grasps)) if grasps is None else grasps
    for seed in cfg.seeds if seeds is None else seeds:
        for g in grasps:
            if phi_source == "oracle":
                phi = cfg.phi_true(None, g)
            else:
                phi = regressed_phi(cfg, seed, g, phi_source == "noisy")
            for task in tasks:
                sc = Scenario(cfg.chain, cfg.camera, phi, cfg.phi_true(None, g), task.start,
                              goal_keypoints(cfg, task.goal, g), mpc or cfg.mpc, cfg.goal_weights,
                              task_id=task.task_id, seed=seed, grasp_id=g)
                t0 = time.perf_counter()
                rep = run_task(sc)
                runs.append(PlacingRun("kinematic", rep, time.perf_counter() - t0))
    return runs


def summarize(values) -> tuple[float, float]:
    v = np.asarray(list(values), dtype=float)
    return float(np.mean(v)), float(np.std(v))


# -- black-box baselines --------------------------------------------------------

@dataclass
class BaselineFit:
    model_id: str
    model: MlpModel
    history: TrainHistory
    detector: OracleDetector
    test_nmse: float


def baseline_detector(cfg: ExperimentConfig, variant: str, seed: int, noisy: bool = True) -> OracleDetector:
    _, off = BASELINE_VARIANTS[variant]
    return make_detector(cfg, cfg.phi_true(None, 0), seed, noisy,
                         float(cfg.baseline["off_object_px"]) if off else 0.0)


def baseline_data(cfg: ExperimentConfig, variant: str) -> DynDataset:
    b = cfg.baseline
    traj_seed = scenario_seed(cfg, "baseline", "trajectory")
    det = baseline_detector(cfg, variant, scenario_seed(cfg, "baseline", "detector", variant))
    return gen_sine_data(cfg.chain, cfg.camera, det, int(b["n"]), cfg.home, float(b["amplitude"]),
                         tuple(b["freq_range"]), float(b["dt"]), traj_seed)


def train_baselines(cfg: ExperimentConfig, variants=None, epochs: int | None = None) -> dict[str, BaselineFit]:
    b = cfg.baseline
    fits = {}
    for v in variants or list(BASELINE_VARIANTS):
        dims, _ = BASELINE_VARIANTS[v]
        data = baseline_data(cfg, v)
        model, hist = train_dynamics(data, dims, tuple(b["hidden"]), str(b["activation"]),
                                     int(b["epochs"] if epochs is None else epochs), float(b["lr"]),
                                     float(b["momentum"]), int(b["batch"]),
                                     scenario_seed(cfg, "baseline", "init", v))
        det = baseline_detector(cfg, v, 0, noisy=False)
        fits[v] = BaselineFit(v, model, hist, det, held_out_nmse(model, data))
    return fits


def run_placing_baseline(cfg: ExperimentConfig, fit: BaselineFit, seeds=None, tasks=None,
                         mpc: MpcConfig | None = None) -> list[PlacingRun]:
    """Closed-loop placing with the MLP: re-plan the remaining horizon from every
    (noisy) observation and apply the first action. Planning happens in the
    model's own keypoint space; the result is judged on the true keypoints."""
    mpc = mpc or baseline_mpc(cfg)
    tasks = cfg.tasks if tasks is None else tasks
    truth = cfg.phi_true(None, 0)
    runs = []
    for seed in cfg.seeds if seeds is None else seeds:
        for task in tasks:
            det = fit.detector.spawn(scenario_seed(cfg, "placing-baseline", fit.model_id, task.task_id, seed),
                                     pixel_noise_sigma=cfg.pixel_sigma, depth_noise_sigma=cfg.depth_sigma)
            zg = true_keypoints(det, cfg.camera, cfg.chain, [task.goal])[0]
            theta = np.array(task.start, dtype=float)
            applied = []
            t0 = time.perf_counter()
            for t in range(mpc.horizon):
                try:
                    z = observe(det, cfg.camera, cfg.chain, theta)
                    step_cfg = MpcConfig(**{**mpc.__dict__, "horizon": mpc.horizon - t})
                    u = mlp_optimize_actions(fit.model, theta, z, zg, step_cfg, cfg.goal_weights)[0]
                except (FloatingPointError, BehindCameraError):
                    u = np.zeros(cfg.chain.dof)
                applied.append(u)
                theta = theta + u
            try:
                err = rmse_px(project_chain(cfg.camera, cfg.chain, theta, truth), goal_keypoints(cfg, task.goal))
            except BehindCameraError:
                err = float("inf")
            rep = TaskReport(task.task_id, seed, 0, err, mpc.horizon * mpc.epochs, [], np.array(applied),
                             theta, float("nan"))
            runs.append(PlacingRun(fit.model_id, rep, time.perf_counter() - t0))
    return runs


def baseline_mpc(cfg: ExperimentConfig) -> MpcConfig:
    b = cfg.baseline
    return MpcConfig(horizon=cfg.mpc.horizon, epochs=int(b["placing_epochs"]),
                     learning_rate=cfg.mpc.learning_rate, growth=float(b["placing_growth"]))


# -- long-horizon prediction ------------------------------------------------------

def random_sequences(cfg: ExperimentConfig, n: int | None = None, horizon: int | None = None,
                     step: float | None = None) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """In-view start configurations with uniformly random bounded actions."""
    n = int(cfg.baseline["random_sequences"]) if n is None else n
    T = cfg.mpc.horizon if horizon is None else horizon
    step = float(cfg.baseline["random_step"]) if step is None else step
    rng = np.random.default_rng(scenario_seed(cfg, "horizon", "random"))
    # starts stay inside the region covered by the training trajectories
    amp = float(cfg.baseline["amplitude"])
    sampler = JointSampler(tuple(cfg.home), tuple(np.full(cfg.chain.dof, 0.5 * amp)),
                           cfg.sampler.margin_px, cfg.sampler.depth_range)
    truth = cfg.phi_true(None, 0)
    starts, seqs = [], []
    while len(starts) < n:
        theta0 = sampler.draw(rng)
        u = rng.uniform(-step, step, size=(T, cfg.chain.dof))
        thetas = theta0 + np.vstack([np.zeros(cfg.chain.dof), np.cumsum(u, axis=0)])
        try:
            ok = all(sampler.accepts(cfg.camera, project_chain(cfg.camera, cfg.chain, th, truth))
                     for th in thetas)
        except BehindCameraError:
            ok = False
        if ok:
            starts.append(theta0)
            seqs.append(u)
    return starts, seqs


def task_sequences(runs: list[PlacingRun], cfg: ExperimentConfig) -> tuple[list[np.ndarray], list[np.ndarray]]:
    starts = {t.task_id: t.start for t in cfg.tasks}
    kin = [r for r in runs if r.model_id == "kinematic"]
    return [starts[r.report.task_id] for r in kin], [r.report.u for r in kin]


def horizon_predictors(cfg: ExperimentConfig, fits: dict[str, BaselineFit], phi) -> list[PredictorSpec]:
    kin = make_detector(cfg, cfg.phi_true(None, 0), 0, noisy=False)
    specs = [PredictorSpec("kinematic", kin, None, np.asarray(phi)),
             PredictorSpec("kinematic-exact", kin, None, cfg.phi_true(None, 0))]
    specs += [PredictorSpec(v, f.detector, f.model) for v, f in sorted(fits.items())]
    return specs


def run_horizon(cfg: ExperimentConfig, fits: dict[str, BaselineFit], phi, starts, seqs):
    return compare_long_horizon(horizon_predictors(cfg, fits, phi), cfg.chain, cfg.camera,
                                starts, seqs)
