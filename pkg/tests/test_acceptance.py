"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or directly as ``python3 tests/test_acceptance.py``.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

from bodyschema import experiments as ex
from bodyschema.camera import project_chain, project_ee
from bodyschema.cli import TIMING_FILE, main
from bodyschema.control import GoalSpec, cost_and_grad
from bodyschema.grad import finite_difference_check, grad_projection_wrt_phi, grad_projection_wrt_theta
from bodyschema.keypoints import (OracleDetector, gen_dataset, kinematic_consistency_grad,
                                  kinematic_consistency_loss, kinematic_feature_map, rasterize)
from bodyschema.regression import loss_trans

sys.path.insert(0, str(Path(__file__).parent))
from conftest import ACCEPTANCE, write_small_config  # noqa: E402

N_GRAD = 100
GRAD_TOL = 1e-5


def record(n: int, ok: bool, line: str) -> None:
    ACCEPTANCE[n] = (bool(ok), line)
    print(f"[{'PASS' if ok else 'FAIL'}] {n}. {line}")


@pytest.fixture(scope="module")
def cfg(experiment):
    return experiment


@pytest.fixture(scope="module")
def noisy_placing(cfg):
    t0 = time.perf_counter()
    runs = ex.run_placing(cfg, "noisy")
    return runs, time.perf_counter() - t0


def test_1_gradients(cfg):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    chain, cam = cfg.chain, cfg.camera
    truth = cfg.phi_true()
    # in-view configurations from the default sampler
    thetas = gen_dataset(OracleDetector(truth), cam, chain, N_GRAD, cfg.sampler).thetas
    worst = {"proj_phi": 0.0, "proj_theta": 0.0, "l_kin": 0.0, "l_trans": 0.0, "cost_u": 0.0}
    scale = (cam.fx, cam.fy, 1.0)
    for i, th in enumerate(thetas):
        phi = truth + rng.normal(0, 0.01, truth.shape)
        fp = lambda p: project_chain(cam, chain, th, p.reshape(-1, 3)).reshape(-1)  # noqa: E731
        ft = lambda t: project_chain(cam, chain, t, phi).reshape(-1)  # noqa: E731
        worst["proj_phi"] = max(worst["proj_phi"], finite_difference_check(
            fp, phi.reshape(-1), grad_projection_wrt_phi(cam, chain, th, phi)))
        worst["proj_theta"] = max(worst["proj_theta"], finite_difference_check(
            ft, th, grad_projection_wrt_theta(cam, chain, th, phi)))

        z = project_chain(cam, chain, th, phi)
        ee = project_ee(cam, chain, th)
        kin = kinematic_consistency_grad(z, ee)
        worst["l_kin"] = max(worst["l_kin"],
                             finite_difference_check(lambda x: kinematic_consistency_loss(x, ee), z,
                                                     kin.grads["keypoints"]),
                             finite_difference_check(lambda x: kinematic_consistency_loss(z, x), ee,
                                                     kin.grads["ee"]))

        z_obs = project_chain(cam, chain, th, truth) + rng.normal(0, [2.0, 2.0, 0.005], truth.shape)
        sc = scale if i % 2 else (1.0, 1.0, 1.0)
        lt = loss_trans(cam, chain, th, phi, z_obs, scale=sc)
        worst["l_trans"] = max(worst["l_trans"], finite_difference_check(
            lambda p: loss_trans(cam, chain, th, p, z_obs, scale=sc).value, phi, lt.grads["phi"]))

        u = rng.uniform(-0.02, 0.02, (cfg.mpc.horizon, chain.dof))
        goal = GoalSpec(project_chain(cam, chain, th + rng.uniform(-0.1, 0.1, chain.dof), phi))
        # running and action terms on every fourth sample; they cost 10 projections per evaluation
        running, action = (0.2, 10.0) if i % 4 == 1 else (0.0, 0.0)
        rec = cost_and_grad(chain, cam, phi, th, u, goal, running, action)
        worst["cost_u"] = max(worst["cost_u"], finite_difference_check(
            lambda x: cost_and_grad(chain, cam, phi, th, x, goal, running, action).value, u, rec.grads["u"]))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < GRAD_TOL and elapsed < 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(1, ok, f"gradients at {len(thetas)} in-view samples, worst relative error: {detail}; "
                  f"{elapsed:.1f} s")
    assert ok


def test_2_recovery(cfg):
    t0 = time.perf_counter()
    runs = ex.run_recovery(cfg)
    elapsed = time.perf_counter() - t0
    steps = [r.steps for r in runs]
    zero_init = all(np.all(r.result.phi_history[0] == 0) for r in runs)
    monotone = all(np.all(np.diff([r.result.initial_loss] + r.result.loss_history) <= 0) for r in runs)
    ok = (len(runs) == 15 and zero_init and monotone and all(s is not None and s <= 500 for s in steps)
          and elapsed < 60.0)
    record(2, ok, f"recovery in {len(runs)} runs: steps to 1e-6 m^2 between "
                  f"{min(s for s in steps if s is not None)} and {max(s or 10**9 for s in steps)}, "
                  f"monotone loss {monotone}; {elapsed:.1f} s")
    assert ok


def test_3_pose_generalization(cfg):
    runs = ex.run_recovery(cfg)
    worst_px = worst_depth = 0.0
    for r in runs:
        held = ex.observation_dataset(cfg, r.obj, r.seed, 0, noisy=False, n=10, tag="held-out")
        for th, z in zip(held.thetas, held.keypoints):
            pred = project_chain(cfg.camera, cfg.chain, th, r.result.phi)
            worst_px = max(worst_px, float(np.max(np.linalg.norm(pred[:, :2] - z[:, :2], axis=1))))
            worst_depth = max(worst_depth, float(np.max(np.abs(pred[:, 2] - z[:, 2]))))
    ok = worst_px < 0.5 and worst_depth < 1e-3
    record(3, ok, f"held-out poses ({len(runs)} fits x 10): worst {worst_px:.2e} px, "
                  f"{worst_depth * 1e3:.2e} mm depth")
    assert ok


def test_4_regrasp(cfg):
    runs = ex.run_regrasp(cfg)
    shifts = [float(np.linalg.norm(g)) for g in cfg.grasps[1:]]
    err = max(float(np.max(np.linalg.norm(r.warm.phi - r.truth, axis=1))) for r in runs)
    faster = {g: sum(r.warm_steps < r.cold_steps for r in runs if r.grasp == g)
              for g in range(1, len(cfg.grasps))}
    n_seeds = len(cfg.seeds)
    ok = (all(0.01 <= s <= 0.05 for s in shifts) and err < 1e-3
          and all(f >= 4 for f in faster.values()) and n_seeds == 5)
    record(4, ok, f"re-grasp shifts {', '.join(f'{s * 100:g} cm' for s in shifts)}: worst error "
                  f"{err:.1e} m, warm faster in {'/'.join(str(f) for f in faster.values())} of "
                  f"{n_seeds} seeds")
    assert ok


def test_5_placing(cfg, noisy_placing):
    runs, t_noisy = noisy_placing
    t0 = time.perf_counter()
    oracle = ex.run_placing(cfg, "oracle", seeds=cfg.seeds[:1])
    elapsed = t_noisy + time.perf_counter() - t0
    means = {t.task_id: ex.summarize([r.report.rmse_px for r in runs if r.report.task_id == t.task_id])
             for t in cfg.tasks}
    worst_oracle = max(r.report.rmse_px for r in oracle)
    ok = (len(runs) == 60 and all(m <= 5.0 for m, _ in means.values()) and worst_oracle < 0.1
          and elapsed < 300.0)
    cells = ", ".join(f"{k} {m:.2f} ({s:.2f})" for k, (m, s) in means.items())
    record(5, ok, f"placing RMSE px over {len(runs)} noisy runs: {cells}; exact model worst "
                  f"{worst_oracle:.1e} px over {len(oracle)} runs; {elapsed:.0f} s")
    assert ok


def test_6_baseline_gap(cfg, noisy_placing, baseline_fits):
    runs, _ = noisy_placing
    fits = baseline_fits
    nmse = {v: f.test_nmse for v, f in fits.items()}
    phi = ex.regressed_phi(cfg, cfg.seeds[0], 0, noisy=True)
    starts, seqs = ex.task_sequences([r for r in runs if r.report.grasp_id == 0], cfg)
    rows = ex.run_horizon(cfg, fits, phi, starts, seqs)
    curve = {}
    for step, mid, mean, _ in rows:
        curve.setdefault(mid, []).append(mean)
    kin10 = curve["kinematic"][-1]
    gaps = {v: curve[v][-1] / kin10 for v in fits}
    monotone = all(np.all(np.diff(curve[v]) >= 0) for v in fits)
    exact_zero = all(e == 0.0 for e in curve["kinematic-exact"])
    ok = (all(n < 0.1 for n in nmse.values()) and all(g >= 10 for g in gaps.values())
          and monotone and exact_zero)
    record(6, ok, "baselines " + ", ".join(f"{v}: NMSE {nmse[v]:.3f} gap {gaps[v]:.0f}x" for v in fits)
           + f" (kinematic {kin10:.2f} px at step 10 over {len(seqs)} sequences); "
           f"MLP error non-decreasing {monotone}; exact kinematic error 0 {exact_zero}")
    assert ok


def test_7_lkin_and_heatmap(cfg):
    ee = np.array([320.0, 240.0, 1.5])
    zero_iff = (kinematic_consistency_loss([ee, ee, ee], ee) == 0.0
                and kinematic_consistency_loss([ee + [0, 0, 1e-3]], ee) > 0.0
                and kinematic_consistency_loss([ee + [1e-3, 0, 0]], ee) > 0.0)
    hand = kinematic_consistency_loss([[4.0, 6.0, 3.0]], [1.0, 2.0, 3.0])
    sigma = 5.0
    hm = kinematic_feature_map(cfg.camera, cfg.chain, cfg.home, sigma)
    u, v = rasterize(project_ee(cfg.camera, cfg.chain, cfg.home))
    peak = hm.grid[v, u]
    at_sigma = [hm.grid[v, u + 5], hm.grid[v, u - 5], hm.grid[v + 5, u], hm.grid[v - 5, u]]
    ok = (zero_iff and hand == 25.0 and peak == 1.0 and float(hm.grid.max()) == 1.0
          and np.allclose(at_sigma, np.exp(-0.5), rtol=0, atol=1e-15))
    record(7, ok, f"L_kin zero iff coincident {zero_iff}, hand case {hand}; heatmap peak {peak} at "
                  f"ee pixel ({u}, {v}), {at_sigma[0]:.6f} at radius sigma")
    assert ok


def _pipeline(config, out):
    steps = [["gen-data", "--preset", "all"], ["regress", "--preset", "recovery"],
             ["regress", "--preset", "regrasp"],
             ["regress", "--dataset", str(out / "obs_box_s0_noisy.csv")],
             ["train-dyn"], ["mpc", "--models", str(out)], ["eval-horizon", "--models", str(out)],
             ["report"]]
    for argv in steps:
        code = main(argv + ["--config", str(config), "--out", str(out)])
        if code != 0:
            raise AssertionError(f"{argv[0]} exited with {code}")
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())
            if p.suffix in (".csv", ".md", ".yaml", ".json") and p.name != TIMING_FILE}


def test_8_determinism(tmp_path):
    config = write_small_config(tmp_path / "small.yaml")
    a = _pipeline(config, tmp_path / "run1")
    b = _pipeline(config, tmp_path / "run2")
    differing = sorted(n for n in a if a[n] != b.get(n))
    n_csv = sum(n.endswith(".csv") for n in a)
    ok = set(a) == set(b) and not differing and n_csv >= 20
    record(8, ok, f"two pipeline runs under one master seed: {len(a)} result files ({n_csv} CSV), "
                  f"{len(differing)} differ" + (f": {differing}" if differing else ""))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
