import json

import numpy as np
import pytest

from bodyschema import experiments as ex
from bodyschema.config import load_experiment
from bodyschema.outputs import atomic_write, csv_text, read_csv, update_sidecar
from bodyschema.scene import ConfigError
from conftest import write_small_config


@pytest.fixture
def small(small_config):
    return load_experiment(small_config)


def test_packaged_experiment(experiment):
    assert experiment.chain.dof == 7 and len(experiment.objects) == 3
    assert len(experiment.grasps) == 4 and experiment.seeds == [0, 1, 2, 3, 4]
    assert [t.task_id for t in experiment.tasks] == ["task1", "task2", "task3"]
    assert experiment.mpc.horizon == 10
    np.testing.assert_array_equal(experiment.phi_true("box", 3)[:, 2], [0.10, 0.10, 0.14])


def test_overrides_and_hash(small_config, tmp_path):
    a = load_experiment(small_config)
    b = load_experiment(small_config, {"master_seed": 5})
    c = load_experiment(small_config, {"output": str(tmp_path / "elsewhere")})
    assert b.master_seed == 5 and a.config_hash() != b.config_hash()
    assert a.config_hash() == c.config_hash() and len(a.config_hash()) == 16
    assert load_experiment(small_config, {"noise": {"pixel_sigma": 2.0}}).depth_sigma == a.depth_sigma


@pytest.mark.parametrize("change", [{"schema_version": 2}, {"seeds": []},
                                    {"placing_object": "cup"}, {"home": [0.0, 1.0]},
                                    {"regression": {"n_configs": 0}}])
def test_invalid_configs(tmp_path, change):
    with pytest.raises(ConfigError):
        load_experiment(write_small_config(tmp_path / "c.yaml", **change))


def test_scenario_seed_is_frozen(experiment):
    # sha256("2021/recovery/box/0/0/exact"), first 8 bytes little-endian
    assert ex.scenario_seed(experiment, "recovery", "box", 0, 0, "exact") == 5381310339550013583


def test_datasets_do_not_depend_on_other_scenarios(small):
    first = ex.observation_dataset(small, "box", 1, noisy=True)
    ex.observation_dataset(small, "bottle", 0, noisy=True)
    again = ex.observation_dataset(small, "box", 1, noisy=True)
    np.testing.assert_array_equal(first.keypoints, again.keypoints)
    other = ex.observation_dataset(small, "box", 0, noisy=True)
    assert not np.array_equal(first.thetas, other.thetas)


def test_sim_protocol_moves_only_the_wrist(small):
    ds = ex.sim_protocol_dataset(small, 0, n_configs=4)
    assert len(ds) == 4 * 25
    seqs = ds.thetas.reshape(4, 25, 7)
    np.testing.assert_array_equal(seqs[:, :, :4], np.repeat(seqs[:, :1, :4], 25, axis=1))
    assert np.all(np.ptp(seqs[:, :, 4:], axis=1) > 0)
    assert np.all(small.camera.in_image(ds.keypoints.reshape(-1, 3)))


def test_hardware_protocol_steps_are_bounded(small):
    ds = ex.hardware_protocol_dataset(small, 0, n_seq=3)
    steps = np.diff(ds.thetas.reshape(3, 10, 7), axis=1)
    assert np.max(np.abs(steps)) <= small.baseline["random_step"]


def test_steps_to_target(small):
    run = ex.run_recovery(small, objects=["box"], seeds=[0])[0]
    s = run.steps
    mse = run.result.phi_mse(run.truth)
    assert mse[s] < ex.RECOVERY_TARGET <= mse[s - 1]


def test_placing_phi_sources(small):
    task = small.tasks[:1]
    with pytest.raises(ValueError):
        ex.run_placing(small, "guess")
    oracle = ex.run_placing(small, "oracle", seeds=[0], grasps=[0], tasks=task)
    noisy = ex.run_placing(small, "noisy", seeds=[0], grasps=[0], tasks=task)
    # with the true virtual joints the planner's own prediction is the outcome
    assert oracle[0].report.predicted_rmse_px == pytest.approx(oracle[0].report.rmse_px, abs=1e-9)
    assert noisy[0].report.predicted_rmse_px != pytest.approx(noisy[0].report.rmse_px, abs=1e-6)


def test_summarize():
    assert ex.summarize([1.0, 3.0]) == (2.0, 1.0)


def test_csv_text_and_sidecar(tmp_path):
    text = csv_text(["a", "b"], [[0.1, None], [1, "x"]], ["tool", "seed=1"])
    assert text == "# tool\n# seed=1\na,b\n0.10000000000000001,\n1,x\n"
    atomic_write(tmp_path / "t.csv", text)
    atomic_write(tmp_path / "time.csv", "wall\n1.5\n")
    assert read_csv(tmp_path / "t.csv") == (["a", "b"], [{"a": "0.10000000000000001", "b": ""},
                                                           {"a": "1", "b": "x"}])
    update_sidecar(tmp_path, ["t.csv", "time.csv"], 1, "abc", volatile={"time.csv"})
    doc = json.loads((tmp_path / "metadata.json").read_text())
    assert doc["files"]["time.csv"] is None and len(doc["files"]["t.csv"]) == 64
    assert [p.name for p in tmp_path.iterdir() if p.name.startswith(".")] == []


@pytest.mark.xfail(strict=False, reason="a pose-deterministic detector offset does not hurt "
                                        "closed-loop placing; see the decisions ledger")
def test_on_object_baselines_place_better(experiment, baseline_fits):
    mean = {}
    for v, fit in baseline_fits.items():
        runs = ex.run_placing_baseline(experiment, fit, seeds=experiment.seeds[:1])
        mean[v] = np.mean([r.report.rmse_px for r in runs])
    assert max(mean["c"], mean["d"]) < min(mean["a"], mean["b"])
