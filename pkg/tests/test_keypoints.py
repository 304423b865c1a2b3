import numpy as np
import pytest

from bodyschema.camera import project_chain, project_ee
from bodyschema.keypoints import (ObservationDataset, OracleDetector, SamplingError,
                                  dataset_from_csv, dataset_to_csv, fuse_feature_maps,
                                  gen_dataset, kinematic_consistency_grad,
                                  kinematic_consistency_loss, kinematic_feature_map,
                                  kinematic_heatmap, load_dataset, observe, save_dataset)
from bodyschema.scene import JointSampler


def test_heatmap_peak_and_radius():
    hm = kinematic_heatmap([100.2, 50.7, 1.0], sigma=4.0, size=(200, 120))
    assert hm.grid.shape == (120, 200)
    assert hm.grid[51, 100] == 1.0
    assert np.unravel_index(np.argmax(hm.grid), hm.grid.shape) == (51, 100)
    assert hm.grid[51, 104] == pytest.approx(np.exp(-0.5), abs=1e-15)
    assert hm.grid[47, 100] == pytest.approx(np.exp(-0.5), abs=1e-15)
    assert np.all((hm.grid >= 0) & (hm.grid <= 1))
    assert not hm.outside


def test_heatmap_outside_image():
    hm = kinematic_heatmap([-30.0, 10.0], sigma=5.0, size=(64, 48))
    assert hm.outside and hm.grid.max() < 1.0
    with pytest.raises(ValueError):
        kinematic_heatmap([1, 1], sigma=0.0)


def test_feature_map_on_projected_end_effector(chain, cam, experiment):
    hm = kinematic_feature_map(cam, chain, experiment.home)
    ee = project_ee(cam, chain, experiment.home)
    u, v = int(np.floor(ee[0] + 0.5)), int(np.floor(ee[1] + 0.5))
    assert hm.grid[v, u] == 1.0
    fused = fuse_feature_maps(np.zeros_like(hm.grid), hm)
    np.testing.assert_array_equal(fused, hm.grid)
    with pytest.raises(ValueError):
        fuse_feature_maps(np.zeros((2, 2)), hm)


def test_kinematic_consistency_loss():
    ee = [1.0, 2.0, 3.0]
    assert kinematic_consistency_loss([ee, ee], ee) == 0.0
    assert kinematic_consistency_loss([[4.0, 6.0, 3.0]], ee) == 25.0
    assert kinematic_consistency_loss([[1.0, 2.0, 3.5]], ee) > 0.0
    rec = kinematic_consistency_grad([[4.0, 6.0, 3.0]], ee)
    np.testing.assert_allclose(rec.grads["keypoints"], [[6.0, 8.0, 0.0]])
    np.testing.assert_allclose(rec.grads["ee"], [-6.0, -8.0, 0.0])
    # symmetric in keypoint order
    z = [[0.0, 1.0, 2.0], [5.0, -1.0, 0.5]]
    assert kinematic_consistency_loss(z, ee) == kinematic_consistency_loss(z[::-1], ee)


def test_noiseless_detector_is_exact(chain, cam, experiment):
    det = OracleDetector(experiment.phi_true())
    th = experiment.home
    np.testing.assert_array_equal(observe(det, cam, chain, th),
                                  project_chain(cam, chain, th, experiment.phi_true()))


def test_detector_streams_repeat(chain, cam, experiment):
    a = OracleDetector(experiment.phi_true(), 1.0, 0.01, rng_seed=5)
    b = OracleDetector(experiment.phi_true(), 1.0, 0.01, rng_seed=5)
    th = experiment.home
    for _ in range(3):
        np.testing.assert_array_equal(observe(a, cam, chain, th), observe(b, cam, chain, th))
    with pytest.raises(ValueError):
        OracleDetector(experiment.phi_true(), -1.0)


def test_off_object_bias_is_systematic(chain, cam, experiment):
    det = OracleDetector(experiment.phi_true(), off_object_px=15.0)
    th = experiment.home
    z = observe(det, cam, chain, th)
    d = z - project_chain(cam, chain, th, experiment.phi_true())
    assert np.all(np.linalg.norm(d[:, :2], axis=1) <= 15.0 * np.sqrt(2) + 1e-9)
    assert np.all(d[:, 2] == 0)
    np.testing.assert_array_equal(z, observe(det, cam, chain, th))


def test_dataset_in_view_and_csv_round_trip(chain, cam, experiment, tmp_path):
    det = OracleDetector(experiment.phi_true(), 1.0, 0.002, rng_seed=3)
    ds = gen_dataset(det, cam, chain, 15, experiment.sampler)
    assert len(ds) == 15 and ds.K == 3
    assert np.all(cam.in_image(ds.keypoints.reshape(-1, 3), 5))
    path = tmp_path / "ds.csv"
    save_dataset(ds, path)
    text = path.read_bytes()
    assert b"\r\n" not in text
    back = load_dataset(path)
    np.testing.assert_array_equal(back.thetas, ds.thetas)
    np.testing.assert_array_equal(back.keypoints, ds.keypoints)
    assert back.metadata["seed"] == 3
    assert dataset_to_csv(dataset_from_csv(dataset_to_csv(ds))) == dataset_to_csv(ds)


def test_same_seed_same_bytes(chain, cam, experiment):
    def make():
        det = OracleDetector(experiment.phi_true(), 1.0, 0.002, rng_seed=11)
        return dataset_to_csv(gen_dataset(det, cam, chain, 5, experiment.sampler))
    assert make() == make()


def test_sampling_budget(chain, cam, experiment):
    det = OracleDetector(experiment.phi_true())
    far = JointSampler(tuple(experiment.home), (3.0,) * chain.dof, margin_px=200, max_oversampling=2)
    with pytest.raises(SamplingError, match="range"):
        gen_dataset(det, cam, chain, 20, far)


def test_dataset_validation():
    with pytest.raises(ValueError):
        ObservationDataset(np.zeros((2, 3)), np.ones((3, 1, 3)))
    with pytest.raises(ValueError):
        ObservationDataset(np.zeros((1, 3)), -np.ones((1, 1, 3)))
    assert len(ObservationDataset(np.zeros((0, 3)), np.zeros((0, 2, 3)))) == 0
    with pytest.raises(FileNotFoundError):
        load_dataset("/nonexistent/data.csv")
