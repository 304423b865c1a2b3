import numpy as np
import pytest
import yaml

from bodyschema.camera import CameraModel, look_at
from bodyschema.config import load_experiment
from bodyschema.kinematics import planar_arm
from bodyschema.scene import data_path, default_camera, default_chain

# filled by test_acceptance; printed once at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {line}")


@pytest.fixture(scope="session")
def chain():
    return default_chain()


@pytest.fixture(scope="session")
def cam():
    return default_camera()


@pytest.fixture(scope="session")
def experiment():
    return load_experiment()


@pytest.fixture
def planar():
    return planar_arm((0.5, 0.5))


@pytest.fixture
def top_cam():
    """Camera 2 m above the origin looking straight down."""
    return CameraModel(look_at((0.0, 0.0, 2.0), (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_small_config(path, **changes):
    """A reduced copy of the packaged experiment with absolute scene paths."""
    doc = yaml.safe_load(data_path("experiment.yaml").read_text())
    doc["chain"] = str(data_path("kuka7.yaml"))
    doc["camera"] = str(data_path("camera.yaml"))
    doc["seeds"] = [0, 1]
    doc["grasps"] = doc["grasps"][:2]
    doc["mpc"]["epochs"] = 200
    doc["baseline"].update(n=200, epochs=5, random_sequences=2, placing_epochs=5)
    for key, value in changes.items():
        if isinstance(value, dict):
            doc[key].update(value)
        else:
            doc[key] = value
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


@pytest.fixture
def small_config(tmp_path):
    return write_small_config(tmp_path / "small.yaml")


@pytest.fixture(scope="session")
def baseline_fits(experiment):
    """The four MLP baselines trained with the packaged settings."""
    from bodyschema.experiments import train_baselines
    return train_baselines(experiment)
