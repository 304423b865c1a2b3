import numpy as np
import pytest

from bodyschema.camera import project_chain
from bodyschema.grad import (GradientRecord, central_difference, finite_difference_check,
                             grad_projection_wrt_phi, grad_projection_wrt_theta)


def test_central_difference_scalar_and_vector():
    g = central_difference(lambda x: np.sum(x**3), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [3.0, 12.0], rtol=1e-8)
    J = central_difference(lambda x: np.array([x[0] * x[1], np.sin(x[0])]), np.array([0.5, 2.0]))
    np.testing.assert_allclose(J, [[2.0, 0.5], [np.cos(0.5), 0.0]], atol=1e-9)


def test_check_reports_wrong_gradient():
    f = lambda x: float(np.sum(x**2))  # noqa: E731
    x = np.array([1.0, 2.0])
    assert finite_difference_check(f, x, 2 * x) < 1e-8
    assert finite_difference_check(f, x, 3 * x) > 0.4


def test_non_finite_values_raise():
    with pytest.raises(FloatingPointError):
        GradientRecord(float("nan"))
    with pytest.raises(FloatingPointError):
        GradientRecord(1.0, {"x": np.array([np.inf])})
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        central_difference(lambda x: np.sqrt(x[0]), np.array([0.0]))


def test_projection_jacobians(chain, cam, experiment):
    th = experiment.home + 0.05
    phi = experiment.phi_true()
    Jp = grad_projection_wrt_phi(cam, chain, th, phi)
    Jt = grad_projection_wrt_theta(cam, chain, th, phi)
    assert Jp.shape == (9, 9) and Jt.shape == (9, chain.dof)
    # block diagonal: keypoint k only depends on phi_k
    assert np.all(Jp[:3, 3:] == 0)
    fp = lambda p: project_chain(cam, chain, th, p.reshape(-1, 3)).reshape(-1)  # noqa: E731
    ft = lambda t: project_chain(cam, chain, t, phi).reshape(-1)  # noqa: E731
    assert finite_difference_check(fp, phi.reshape(-1), Jp) < 1e-6
    assert finite_difference_check(ft, th, Jt) < 1e-6
