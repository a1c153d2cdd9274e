import numpy as np
import pytest
from numpy.testing import assert_allclose

from homlab.errors import EllipticityError, KernelError
from homlab.kernel import (
    CoefficientField,
    GreenKernel,
    derived_gradient_coefficients,
    green_gradient,
    green_value,
    laplace_beltrami_residual,
    metric_distance,
)


def kernel_identity(n=3, c_values=(1.0,)):
    return GreenKernel(coeff=CoefficientField.identity(n), c_values=c_values)


def kernel_diag(diag, c_values=(1.0,)):
    gamma = np.diag(np.sqrt(np.asarray(diag, dtype=float)))
    field = CoefficientField(dim=len(diag), gamma=gamma)
    return GreenKernel(coeff=field, c_values=c_values)


def test_coefficient_field_validates_spd():
    with pytest.raises(EllipticityError):
        CoefficientField(dim=3, gamma=np.diag([1.0, 1.0, -0.5]))
    with pytest.raises(EllipticityError):
        CoefficientField(dim=3, gamma=np.array([[1, 2, 0],
                                                [0, 1, 0],
                                                [0, 0, 1.0]]))
    field = CoefficientField(dim=3, gamma=np.diag([2.0, 1.0, 1.0]))
    assert field.ellipticity == (1.0, 2.0)
    assert_allclose(field.A, np.diag([4.0, 1.0, 1.0]))
    assert field.trace_A == 6.0


def test_metric_distance_euclidean_case():
    k = kernel_identity()
    assert_allclose(
        metric_distance(k, np.array([0.3, 0.4, 0.0]), np.zeros(3)), 0.5)
    assert metric_distance(k, np.ones(3), np.ones(3)) == 0.0


def test_metric_distance_anisotropic_hand_value():
    # gamma = diag(2,1,1) so A = diag(4,1,1); |e1|_metric = 1/2
    k = kernel_diag([4.0, 1.0, 1.0])
    assert_allclose(
        metric_distance(k, np.array([1.0, 0.0, 0.0]), np.zeros(3)), 0.5)


def test_metric_distance_is_a_metric():
    k = kernel_diag([4.0, 2.0, 1.0])
    rng = np.random.default_rng(7)
    pts = rng.uniform(-1, 1, size=(40, 3, 3))
    for x, y, z in pts:
        dxy = metric_distance(k, x, y)
        dyx = metric_distance(k, y, x)
        assert_allclose(dxy, dyx, rtol=1e-14)
        assert dxy <= metric_distance(k, x, z) + metric_distance(k, z, y) \
            + 1e-14


def test_green_value_defaults():
    k = kernel_identity()
    x = np.array([0.5, 0.0, 0.0])
    assert_allclose(green_value(k, x, np.zeros(3)), 2.0, rtol=1e-15)
    k4 = kernel_identity(4)
    assert_allclose(
        green_value(k4, np.array([0.5, 0, 0, 0.0]), np.zeros(4)), 4.0)


def test_green_value_two_term_series():
    k = kernel_identity(c_values=(1.0, 0.5))
    x = np.array([0.5, 0.0, 0.0])
    assert_allclose(green_value(k, x, np.zeros(3)), 2.0 + 0.5, rtol=1e-15)


def test_green_value_homogeneity_degree_2_minus_n():
    for n in (3, 4, 5):
        k = kernel_identity(n)
        x = np.full(n, 0.2)
        for lam in (0.5, 2.0, 3.7):
            assert_allclose(green_value(k, lam * x, np.zeros(n)),
                            lam ** (2 - n) * green_value(k, x, np.zeros(n)),
                            rtol=1e-13)


def test_green_value_rejects_coincident_points():
    k = kernel_identity()
    with pytest.raises(KernelError):
        green_value(k, np.ones(3), np.ones(3))


def test_green_gradient_hand_values():
    k = kernel_identity()
    g = green_gradient(k, np.array([0.5, 0.0, 0.0]), np.zeros(3))
    assert_allclose(g, [-4.0, 0.0, 0.0], rtol=1e-14)
    # A = diag(4,1,1), x - y = e1, d = 1/2: grad = -d^-3 A^-1 (x-y)
    ka = kernel_diag([4.0, 1.0, 1.0])
    g = green_gradient(ka, np.array([1.0, 0.0, 0.0]), np.zeros(3))
    assert_allclose(g, [-2.0, 0.0, 0.0], rtol=1e-14)


def test_green_gradient_matches_finite_difference():
    ka = kernel_diag([4.0, 2.0, 1.0], c_values=(1.0, 0.3))
    rng = np.random.default_rng(3)
    step = 1e-5
    for _ in range(25):
        x = rng.uniform(0.3, 1.0, size=3)
        y = rng.uniform(-1.0, -0.3, size=3)
        grad = green_gradient(ka, x, y)
        fd = np.empty(3)
        for i in range(3):
            e = np.zeros(3)
            e[i] = step
            fd[i] = (green_value(ka, x + e, y)
                     - green_value(ka, x - e, y)) / (2 * step)
        assert np.max(np.abs(grad - fd)) <= 1e-6


def test_derived_gradient_coefficients():
    assert derived_gradient_coefficients((1.0,), 3) == (-1.0,)
    assert derived_gradient_coefficients((1.0, 0.5), 4) == (-2.0, -0.5)


def test_residual_default_kernel_is_harmonic():
    k = kernel_identity()
    x = np.array([0.3, 0.4, 0.0])  # d = 0.5
    res = laplace_beltrami_residual(k, x, np.zeros(3), step=1e-3)
    assert abs(res) <= 1e-4


def test_residual_anisotropic_default_kernel():
    ka = kernel_diag([4.0, 1.0, 1.0])
    x = np.array([1.0, 0.0, 0.0])  # metric distance 0.5
    res = laplace_beltrami_residual(ka, x, np.zeros(3), step=1e-3)
    assert abs(res) <= 1e-4


def test_residual_extended_series_not_harmonic():
    # for n = 3 the second ladder term is the constant d^0, which stays
    # harmonic; the d^1 term is the first non-harmonic one and contributes
    # div(A grad d) = (n-1)/d, a Theta(1/d) residual
    x = np.array([0.5, 0.0, 0.0])
    k_const = kernel_identity(c_values=(1.0, 1.0))
    assert abs(laplace_beltrami_residual(k_const, x, np.zeros(3),
                                         step=1e-4)) <= 1e-5
    k_lin = kernel_identity(c_values=(1.0, 0.0, 1.0))
    res = laplace_beltrami_residual(k_lin, x, np.zeros(3), step=1e-4)
    assert abs(res) > 1.0
    assert_allclose(res, 2.0 / 0.5, rtol=1e-6)
    # n = 4: the d^(3-n) = d^-1 term already fails to be harmonic
    k4 = kernel_identity(4, c_values=(1.0, 1.0))
    x4 = np.array([0.5, 0.0, 0.0, 0.0])
    res4 = laplace_beltrami_residual(k4, x4, np.zeros(4), step=1e-4)
    assert_allclose(res4, -1.0 / 0.5**3, rtol=1e-5)


def test_residual_rejects_large_step():
    k = kernel_identity()
    x = np.array([0.5, 0.0, 0.0])
    with pytest.raises(KernelError):
        laplace_beltrami_residual(k, x, np.zeros(3), step=0.2)
