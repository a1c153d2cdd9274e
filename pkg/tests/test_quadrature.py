import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from homlab.quadrature import (
    face_rule,
    fit_loglog_slope,
    gauss_panel,
    hemisphere_rule,
    radial_rule,
    richardson_limit,
    unit_ball_volume,
    unit_sphere_area,
)


def test_sphere_area_and_ball_volume():
    assert_allclose(unit_sphere_area(3), 4 * math.pi, rtol=1e-15)
    assert_allclose(unit_ball_volume(3), 4 * math.pi / 3, rtol=1e-15)
    # d/dr of ball volume equals sphere area
    for n in (3, 4, 5):
        assert_allclose(unit_sphere_area(n), n * unit_ball_volume(n),
                        rtol=1e-14)


def test_gauss_panel_polynomial_exactness():
    x, w = gauss_panel(-1.0, 2.0, 6)
    for p in range(11):  # order 6 is exact through degree 11
        exact = (2.0 ** (p + 1) - (-1.0) ** (p + 1)) / (p + 1)
        assert_allclose(np.sum(w * x**p), exact, rtol=1e-13)


def test_radial_rule_resolves_power_singularity():
    # integral of d^-2 over [r, eps] has huge dynamic range at r = eps^2
    eps = 1.0 / 16
    r = eps * eps
    x, w = radial_rule(r, eps, 32)
    assert_allclose(np.sum(w / x**2), 1.0 / r - 1.0 / eps, rtol=1e-13)
    assert_allclose(np.sum(w * x**3), (eps**4 - r**4) / 4, rtol=1e-13)


def test_radial_rule_rejects_empty_interval():
    with pytest.raises(ValueError):
        radial_rule(1.0, 1.0, 8)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_hemisphere_rule_weight_sum(n):
    dirs, w = hemisphere_rule(n)
    assert_allclose(np.sum(w), unit_sphere_area(n) / 2, rtol=1e-12)
    assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-13)
    # all nodes on the requested side
    assert np.all(dirs[:, -1] > 0)


def test_hemisphere_rule_tilted_axis_moments():
    axis = np.array([1.0, 2.0, 2.0])
    dirs, w = hemisphere_rule(3, axis=axis)
    assert np.all(dirs @ axis > 0)
    # mean of (y . axis_hat) over the hemisphere is 1/2
    ahat = axis / np.linalg.norm(axis)
    mean = np.sum(w * (dirs @ ahat)) / np.sum(w)
    assert_allclose(mean, 0.5, rtol=1e-12)
    # integral of y_i y_j over the full sphere is (area/n) delta_ij;
    # the hemisphere keeps the even moments' half
    m2 = np.einsum("q,qi,qj->ij", w, dirs, dirs)
    assert_allclose(m2, np.eye(3) * unit_sphere_area(3) / 6, atol=1e-12)


def test_face_rule_integrates_polynomials():
    pts, w = face_rule((1.0, 2.0), order=8)
    assert_allclose(np.sum(w), 2.0, rtol=1e-14)
    vals = pts[:, 0] ** 2 * pts[:, 1]
    assert_allclose(np.sum(w * vals), (1.0 / 3.0) * 2.0, rtol=1e-13)


def test_fit_loglog_slope_recovers_power():
    eps = [0.25, 0.125, 0.0625]
    vals = [7.0 * e**1.75 for e in eps]
    assert_allclose(fit_loglog_slope(eps, vals), 1.75, rtol=1e-12)


def test_richardson_limit_first_order_sequence():
    eps = [0.25, 0.125, 0.0625]
    vals = [3.0 + 2.0 * e for e in eps]
    limit, p = richardson_limit(eps, vals)
    assert_allclose(limit, 3.0, rtol=1e-12)
    assert_allclose(p, 1.0, rtol=1e-10)


def test_richardson_limit_converged_sequence():
    limit, _ = richardson_limit([0.25, 0.125, 0.0625], [1.0, 1.0, 1.0])
    assert limit == 1.0
