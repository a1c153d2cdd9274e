"""Deterministic quadrature rules used by the corrector and harness modules.

All patch integrals reduce to one of three shapes:

* radial integrals over ``[a, b]`` of profiles that blow up like powers of
  the distance (composite Gauss-Legendre on dyadically graded panels),
* angular integrals over the metric hemisphere cut out by the flat boundary
  (product rule: Gauss in the polar cosine, trapezoid in azimuth),
* flat tensor-Gauss integrals over the bottom face of the box.

Every rule returns plain ``(nodes, weights)`` arrays and is a pure function
of its arguments, so repeated runs are bit-identical.
"""

from __future__ import annotations

import math

import numpy as np


def unit_sphere_area(n: int) -> float:
    """Surface area of the unit sphere S^(n-1) in R^n."""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


def unit_ball_volume(n: int) -> float:
    """Volume of the unit ball in R^n."""
    return math.pi ** (n / 2.0) / math.gamma(n / 2.0 + 1.0)


def gauss_panel(a: float, b: float, order: int):
    """Gauss-Legendre nodes/weights on a single interval [a, b]."""
    x, w = np.polynomial.legendre.leggauss(order)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return mid + half * x, half * w


def radial_rule(a: float, b: float, order: int):
    """Composite Gauss-Legendre rule on [a, b] graded for power singularities.

    When b/a is large the interval is split into dyadic panels [a, 2a],
    [2a, 4a], ..., so integrands behaving like d**p are resolved to machine
    precision with moderate order.  For a == 0 the plain rule is used (the
    integrands there carry positive powers of d).
    """
    if b <= a:
        raise ValueError(f"empty radial interval [{a}, {b}]")
    if a <= 0.0:
        return gauss_panel(a, b, order)
    edges = [a]
    while edges[-1] * 2.0 < b:
        edges.append(edges[-1] * 2.0)
    edges.append(b)
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        x, w = gauss_panel(lo, hi, order)
        nodes.append(x)
        weights.append(w)
    return np.concatenate(nodes), np.concatenate(weights)


def _orthonormal_frame(axis: np.ndarray) -> np.ndarray:
    """Rows: unit `axis` followed by an orthonormal basis of its complement."""
    n = axis.size
    a = axis / np.linalg.norm(axis)
    basis = [a]
    for e in np.eye(n):
        v = e - sum(np.dot(e, u) * u for u in basis)
        norm = np.linalg.norm(v)
        if norm > 1e-12:
            basis.append(v / norm)
    return np.asarray(basis[:n])


def hemisphere_rule(n: int, axis: np.ndarray | None = None,
                    n_polar: int = 32, n_azimuth: int = 64):
    """Quadrature on the half of the unit sphere with ``y . axis >= 0``.

    Returns unit directions (m, n) and weights summing to half the sphere
    area.  For n == 3 the rule is Gauss in t = cos(theta) on [0, 1] times a
    uniform trapezoid in azimuth; for n > 3 the extra polar angles use
    Gauss-Legendre with the sin-power surface weight carried explicitly.
    Nodes never touch the equator, so integrands with a kink across the
    cutting plane are sampled strictly inside open hemispheres.
    """
    if n < 3:
        raise ValueError("hemisphere_rule requires n >= 3")
    if axis is None:
        axis = np.eye(n)[-1]
    frame = _orthonormal_frame(np.asarray(axis, dtype=float))

    if n == 3:
        # dS = dt dphi with t = cos(theta)
        t, wt = gauss_panel(0.0, 1.0, n_polar)
        sin_t = np.sqrt(1.0 - t**2)
        phi = (np.arange(n_azimuth) + 0.5) * (2.0 * math.pi / n_azimuth)
        wphi = np.full(n_azimuth, 2.0 * math.pi / n_azimuth)
        dirs = (t[:, None, None] * frame[0]
                + (sin_t[:, None] * np.cos(phi))[:, :, None] * frame[1]
                + (sin_t[:, None] * np.sin(phi))[:, :, None] * frame[2])
        w = wt[:, None] * wphi
        return dirs.reshape(-1, 3), w.reshape(-1)

    # general n: dS = (1-t^2)^((n-3)/2) dt dS_(n-2) with t = cos(theta);
    # Gauss-Jacobi absorbs the (1-t)^((n-3)/2) endpoint factor exactly
    from scipy.special import roots_jacobi

    alpha = (n - 3) / 2.0
    xj, wj = roots_jacobi(n_polar, alpha, 0.0)
    t = 0.5 * (xj + 1.0)
    wt = wj * (1.0 + t) ** alpha / 2.0 ** (alpha + 1.0)
    sin_t = np.sqrt(1.0 - t**2)

    # full equatorial sphere rule: mirror of the half rule on S^(n-2)
    sub_dirs, sub_w = hemisphere_rule(n - 1, axis=np.eye(n - 1)[0],
                                      n_polar=n_polar, n_azimuth=n_azimuth)
    eq_dirs = np.vstack([sub_dirs, -sub_dirs])
    eq_w = np.concatenate([sub_w, sub_w])
    dirs = (t[:, None, None] * frame[0]
            + sin_t[:, None, None] * (eq_dirs @ frame[1:]))
    w = wt[:, None] * eq_w
    return dirs.reshape(-1, n), w.reshape(-1)


def face_rule(extents, order: int = 16):
    """Tensor Gauss rule over the flat rectangle prod_i [0, extents[i]].

    Used for surface integrals over the free boundary face; `order` nodes
    per axis resolve the smooth test weights used in the harness.
    """
    axes = [gauss_panel(0.0, float(L), order) for L in extents]
    grids = np.meshgrid(*[x for x, _ in axes], indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=-1)
    w = axes[0][1]
    for _, wi in axes[1:]:
        w = np.multiply.outer(w, wi)
    return pts, w.reshape(-1)


def fit_loglog_slope(eps_list, values) -> float:
    """Least-squares slope of log(values) against log(eps)."""
    x = np.log(np.asarray(eps_list, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    x = x - x.mean()
    return float(np.dot(x, y - y.mean()) / np.dot(x, x))


def richardson_limit(eps_list, values):
    """Two-point Richardson extrapolation with the observed convergence rate.

    Uses the last three entries: the rate p comes from the ratio of
    successive differences, the limit from the finest pair.  Falls back to
    the finest value when the differences vanish or the rate estimate is
    unusable (already converged, or non-monotone noise).
    """
    v = np.asarray(values, dtype=float)
    e = np.asarray(eps_list, dtype=float)
    if v.size < 2:
        return float(v[-1]), float("nan")
    if v.size == 2:
        d = v[-1] - v[-2]
        return float(v[-1] + d), 1.0
    d1, d2 = v[-2] - v[-3], v[-1] - v[-2]
    if d2 == 0.0 or d1 == 0.0 or d1 * d2 <= 0.0:
        return float(v[-1]), float("nan")
    ratio = e[-2] / e[-1]
    p = math.log(abs(d1 / d2)) / math.log(ratio)
    if p <= 0.0:
        return float(v[-1]), p
    return float(v[-1] + d2 / (ratio**p - 1.0)), p
