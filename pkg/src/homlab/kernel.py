"""Constant coefficient matrix, induced metric, and the kernel expansion.

The energy density ``|gamma grad u|^2`` is the quadratic form of
``A = gamma^T gamma``.  The fundamental profile driving the corrector is the
truncated expansion ``Phi(x, y) = sum_i C_i d(x, y)**(2-n+i-1)`` in the
metric distance ``d(x, y) = ((x-y)^T A^{-1} (x-y))**(1/2)``.  With this
metric the leading term is exactly A-harmonic: ``div(A grad d**(2-n)) = 0``
away from the pole, for any constant SPD A.  Higher coefficients model
curvature-like corrections and are NOT A-harmonic; the residual diagnostic
makes that visible rather than hiding it.

Only constant coefficients are supported end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EllipticityError, KernelError


@dataclass(frozen=True)
class CoefficientField:
    """Symmetric positive definite coefficient matrix gamma with A = gamma^T gamma.

    Ellipticity bounds ``a <= b`` are the extreme eigenvalues of gamma and
    are checked at construction.
    """

    dim: int
    gamma: np.ndarray
    mode: str = "constant"
    A: np.ndarray = field(init=False)
    A_inv: np.ndarray = field(init=False)
    ellipticity: tuple = field(init=False)

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if g.shape != (self.dim, self.dim):
            raise EllipticityError(
                f"gamma must be {self.dim}x{self.dim}, got {g.shape}")
        if not np.allclose(g, g.T, atol=1e-12):
            raise EllipticityError("gamma must be symmetric")
        eigs = np.linalg.eigvalsh(g)
        if eigs[0] <= 0:
            raise EllipticityError(
                f"gamma must satisfy a*I <= gamma with a > 0; "
                f"smallest eigenvalue is {eigs[0]:.6g}")
        a_mat = g.T @ g
        g = g.copy()
        g.setflags(write=False)
        a_mat.setflags(write=False)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "A", a_mat)
        object.__setattr__(self, "A_inv", np.linalg.inv(a_mat))
        object.__setattr__(self, "ellipticity",
                           (float(eigs[0]), float(eigs[-1])))

    @classmethod
    def identity(cls, dim: int = 3) -> "CoefficientField":
        return cls(dim=dim, gamma=np.eye(dim), mode="identity")

    @property
    def det_sqrt_A(self) -> float:
        return float(np.sqrt(np.linalg.det(self.A)))

    @property
    def trace_A(self) -> float:
        """Divergence of the linear field A x, a constant."""
        return float(np.trace(self.A))


def derived_gradient_coefficients(values, n: int) -> tuple:
    """Coefficients of the exact radial derivative of the value series."""
    return tuple(c * (2.0 - n + i) for i, c in enumerate(values))


@dataclass(frozen=True)
class GreenKernel:
    """Truncated kernel expansion over a constant coefficient field.

    ``c_values`` are the expansion coefficients; the default single term
    with C_1 = 1 gives the pure power ``d**(2-n)``.  ``c_gradient`` defaults
    to the exact derivative coefficients of the value series; supplying a
    different list is allowed (the series are independent inputs) but then
    the gradient/flux matching diagnostics will report the mismatch.
    """

    coeff: CoefficientField
    c_values: tuple = (1.0,)
    c_gradient: tuple = None

    def __post_init__(self):
        vals = tuple(float(c) for c in self.c_values)
        if not vals or not np.all(np.isfinite(vals)):
            raise KernelError("c_values must be a nonempty finite list")
        grads = self.c_gradient
        if grads is None:
            grads = derived_gradient_coefficients(vals, self.coeff.dim)
        grads = tuple(float(c) for c in grads)
        if not np.all(np.isfinite(grads)):
            raise KernelError("c_gradient must be finite")
        object.__setattr__(self, "c_values", vals)
        object.__setattr__(self, "c_gradient", grads)

    @property
    def dim(self) -> int:
        return self.coeff.dim


def metric_distance(kernel: GreenKernel, x, y) -> np.ndarray:
    """Distance in the A^(-1) metric, vectorized over leading axes."""
    dx = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    q = np.einsum("...i,ij,...j->...", dx, kernel.coeff.A_inv, dx)
    return np.sqrt(np.maximum(q, 0.0))


def green_value(kernel: GreenKernel, x, y) -> np.ndarray:
    """Truncated series sum_i C_i d**(2-n+i-1); raises at coincident points."""
    d = metric_distance(kernel, x, y)
    if np.any(d == 0.0):
        raise KernelError("kernel value requested at coincident points")
    return profile_value(kernel, d)


def profile_value(kernel: GreenKernel, d) -> np.ndarray:
    """Series value as a function of the metric distance alone."""
    d = np.asarray(d, dtype=float)
    n = kernel.dim
    out = np.zeros_like(d)
    for i, c in enumerate(kernel.c_values):
        out = out + c * d ** (2.0 - n + i)
    return out


def profile_derivative(kernel: GreenKernel, d) -> np.ndarray:
    """Radial derivative of the series (exact differentiation)."""
    d = np.asarray(d, dtype=float)
    n = kernel.dim
    out = np.zeros_like(d)
    for i, c in enumerate(kernel.c_values):
        power = 2.0 - n + i
        if power != 0.0:
            out = out + c * power * d ** (power - 1.0)
    return out


def green_gradient(kernel: GreenKernel, x, y) -> np.ndarray:
    """Exact gradient of the truncated series with respect to x.

    Equals ``sum_i C_i (2-n+i-1) d**(1-n+i-1) * A^{-1}(x-y)/d`` and agrees
    with a central finite difference of ``green_value`` to O(step^2).
    """
    dx = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    d = metric_distance(kernel, x, y)
    if np.any(d == 0.0):
        raise KernelError("kernel gradient requested at coincident points")
    radial = profile_derivative(kernel, d)
    direction = dx @ kernel.coeff.A_inv / d[..., None]
    return radial[..., None] * direction


def laplace_beltrami_residual(kernel: GreenKernel, x, y,
                              step: float) -> float:
    """Second-order finite-difference evaluation of div(A grad Phi) at x.

    A diagnostic, not a solver: for the default single-term series the
    result is pure stencil error O(step^2); extra series terms are not
    A-harmonic and produce an O(1)-in-step residual that documents their
    curvature-correction role.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = float(metric_distance(kernel, x, y))
    if d == 0.0:
        raise KernelError("residual requested at the kernel singularity")
    if step <= 0.0 or step >= d / 4.0:
        raise KernelError(
            f"stencil step {step:.3g} must lie in (0, d/4) with d = {d:.3g}")
    n = kernel.dim
    A = kernel.coeff.A
    e = np.eye(n)
    phi0 = float(green_value(kernel, x, y))
    res = 0.0
    for i in range(n):
        up = float(green_value(kernel, x + step * e[i], y))
        dn = float(green_value(kernel, x - step * e[i], y))
        res += A[i, i] * (up - 2.0 * phi0 + dn) / step**2
        for j in range(i + 1, n):
            pp = float(green_value(kernel, x + step * (e[i] + e[j]), y))
            pm = float(green_value(kernel, x + step * (e[i] - e[j]), y))
            mp = float(green_value(kernel, x - step * (e[i] - e[j]), y))
            mm = float(green_value(kernel, x - step * (e[i] + e[j]), y))
            res += 2.0 * A[i, j] * (pp - pm - mp + mm) / (4.0 * step**2)
    return float(res)
