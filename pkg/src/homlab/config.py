"""Strict configuration parsing for the laboratory pipelines.

Configs are JSON documents organized in blocks (domain, patches,
coefficients, problem, solver, harness, output).  Parsing is strict: every
unknown key is rejected with its full path, defaults are filled for absent
keys, and invariant violations raise errors that name the offending path.
A handful of top-level shorthands (``n``, ``eps``, ``psi``, ``phi``) map
into their blocks so minimal documents stay minimal.

The Dirichlet datum and the obstacle are small arithmetic expressions over
the coordinates (``x1`` .. ``xn``, plus ``x``, ``y``, ``z`` for n = 3),
with +, -, *, /, ** and a short whitelist of functions.  They are compiled
once into vectorized evaluators.
"""

from __future__ import annotations

import ast
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigSyntaxError,
    ConfigValueError,
    EllipticityError,
    UnknownKeyError,
)
from .fem import ProblemData, SolverConfig
from .geometry import DomainSpec
from .kernel import CoefficientField, GreenKernel

_SHORTHAND = {"n": ("domain", "n"), "eps": ("patches", "eps"),
              "psi": ("problem", "psi"), "phi": ("problem", "phi")}

_DEFAULTS = {
    "domain": {
        "n": 3,
        "extents": None,
        "boundary": "box",  # "box" or "slab_periodic"
    },
    "patches": {
        "eps": [0.25, 0.125, 0.0625],
        "tilde_r": 1.0,
        "c1": 0.1,
        "c2": 10.0,
        "nested": False,
    },
    "coefficients": {
        "gamma": "identity",
        "c_values": [1.0],
        "c_gradient": None,
        "c_tilde": [1.0],
    },
    "problem": {
        "psi": "0",
        "phi": "0",
        "c_n": 1.0,
        "mu": None,
        "mu_sign": "positive",
    },
    "solver": {
        "cg_tol": 1e-10,
        "cg_max_iter": 10000,
        "pdas_max_iter": 50,
        "pdas_c_factor": 1e3,
        "newton_max_iter": 50,
        "newton_tol": 1e-10,
        "boundary_quad_order": 3,
        "quad_order": 32,
        "n_polar": 32,
        "n_azimuth": 64,
        "mesh_h": None,
        "mesh_h_factor": 8.0,
        "node_cap": 20000000,
        "allow_coarse": False,
        "mu_eps": [0.125, 0.0625, 0.03125],
        "nested_mesh_h": 0.125,
        "nested_check": True,
        "cell_reduction": False,
        "cell_mesh_factor": 1.0,
    },
    "harness": {
        "cutoff_lo": 0.3,
        "cutoff_hi": 0.7,
        "weights": ["one", "x1"],
        "v_fields": ["zero", "one", "one_minus_omega"],
        "e2_lift": 0.001,
        "tol_capacity": 0.05,
        "tol_exact": 1e-12,
        "volume_slope_min": 0.7,
    },
    "output": {
        "dir": "out",
    },
}


# -- expression compiler -----------------------------------------------------


_ALLOWED_CALLS = ("abs", "exp", "sin", "cos", "sqrt", "min", "max",
                  "smoothstep")


def compile_expression(text: str, dim: int, path: str = "expression"):
    """Compile an arithmetic coordinate expression to a vectorized callable.

    Only numbers, coordinate names, the four operations, powers, and the
    whitelisted functions are admitted; anything else is rejected with the
    configuration path.
    """
    from .harness import smoothstep

    if not isinstance(text, str):
        raise ConfigValueError("expression must be a string", path=path)
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ConfigSyntaxError(f"bad expression {text!r}: {exc.msg}",
                                path=path) from None

    names = {f"x{i + 1}": i for i in range(dim)}
    if dim == 3:
        names.update({"x": 0, "y": 1, "z": 2})
    constants = {"pi": math.pi, "e": math.e}
    funcs = {
        "abs": np.abs, "exp": np.exp, "sin": np.sin, "cos": np.cos,
        "sqrt": np.sqrt, "min": np.minimum, "max": np.maximum,
        "smoothstep": smoothstep,
    }

    def check(node):
        if isinstance(node, ast.Expression):
            check(node.body)
        elif isinstance(node, ast.BinOp) and isinstance(
                node.op, (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)):
            check(node.left)
            check(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(
                node.op, (ast.UAdd, ast.USub)):
            check(node.operand)
        elif isinstance(node, ast.Constant) and isinstance(
                node.value, (int, float)):
            pass
        elif isinstance(node, ast.Name):
            if node.id not in names and node.id not in constants:
                raise ConfigValueError(
                    f"unknown name {node.id!r} in expression {text!r}",
                    path=path)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) \
                    or node.func.id not in _ALLOWED_CALLS:
                raise ConfigValueError(
                    f"disallowed call in expression {text!r}; allowed: "
                    f"{', '.join(_ALLOWED_CALLS)}", path=path)
            if node.keywords:
                raise ConfigValueError(
                    "keyword arguments are not allowed in expressions",
                    path=path)
            for arg in node.args:
                check(arg)
        else:
            raise ConfigValueError(
                f"disallowed syntax in expression {text!r}", path=path)

    check(tree)
    code = compile(tree, filename=f"<{path}>", mode="eval")

    def evaluate(coords):
        coords = np.asarray(coords, dtype=float)
        env = {name: coords[..., idx] for name, idx in names.items()}
        env.update(constants)
        env.update(funcs)
        out = eval(code, {"__builtins__": {}}, env)
        return np.broadcast_to(np.asarray(out, dtype=float),
                               coords.shape[:-1]).copy()

    # probe once so malformed expressions fail at parse time
    evaluate(np.zeros((2, dim)))
    return evaluate


# -- schema walking ----------------------------------------------------------


def _merge_block(name, defaults, supplied):
    if not isinstance(supplied, dict):
        raise ConfigValueError("block must be an object", path=name)
    out = dict(defaults)
    for key, value in supplied.items():
        if key not in defaults:
            raise UnknownKeyError(f"unknown key {key!r}",
                                  path=f"{name}.{key}")
        out[key] = value
    return out


@dataclass
class RunConfig:
    """Validated configuration with constructed-domain helpers."""

    domain: dict
    patches: dict
    coefficients: dict
    problem: dict
    solver: dict
    harness: dict
    output: dict
    psi_fn: object = field(repr=False, default=None)
    phi_fn: object = field(repr=False, default=None)

    # -- constructors ---------------------------------------------------

    def domain_spec(self) -> DomainSpec:
        extents = self.domain["extents"]
        return DomainSpec(
            dim=self.domain["n"],
            extents=tuple(extents) if extents else (),
            lateral_periodic=self.domain["boundary"] == "slab_periodic")

    def coefficient_field(self) -> CoefficientField:
        n = self.domain["n"]
        gamma = self.coefficients["gamma"]
        if gamma == "identity":
            return CoefficientField.identity(n)
        mat = np.asarray(gamma, dtype=float)
        if mat.size != n * n:
            raise ConfigValueError(
                f"gamma needs {n * n} entries (row major), got {mat.size}",
                path="coefficients.gamma")
        try:
            return CoefficientField(dim=n, gamma=mat.reshape(n, n))
        except EllipticityError as exc:
            raise ConfigValueError(
                f"gamma violates the uniform ellipticity bounds "
                f"a*I <= gamma <= b*I with a > 0: {exc}",
                path="coefficients.gamma") from None

    def green_kernel(self) -> GreenKernel:
        return GreenKernel(
            coeff=self.coefficient_field(),
            c_values=tuple(self.coefficients["c_values"]),
            c_gradient=None if self.coefficients["c_gradient"] is None
            else tuple(self.coefficients["c_gradient"]))

    def problem_data(self, mu=None) -> ProblemData:
        return ProblemData(psi=self.psi_fn, phi=self.phi_fn,
                           c_n=float(self.problem["c_n"]), mu=mu)

    def solver_config(self) -> SolverConfig:
        s = self.solver
        return SolverConfig(
            cg_tol=float(s["cg_tol"]),
            cg_max_iter=int(s["cg_max_iter"]),
            pdas_max_iter=int(s["pdas_max_iter"]),
            pdas_c_factor=float(s["pdas_c_factor"]),
            newton_max_iter=int(s["newton_max_iter"]),
            newton_tol=float(s["newton_tol"]),
            boundary_quad_order=int(s["boundary_quad_order"]))

    @property
    def eps_list(self) -> list:
        return [float(e) for e in self.patches["eps"]]

    def mesh_h_list(self) -> list:
        explicit = self.solver["mesh_h"]
        if explicit is not None:
            return [float(h) for h in explicit]
        factor = float(self.solver["mesh_h_factor"])
        return [eps / factor for eps in self.eps_list]


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON configuration document."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigSyntaxError(f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigSyntaxError("configuration must be a JSON object")

    doc = {}
    for key, value in raw.items():
        if key in _SHORTHAND:
            block, name = _SHORTHAND[key]
            doc.setdefault(block, {})
            doc[block].setdefault(name, value)
        elif key in _DEFAULTS:
            block = doc.setdefault(key, {})
            if not isinstance(value, dict):
                raise ConfigValueError("block must be an object", path=key)
            for k, v in value.items():
                block[k] = v
        else:
            raise UnknownKeyError(f"unknown key {key!r}", path=key)

    blocks = {name: _merge_block(name, defaults, doc.get(name, {}))
              for name, defaults in _DEFAULTS.items()}

    # invariants
    n = blocks["domain"]["n"]
    if not isinstance(n, int) or n < 3:
        raise ConfigValueError("dimension n must be an integer >= 3",
                               path="domain.n")
    if blocks["domain"]["boundary"] not in ("box", "slab_periodic"):
        raise ConfigValueError(
            "boundary must be 'box' or 'slab_periodic'",
            path="domain.boundary")
    eps = blocks["patches"]["eps"]
    if not isinstance(eps, (list, tuple)) or not eps:
        raise ConfigValueError("eps must be a nonempty list",
                               path="patches.eps")
    eps = [float(e) for e in eps]
    if any(e <= 0 for e in eps):
        raise ConfigValueError("eps entries must be positive",
                               path="patches.eps")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ConfigValueError("eps not strictly decreasing",
                               path="patches.eps")
    blocks["patches"]["eps"] = eps
    if blocks["problem"]["mu_sign"] not in ("positive", "verbatim"):
        raise ConfigValueError("mu_sign must be 'positive' or 'verbatim'",
                               path="problem.mu_sign")
    mu = blocks["problem"]["mu"]
    if mu is not None and float(mu) < 0:
        raise ConfigValueError("homogenized density mu must be >= 0",
                               path="problem.mu")
    mesh_h = blocks["solver"]["mesh_h"]
    if mesh_h is not None and len(mesh_h) != len(eps):
        raise ConfigValueError(
            "mesh_h must supply one spacing per eps entry",
            path="solver.mesh_h")

    cfg = RunConfig(**blocks)
    cfg.psi_fn = compile_expression(str(blocks["problem"]["psi"]), n,
                                    path="problem.psi")
    cfg.phi_fn = compile_expression(str(blocks["problem"]["phi"]), n,
                                    path="problem.phi")
    cfg.coefficient_field()  # validate gamma eagerly
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
