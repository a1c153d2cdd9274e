"""Command dispatch and artifact serialization.

Subcommands: ``dump-layout``, ``corrector-scan``, ``mu-limit``,
``solve-eps``, ``solve-hom``, ``check-lemmas``, ``converge``.  Every run
reads one JSON config, writes CSV/JSON artifacts into the output directory,
and exits 0 exactly when all configured pass flags are true (2 on
configuration errors, 1 on failed checks or non-converged solves, with the
partial report still written).

Numbers are serialized with 17 significant digits and '.' decimal, so a
fixed config reproduces byte-identical artifacts; the one exception is the
``wall_ms`` field of solver reports, which records measured time.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .corrector import MuDensity, limit_density
from .errors import ConfigError, HomlabError
from .fem import assemble_stiffness, solve_homogenized, solve_obstacle
from .geometry import build_layout, build_mesh
from .harness import (
    DEFAULT_V_FAMILY,
    LemmaCheckReport,
    PatchFamily,
    TestFunctionSpec,
    VSpec,
    check_boundary_flux_E2,
    check_inner_flux,
    check_le2,
    check_outer_flux_E3,
    check_volume_coupling,
    convergence_study,
    corrector_scan,
)

_ENV_PREFIX = "HOMLAB_"


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def _json_dump(obj, indent=0) -> str:
    pad = " " * indent
    if isinstance(obj, dict):
        items = [f'{pad}  "{k}": {_json_dump(v, indent + 2).lstrip()}'
                 for k, v in obj.items()]
        return pad + "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        items = [_json_dump(v, indent + 2) for v in obj]
        return pad + "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if obj is None:
        return pad + "null"
    if isinstance(obj, bool):
        return pad + ("true" if obj else "false")
    if isinstance(obj, (int, np.integer)):
        return pad + str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return pad + f"{float(obj):.17g}"
    return pad + '"' + str(obj).replace('"', '\\"') + '"'


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_json_dump(obj) + "\n")


def write_csv(path: str, columns: dict) -> None:
    keys = list(columns)
    rows = len(next(iter(columns.values()))) if columns else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(keys) + "\n")
        for i in range(rows):
            fh.write(",".join(_fmt(columns[k][i]) for k in keys) + "\n")


def _eps_tag(eps: float) -> str:
    return f"{eps:.17g}".replace(".", "p")


def _patch_family(cfg: RunConfig) -> PatchFamily:
    return PatchFamily(
        domain=cfg.domain_spec(), kernel=cfg.green_kernel(),
        tilde_r=float(cfg.patches["tilde_r"])
        if np.isscalar(cfg.patches["tilde_r"]) else cfg.patches["tilde_r"],
        c_tilde=tuple(cfg.coefficients["c_tilde"]),
        c1=float(cfg.patches["c1"]), c2=float(cfg.patches["c2"]))


def _field_csv(path: str, mesh, values) -> None:
    coords = mesh.node_coords()
    cols = {"node": list(range(mesh.num_nodes))}
    for k in range(mesh.domain.dim):
        cols[f"x{k + 1}"] = coords[:, k].tolist()
    cols["value"] = values.tolist()
    write_csv(path, cols)


# -- subcommand implementations -------------------------------------------------


def run_dump_layout(cfg: RunConfig, out: str) -> int:
    spec = cfg.domain_spec()
    for eps in cfg.eps_list:
        layout = build_layout(spec, eps, cfg.patches["tilde_r"],
                              c1=cfg.patches["c1"], c2=cfg.patches["c2"],
                              nested=bool(cfg.patches["nested"]))
        cols = {"k": list(range(layout.num_patches))}
        for k in range(spec.dim):
            cols[f"x{k + 1}"] = layout.centers[:, k].tolist()
        cols["r"] = layout.radii.tolist()
        write_csv(os.path.join(out, f"layout_eps_{_eps_tag(eps)}.csv"),
                  cols)
    return 0


def run_corrector_scan(cfg: RunConfig, out: str) -> int:
    family = _patch_family(cfg)
    cols = corrector_scan(family, cfg.eps_list,
                          quadrature_order=int(cfg.solver["quad_order"]))
    write_csv(os.path.join(out, "corrector_scan.csv"), cols)
    return 0


def run_mu_limit(cfg: RunConfig, out: str) -> int:
    family = _patch_family(cfg)
    layout, _, _, mu_pos, mu_verb = family.at(cfg.eps_list[0])
    dens = mu_pos if cfg.problem["mu_sign"] == "positive" else mu_verb
    mu_eps = [float(e) for e in cfg.solver["mu_eps"]]
    pairings = []
    for eps in mu_eps:
        lay = build_layout(family.domain, eps, family.tilde_r,
                           c1=family.c1, c2=family.c2)
        d = MuDensity(layout=lay, kernel=family.kernel,
                      c_tilde=family.c_tilde, sign_mode=dens.sign_mode)
        pairings.append(d.mu_weak_pairing(
            lambda x: np.ones(x.shape[:-1]),
            quadrature_order=int(cfg.solver["quad_order"])))
    value = limit_density(dens, eps_list=mu_eps,
                          quadrature_order=int(cfg.solver["quad_order"]))
    write_json(os.path.join(out, "mu_limit.json"), {
        "eps": mu_eps,
        "pairings": pairings,
        "limit_density": value,
        "sign_mode": dens.sign_mode,
    })
    return 0


def _resolve_mu(cfg: RunConfig) -> float:
    if cfg.problem["mu"] is not None:
        return float(cfg.problem["mu"])
    family = _patch_family(cfg)
    dens = family.at(cfg.eps_list[0])[3]
    return limit_density(dens,
                         eps_list=[float(e) for e in cfg.solver["mu_eps"]],
                         quadrature_order=int(cfg.solver["quad_order"]))


def run_solve_eps(cfg: RunConfig, out: str) -> int:
    spec = cfg.domain_spec()
    coeff = cfg.coefficient_field()
    data = cfg.problem_data()
    solver = cfg.solver_config()
    status = 0
    for eps, h in zip(cfg.eps_list, cfg.mesh_h_list()):
        layout = build_layout(spec, eps, cfg.patches["tilde_r"],
                              c1=cfg.patches["c1"], c2=cfg.patches["c2"],
                              nested=bool(cfg.patches["nested"]))
        mesh = build_mesh(spec, layout, h, a_matrix=coeff.A,
                          allow_coarse=bool(cfg.solver["allow_coarse"]),
                          node_cap=int(cfg.solver["node_cap"]))
        K = assemble_stiffness(mesh, coeff)
        u, rep = solve_obstacle(K, data, mesh, layout, solver)
        tag = _eps_tag(eps)
        _field_csv(os.path.join(out, f"u_eps_{tag}.csv"), mesh, u.values)
        write_json(os.path.join(out, f"report_eps_{tag}.json"),
                   rep.to_json_dict())
        if not rep.converged:
            status = 1
    return status


def run_solve_hom(cfg: RunConfig, out: str) -> int:
    spec = cfg.domain_spec()
    coeff = cfg.coefficient_field()
    mu = _resolve_mu(cfg)
    data = cfg.problem_data(mu=mu)
    eps = cfg.eps_list[-1]
    h = cfg.mesh_h_list()[-1]
    layout = build_layout(spec, eps, cfg.patches["tilde_r"],
                          c1=cfg.patches["c1"], c2=cfg.patches["c2"])
    mesh = build_mesh(spec, layout, h, a_matrix=coeff.A,
                      allow_coarse=bool(cfg.solver["allow_coarse"]),
                      node_cap=int(cfg.solver["node_cap"]))
    K = assemble_stiffness(mesh, coeff)
    u, rep = solve_homogenized(K, data, mesh, cfg.solver_config())
    _field_csv(os.path.join(out, "u_hom.csv"), mesh, u.values)
    report = rep.to_json_dict()
    report["mu"] = mu
    write_json(os.path.join(out, "report_hom.json"), report)
    return 0 if rep.converged else 1


def run_check_lemmas(cfg: RunConfig, out: str) -> int:
    family = _patch_family(cfg)
    h = cfg.harness
    order = int(cfg.solver["quad_order"])
    n_polar = int(cfg.solver["n_polar"])
    n_azimuth = int(cfg.solver["n_azimuth"])
    weights = []
    for name in h["weights"]:
        if name == "one":
            weights.append(TestFunctionSpec(
                name="cutoff", lo=h["cutoff_lo"], hi=h["cutoff_hi"]))
        elif name == "x1":
            weights.append(TestFunctionSpec(
                name="cutoff_x1", lo=h["cutoff_lo"], hi=h["cutoff_hi"],
                lateral="x1"))
        else:
            raise ConfigError(f"unknown test weight {name!r}",
                              path="harness.weights")
    v_family = []
    for name in h["v_fields"]:
        if name not in ("zero", "one", "one_minus_omega"):
            raise ConfigError(f"unknown v field {name!r}",
                              path="harness.v_fields")
        v_family.append(VSpec(kind=name))
    v_family = v_family or list(DEFAULT_V_FAMILY)

    report = LemmaCheckReport()
    eps_list = cfg.eps_list
    status = 0
    try:
        for w in weights:
            report.add(check_le2(family, w, eps_list,
                                 quadrature_order=order,
                                 tol=h["tol_capacity"], n_polar=n_polar,
                                 n_azimuth=n_azimuth))
        for v in v_family:
            report.add(check_inner_flux(family, v, weights[0], eps_list,
                                        tol=h["tol_capacity"],
                                        n_polar=n_polar,
                                        n_azimuth=n_azimuth))
            report.add(check_outer_flux_E3(family, v, weights[0], eps_list,
                                           tol=h["tol_capacity"],
                                           quadrature_order=order,
                                           n_polar=n_polar,
                                           n_azimuth=n_azimuth))
            report.add(check_boundary_flux_E2(family, v, weights[0],
                                              eps_list,
                                              tol=h["tol_exact"]))
        report.add(check_boundary_flux_E2(
            family, v_family[-1], weights[0], eps_list,
            tol=h["tol_exact"], lift=float(h["e2_lift"])))
        report.add(check_volume_coupling(
            family, weights[-1], v_family[-1], eps_list,
            slope_min=h["volume_slope_min"], quadrature_order=order,
            n_polar=n_polar, n_azimuth=n_azimuth))
    except ConfigError as exc:
        report.entries.append(_error_entry(eps_list, exc))
        status = 2

    write_json(os.path.join(out, "lemma_checks.json"),
               report.to_json_list())
    cols = {"name": [], "eps": [], "value": [], "limit": [], "target": [],
            "tol": [], "pass": []}
    for e in report.entries:
        main = next(iter(e.series.values())) if e.series else []
        for eps, val in zip(e.eps, main):
            cols["name"].append(e.name)
            cols["eps"].append(eps)
            cols["value"].append(val)
            cols["limit"].append(e.limit)
            cols["target"].append(e.target)
            cols["tol"].append(e.tol)
            cols["pass"].append(e.passed)
    write_csv(os.path.join(out, "lemma_checks.csv"), cols)
    if status:
        return status
    return 0 if report.passed else 1


def _error_entry(eps_list, exc):
    from .harness import LemmaCheckEntry

    return LemmaCheckEntry(name="configuration_error", eps=list(eps_list),
                           series={}, limit=float("nan"),
                           target=float("nan"), tol=0.0, passed=False,
                           note=str(exc))


def run_converge(cfg: RunConfig, out: str) -> int:
    family = _patch_family(cfg)
    mu = float(cfg.problem["mu"]) if cfg.problem["mu"] is not None else None
    cell = bool(cfg.solver["cell_reduction"])
    report = convergence_study(
        family, cfg.problem_data(), cfg.eps_list,
        None if (cell and cfg.solver["mesh_h"] is None)
        else cfg.mesh_h_list(),
        solver=cfg.solver_config(), mu_override=mu,
        mu_eps_list=[float(e) for e in cfg.solver["mu_eps"]],
        allow_coarse=bool(cfg.solver["allow_coarse"]),
        node_cap=int(cfg.solver["node_cap"]),
        nested_check=bool(cfg.solver["nested_check"]),
        nested_mesh_h=float(cfg.solver["nested_mesh_h"]),
        cell_reduction=cell,
        cell_mesh_factor=float(cfg.solver["cell_mesh_factor"]))
    write_json(os.path.join(out, "convergence.json"), report.to_json_dict())
    cols = {
        "eps": report.eps,
        "energy_eps": report.energies,
        "dist_l2": report.dist_l2,
        "dist_sigma": report.dist_sigma,
        "active_fraction": report.active_fraction,
    }
    write_csv(os.path.join(out, "convergence.csv"), cols)
    return 0 if report.passed else 1


_COMMANDS = {
    "dump-layout": run_dump_layout,
    "corrector-scan": run_corrector_scan,
    "mu-limit": run_mu_limit,
    "solve-eps": run_solve_eps,
    "solve-hom": run_solve_hom,
    "check-lemmas": run_check_lemmas,
    "converge": run_converge,
}


def dispatch(subcommand: str, cfg: RunConfig, out_dir: str) -> int:
    """Run one subcommand pipeline; artifacts land in ``out_dir``."""
    if subcommand not in _COMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    os.makedirs(out_dir, exist_ok=True)
    return _COMMANDS[subcommand](cfg, out_dir)


def _env_default(name: str, fallback=None):
    return os.environ.get(_ENV_PREFIX + name.upper(), fallback)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="homlab",
        description="Boundary-obstacle homogenization laboratory")
    parser.add_argument("--version", action="version",
                        version=f"homlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=_env_default("config"),
                       required=_env_default("config") is None,
                       help="path to the JSON configuration")
        p.add_argument("--out", default=_env_default("out", "out"),
                       help="output directory for artifacts")
        p.add_argument("--threads", type=int,
                       default=int(_env_default("threads", "1")),
                       help="worker hint; pipelines are deterministic "
                            "regardless")
        p.add_argument("--seed", type=int,
                       default=int(_env_default("seed", "0")),
                       help="reserved; all pipelines are deterministic")
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        cfg = load_config(args.config)
        return dispatch(args.command, cfg, args.out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except HomlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
