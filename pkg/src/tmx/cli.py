"""``tmx`` command-line entry point.

Exit codes: 0 success, 1 numerical failure (a diagnostic JSON is written to
the output path), 2 usage error. Every run writes its resolved
configuration next to the main output as ``<out>.config``.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys

import numpy as np

from . import fem
from . import functional as F
from .config import (
    ConfigError,
    RunConfig,
    parse_center,
    parse_eps,
    parse_floats,
    parse_mesh_source,
    resolve_mesh,
)
from .maximizer import AscentOptions, InitRejectedError, SeedSpec, blowup_diagnostics, multi_start
from .moser import build_test_function
from .output import atomic_write, dumps_json, write_csv, write_field, write_json
from .potential import concentration_level, green_function
from .radial import ShootingError, default_energy, shoot_radial, write_profile_csv
from .threshold import BracketError, Protocol, estimate_threshold, monotonicity_scan

log = logging.getLogger("tmx")

__all__ = ["build_parser", "parse_args", "run", "main", "UsageError"]

COMMANDS = ("mesh", "potential", "maximize", "bubble", "radial", "scan", "threshold", "verify")

_NUMERICAL_ERRORS = (fem.SolverError, fem.MeshError, InitRejectedError, F.DegenerateNormalizerError,
                     ShootingError, BracketError, FloatingPointError)


class UsageError(Exception):
    """Invalid combination of options discovered after parsing."""


def _energy_arg(text):
    if text == "auto":
        return text
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("E must be positive or 'auto'")
    return repr(value)


def _eps_arg(text):
    try:
        return parse_eps(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid epsilon {text!r}") from None


def _float_list(text):
    try:
        parse_floats(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    return text


def _add_mesh(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--mesh", help="disk:LEVEL[,RADIUS], rect:W,H,NX,NY or a tmmesh file")
    g.add_argument("--disk", type=int, metavar="LEVEL", help="built-in unit disk at this refinement level")
    g.add_argument("--rect", type=_float_list, metavar="W,H,NX,NY", help="built-in rectangle")
    p.add_argument("--refine", type=int, help="extra uniform refinements")


def _add_params(p, with_lambda=True):
    if with_lambda:
        p.add_argument("--lambda", dest="lam", type=float, help="perturbation strength")
    p.add_argument("--p", type=float, help="perturbation exponent (>= 1)")
    p.add_argument("--variant", choices=("with", "without"), help="integrand with or without the -1")


def _add_solver(p, tol_flag="--tol"):
    p.add_argument(tol_flag, dest="tol", type=float, help="Euler-Lagrange residual tolerance")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--order", type=int, choices=(1, 2, 3), help="quadrature order")
    p.add_argument("--seeds", help='seed spec, e.g. "bubble:6,8,10;eigen;random:3"')
    p.add_argument("--rng-seed", type=int)


def build_parser():
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="key = value file; explicit flags override it")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="count", help="more logging (repeatable)")

    parser = argparse.ArgumentParser(prog="tmx", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    kw = dict(parents=[common], argument_default=argparse.SUPPRESS)

    p = sub.add_parser("mesh", help="build or refine a mesh and write it as tmmesh text", **kw)
    _add_mesh(p)

    p = sub.add_parser("potential", help="Robin function, harmonic center and concentration level", **kw)
    _add_mesh(p)
    p.add_argument("--stride", type=int, help="solve for every k-th interior vertex only")

    p = sub.add_parser("maximize", help="multi-start ascent for the perturbed functional", **kw)
    _add_mesh(p)
    _add_params(p)
    _add_solver(p)
    p.add_argument("--save-field", action="store_const", const=True, help="also write <out>.field.txt")

    p = sub.add_parser("bubble", help="normalized concentrating test function", **kw)
    _add_mesh(p)
    p.add_argument("--eps", type=_eps_arg, help="epsilon, as a number or e^-K")
    p.add_argument("--center", type=_float_list, metavar="X,Y", help="pole (default: harmonic center)")

    p = sub.add_parser("radial", help="shoot the radial equation and compare with the expansion", **kw)
    p.add_argument("--gamma", type=float)
    p.add_argument("--E", type=_energy_arg, help="normalizer, or 'auto' for gamma^2 pi e")
    _add_params(p)
    p.add_argument("--delta", type=float)

    p = sub.add_parser("scan", help="best value along a lambda grid", **kw)
    _add_mesh(p)
    _add_params(p, with_lambda=False)
    _add_solver(p)
    p.add_argument("--lambdas", type=_float_list, help="comma-separated, nondecreasing")

    p = sub.add_parser("threshold", help="bisection estimate of the attainment threshold", **kw)
    _add_mesh(p)
    _add_params(p, with_lambda=False)
    _add_solver(p, tol_flag="--solver-tol")
    p.add_argument("--bracket", type=_float_list, metavar="LO,HI")
    p.add_argument("--tol", dest="threshold_tol", type=float, help="final bracket width")
    p.add_argument("--levels", type=int, help="meshes per verdict (given mesh plus refinements)")
    p.add_argument("--margin-fraction", type=float)

    p = sub.add_parser("verify", help="run the acceptance checks", **kw)
    p.add_argument("--criteria", help='"all", "fast" or a comma-separated list of numbers')
    return parser


def parse_args(argv=None):
    """Resolve defaults, config file and flags into a :class:`RunConfig`.

    Usage errors exit with status 2.
    """
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    cmd = ns.pop("command")
    cfg = RunConfig()
    path = ns.pop("config", None)
    if path is not None:
        try:
            with open(path) as fh:
                cfg = RunConfig.from_text(fh.read(), base=cfg)
        except (OSError, ConfigError) as exc:
            parser.error(f"config {path}: {exc}")
    cfg.command = cmd
    verbose = ns.pop("verbose", 0)
    if "disk" in ns:
        ns["mesh"] = f"disk:{ns.pop('disk')}"
    if "rect" in ns:
        ns["mesh"] = f"rect:{ns.pop('rect')}"
    for name, value in ns.items():
        setattr(cfg, name, value)
    if not cfg.out and cmd != "verify":
        parser.error("--out is required (on the command line or as output.path in --config)")
    try:
        _validate(cfg)
    except (UsageError, ConfigError, ValueError) as exc:
        parser.error(str(exc))
    cfg.verbose = verbose
    return cfg


def _validate(cfg):
    if cfg.p < 1:
        raise UsageError("p must be >= 1")
    if cfg.variant not in ("with", "without"):
        raise UsageError("variant must be 'with' or 'without'")
    if cfg.refine < 0:
        raise UsageError("refine must be >= 0")
    if cfg.command in ("mesh", "potential", "maximize", "bubble", "scan", "threshold"):
        src = parse_mesh_source(cfg.mesh)
        if src[0] == "file" and not os.path.exists(src[1]):
            raise UsageError(f"mesh file {src[1]!r} not found")
    if cfg.command == "threshold" and len(parse_floats(cfg.bracket)) != 2:
        raise UsageError("bracket needs two values LO,HI")
    if cfg.command == "bubble":
        parse_center(cfg.center)
        if not 0 < cfg.eps < math.exp(-1):
            raise UsageError("eps must lie in (0, 1/e)")
    if cfg.command == "verify" and cfg.criteria not in ("all", "fast"):
        try:
            bad = [n for n in parse_floats(cfg.criteria) if n not in range(1, 13)]
        except ValueError:
            bad = [cfg.criteria]
        if bad:
            raise UsageError(f"unknown criteria {bad}")


def _params(cfg):
    return F.PerturbParams(cfg.lam, cfg.p, cfg.variant)


def _options(cfg):
    return AscentOptions(tol=cfg.tol, max_iters=cfg.max_iters, order=cfg.order)


def _seed_spec(cfg):
    return SeedSpec.parse(cfg.seeds, rng_seed=cfg.rng_seed)


def _cmd_mesh(cfg):
    mesh = resolve_mesh(cfg.mesh, cfg.refine)
    fem.save_mesh(mesh, cfg.out)
    log.info("wrote %d vertices, %d triangles (area %.12g, h %.4g, min angle %.2f deg)",
             mesh.n_vertices, mesh.n_triangles, mesh.area, mesh.h, np.degrees(mesh.min_angle))
    return 0


def _cmd_potential(cfg):
    mesh = resolve_mesh(cfg.mesh, cfg.refine)
    rep = concentration_level(mesh, stride=cfg.stride)
    d = rep.to_dict()
    d["concentration_excess"] = rep.concentration_excess
    write_json(cfg.out, d)
    return 0


def _cmd_maximize(cfg):
    mesh = resolve_mesh(cfg.mesh, cfg.refine)
    params = _params(cfg)
    spec = _seed_spec(cfg)
    rep = concentration_level(mesh)
    best = multi_start(mesh, params, spec, _options(cfg), potential_report=rep)
    d = best.to_dict()
    other = F.PerturbParams(params.lam, params.p,
                            "with" if params.variant is F.Variant.WITHOUT_MINUS_ONE else "without")
    d["J_other_variant"] = {"variant": other.variant.value, "J": F.evaluate(mesh, best.u, other, cfg.order)}
    d["S_delta"] = rep.concentration_level
    d["margin"] = best.J - rep.concentration_level
    d["harmonic_center"] = [float(c) for c in rep.harmonic_center]
    try:
        d["blowup"] = blowup_diagnostics(best, mesh, rep).to_dict()
    except ValueError as exc:
        d["blowup"] = {"error": str(exc)}
    if cfg.save_field:
        write_field(cfg.out + ".field.txt", best.u)
    write_json(cfg.out, d)
    if best.stagnated or not best.converged:
        log.error("best run did not converge (stagnated=%s, residual %.3e)", best.stagnated, best.el_residual)
        return 1
    return 0


def _cmd_bubble(cfg):
    mesh = resolve_mesh(cfg.mesh, cfg.refine)
    center = parse_center(cfg.center)
    green = green_function(mesh, center) if center is not None else concentration_level(mesh).green
    phi, info = build_test_function(mesh, cfg.eps, green=green, return_info=True)
    write_field(cfg.out, phi)
    k = info["constants"]
    summary = {"epsilon": cfg.eps, "center": [float(c) for c in info["center"]], "pre_norm": info["pre_norm"],
               "R": k.R, "t_eps": k.t_eps, "C_sq": k.C_sq, "A": k.A, "A_matched": k.A_matched}
    sys.stdout.write(dumps_json(summary))
    return 0


def _cmd_radial(cfg):
    E = default_energy(cfg.gamma) if cfg.E == "auto" else float(cfg.E)
    prof = shoot_radial(cfg.gamma, E, _params(cfg), cfg.delta)
    if prof.sign_change:
        log.warning("profile changes sign before r_k_delta; written up to the zero")
    write_profile_csv(prof, cfg.out)
    return 0


def _cmd_scan(cfg):
    mesh = resolve_mesh(cfg.mesh, cfg.refine)
    scan = monotonicity_scan(mesh, cfg.p, parse_floats(cfg.lambdas), _seed_spec(cfg), _options(cfg),
                             variant=cfg.variant)
    write_csv(cfg.out, ["lambda", "J_best", "margin", "peak_c", "attained", "inconclusive"], scan.table())
    if not scan.reliable:
        log.error("J_best increases along the grid at indices %s; scan marked unreliable", scan.violations)
        return 1
    return 0


def _cmd_threshold(cfg):
    mesh = resolve_mesh(cfg.mesh, cfg.refine)
    protocol = Protocol(seeds=_seed_spec(cfg), margin_fraction=cfg.margin_fraction, levels=cfg.levels,
                        options=_options(cfg))
    try:
        est = estimate_threshold(mesh, cfg.p, parse_floats(cfg.bracket), cfg.threshold_tol, protocol,
                                 variant=cfg.variant)
    except BracketError as exc:
        write_json(cfg.out, {"error": "BracketError", "message": str(exc),
                             "verdicts": [v.to_dict() for v in exc.verdicts]})
        log.error("%s", exc)
        return 1
    d = est.to_dict()
    d["protocol"] = protocol.to_dict()
    write_json(cfg.out, d)
    return 0


def _cmd_verify(cfg):
    from .verify import run_checks

    sel = cfg.criteria if cfg.criteria in ("all", "fast") else [int(n) for n in parse_floats(cfg.criteria)]
    results = run_checks(sel)
    for r in results:
        print(r.line())
        for note in r.notes:
            print(f"    note: {note}")
    if cfg.out:
        write_json(cfg.out, {"results": [r.to_dict() for r in results]})
    return 0 if all(r.passed for r in results) else 1


_HANDLERS = {
    "mesh": _cmd_mesh, "potential": _cmd_potential, "maximize": _cmd_maximize, "bubble": _cmd_bubble,
    "radial": _cmd_radial, "scan": _cmd_scan, "threshold": _cmd_threshold, "verify": _cmd_verify,
}


def _thread_cap():
    raw = os.environ.get("TMX_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"TMX_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"TMX_THREADS must be a positive integer, got {raw!r}")
    return n


def run(cfg):
    """Execute a resolved configuration and return the exit code."""
    from threadpoolctl import threadpool_limits

    try:
        cap = _thread_cap()
    except UsageError as exc:
        print(f"tmx: error: {exc}", file=sys.stderr)
        return 2
    if cfg.out:
        atomic_write(cfg.out + ".config", cfg.to_text())
    try:
        with threadpool_limits(limits=cap):
            return _HANDLERS[cfg.command](cfg)
    except _NUMERICAL_ERRORS as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        if cfg.out:
            diag = {"error": type(exc).__name__, "message": str(exc), "command": cfg.command}
            history = getattr(exc, "residual_history", None)
            if history is not None:
                diag["residual_history"] = [float(v) for v in history]
            write_json(cfg.out, diag)
        return 1


def main(argv=None):
    try:
        cfg = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(getattr(cfg, "verbose", 0), 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
