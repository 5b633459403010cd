"""Acceptance checks: closed-form identities, oracles and desk experiments.

Each check returns a :class:`CheckResult` with the measured quantities, so
``tmx verify`` and the test suite report the same numbers. Time limits are
part of each check.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import fem
from . import functional as F
from . import radial
from .config import RunConfig
from .maximizer import AscentOptions, SeedSpec, make_seeds, maximize, multi_start
from .moser import DEFAULT_EPS_GRID, build_test_function, lower_bound_prediction
from .output import dumps_json
from .potential import concentration_level, green_function, robin_at
from .threshold import Protocol, attained_indicator, build_hierarchy, monotonicity_scan

log = logging.getLogger(__name__)

__all__ = ["CheckResult", "CHECKS", "FAST", "run_checks"]

DISK_LEVEL = 4
S_DISK = math.pi * (1.0 + math.e)


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    runtime: float
    limit: float
    details: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.criterion:2d} {self.name} ({self.runtime:.2f} s, limit {self.limit:g} s)"

    def to_dict(self):
        return {
            "criterion": self.criterion, "name": self.name, "passed": self.passed,
            "runtime": self.runtime, "limit": self.limit, "details": self.details, "notes": self.notes,
        }


def _disk(level=DISK_LEVEL):
    return fem.build_disk_mesh(level)


def check_bubble_identities():
    ident = radial.bubble_identities(R_max=100.0)
    target = math.pi * 1e4 / 10001.0
    mass_err = abs(ident["mass"] - target)
    ok = ident["liouville_residual"] <= 1e-10 and mass_err <= 1e-6
    return ok, {"liouville_residual": ident["liouville_residual"], "mass": ident["mass"],
                "mass_target": target, "mass_error": mass_err}, []


def check_s0():
    r = np.linspace(0.05, 100.0, 2000)
    res = float(np.max(np.abs(radial.s0_ode_residual(r))))
    a, b = radial.s0_asymptotic_fit(math.exp(3.0), math.exp(5.0))
    B0 = radial.RADIAL_CONSTANTS.B0
    slope_err = abs(a - 1.0)
    icpt_err = abs(b - B0) / B0
    ok = res <= 1e-6 and slope_err <= 0.01 and icpt_err <= 0.02
    notes = []
    if not ok:
        a2, b2 = radial.s0_asymptotic_fit(math.exp(6.0), math.exp(8.0))
        notes.append(f"fit on [e^6, e^8] gives slope {a2:.6f}, intercept {b2:.6f}; "
                     "the [e^3, e^5] window still carries the O(log r / r^2) transient")
    return ok, {"ode_residual": res, "slope": a, "intercept": b, "slope_rel_error": slope_err,
                "intercept_rel_error": icpt_err, "B0": B0}, notes


def check_disk_potential():
    mesh = _disk()
    rep = concentration_level(mesh)
    tau0 = robin_at(mesh, (0.0, 0.0))
    tau06 = robin_at(mesh, (0.6, 0.0))
    exact06 = -math.log(0.64) / (2 * math.pi)
    rel = abs(rep.concentration_level - S_DISK) / S_DISK
    ok = abs(tau0) <= 5e-3 and abs(tau06 - exact06) <= 5e-3 and rel <= 1e-2
    return ok, {"tau_center": tau0, "tau_0.6": tau06, "tau_0.6_exact": exact06,
                "S_delta": rep.concentration_level, "S_delta_exact": S_DISK, "S_delta_rel_error": rel}, []


def check_green(seed=0):
    mesh = _disk()
    rng = np.random.default_rng(seed)
    interior = mesh.interior
    worst, worst_min = 0.0, np.inf
    for _ in range(10):
        x, y = rng.choice(interior, size=2, replace=False)
        gx, gy = green_function(mesh, int(x)).values, green_function(mesh, int(y)).values
        worst = max(worst, abs(gx[y] - gy[x]))
        mask = np.ones(mesh.n_vertices, dtype=bool)
        mask[mesh.boundary] = False
        mask[[x, y]] = False
        worst_min = min(worst_min, gx[mask].min(), gy[mask].min())
    return worst <= 1e-3 and worst_min > 0, {"max_asymmetry": worst, "min_interior_G": float(worst_min)}, []


def _smooth_field(mesh, rng, n_modes=4):
    x, y = mesh.vertices.T
    u = np.zeros(mesh.n_vertices)
    for _ in range(n_modes):
        kx, ky = rng.uniform(-3, 3, size=2)
        u += rng.uniform(-1, 1) * np.cos(kx * x + ky * y + rng.uniform(0, 2 * np.pi))
    u *= np.clip(1.0 - x * x - y * y, 0.0, None)
    u[mesh.boundary] = 0.0
    return u / max(np.max(np.abs(u)), 1e-300)


def check_functional(seed=0):
    mesh = fem.build_disk_mesh(3)
    rng = np.random.default_rng(seed)
    params = F.PerturbParams(2.0, 3.0)
    u = 0.9 * _smooth_field(mesh, rng)
    b = F.load_vector(mesh, u, params)
    h = 1e-5
    worst = 0.0
    for _ in range(20):
        phi = _smooth_field(mesh, rng)
        fd = (F.evaluate(mesh, u + h * phi, params) - F.evaluate(mesh, u - h * phi, params)) / (2 * h)
        exact = float(b @ phi)
        worst = max(worst, abs(fd - exact) / abs(exact))
    with_ = F.evaluate(mesh, u, F.PerturbParams(2.0, 3.0, "with"))
    without = F.evaluate(mesh, u, params)
    _, w, _ = mesh.quadrature(2)
    variant_err = abs((without - with_) - float(np.sum(w)))
    even = F.evaluate(mesh, -u, params) == without
    ok = worst <= 1e-6 and variant_err <= 1e-12 * without and even
    return ok, {"fd_max_rel_error": worst, "variant_identity_error": variant_err,
                "area": mesh.area, "even": bool(even)}, []


def check_maximizer_contracts():
    mesh = _disk()
    rep = concentration_level(mesh)
    params = F.PerturbParams(5.0, 2.0)
    u0 = build_test_function(mesh, math.exp(-8.0), green=rep.green)
    res = maximize(mesh, params, u0, seed_id="bubble:8")
    hist = np.asarray(res.history)
    monotone = bool(np.all(np.diff(hist) >= 0.0))
    norm_err = abs(fem.h1_seminorm(mesh, res.u) - 1.0)
    en = res.energy
    ident = abs(en.gradient_norm_sq - (en.I_E - en.I_P))
    ok = monotone and norm_err <= 1e-10 and ident <= 1e-4 * en.I_E and res.converged
    return ok, {"monotone": monotone, "norm_error": norm_err, "identity_error": ident, "I_E": en.I_E,
                "I_P": en.I_P, "J": res.J, "el_residual": res.el_residual, "iterations": res.iterations}, []


def check_lambda_zero():
    params = F.PerturbParams(0.0, 2.0)
    levels, Js, cs = [3, 4, 5], [], []
    test_values = []
    for lev in levels:
        mesh = fem.build_disk_mesh(lev)
        rep = concentration_level(mesh)
        best = multi_start(mesh, params, SeedSpec(bubble_eps=DEFAULT_EPS_GRID[:3]), potential_report=rep)
        Js.append(best.J)
        cs.append(best.c)
        if lev == levels[-1]:
            test_values = [F.evaluate(mesh, build_test_function(mesh, e, green=rep.green), params)
                           for e in DEFAULT_EPS_GRID]
    beats = all(Js[-1] >= t for t in test_values)
    increasing = all(b > a for a, b in zip(Js, Js[1:]))
    ratio = Js[-1] / S_DISK
    notes = []
    if 0.85 <= ratio < 0.9:
        notes.append(f"finest J_best is {ratio:.3f} of pi(1+e): mesh-resolution finding")
    ok = beats and increasing and ratio >= 0.85
    return ok, {"levels": levels, "J_best": Js, "peak_c": cs, "test_function_values": test_values,
                "ratio_to_pi_1_plus_e": ratio}, notes


def check_attainment_p2():
    mesh = _disk()
    v = attained_indicator(mesh, F.PerturbParams(10.0, 2.0), Protocol(levels=2))
    return v.attained and v.margin > 0, v.to_dict(), list(v.reasons)


def check_p3_prediction():
    mesh = _disk()
    rep = concentration_level(mesh)
    lb = lower_bound_prediction(mesh, math.exp(-12.0), F.PerturbParams(100.0, 3.0), rep)
    # the smallest C^2 at which the positive term wins: C^2 > (lam int G^3 / (4 pi int G^2))^2
    C_sq_needed = (100.0 * lb.Gp / (4 * math.pi * lb.G2)) ** 2
    R_needed = 2 * math.pi * (C_sq_needed - math.log(math.pi) / (4 * math.pi) + 1 / (4 * math.pi))
    notes = []
    if lb.value <= lb.S_delta:
        notes.append(f"at eps = e^-12, C^2 = {lb.C_sq:.4f}; the positive term needs C^2 > {C_sq_needed:.4f}, "
                     f"i.e. -ln eps > {R_needed:.2f}")
    d = lb.to_dict()
    d.update({"C_sq_needed": C_sq_needed, "R_needed": R_needed})
    return lb.value > lb.S_delta, d, notes


def check_radial_expansion():
    scaled, raw = [], []
    for g in (4.0, 6.0, 8.0):
        prof = radial.shoot_radial(g, E=g * g * math.pi * math.e, delta=0.5)
        e = radial.expansion_error(prof)
        scaled.append(e["scaled"])
        raw.append(e["raw"])
    spread = max(scaled) / min(scaled)
    decreasing = all(b < a for a, b in zip(raw, raw[1:]))
    return spread <= 5.0 and decreasing, {"gammas": [4.0, 6.0, 8.0], "scaled": scaled, "raw": raw,
                                          "max_min_ratio": spread}, []


def check_monotonicity():
    mesh = _disk()
    rep = concentration_level(mesh)
    scan = monotonicity_scan(mesh, 2.0, [0.0, 1.0, 2.0, 5.0], potential_report=rep)
    near = monotonicity_scan(mesh, 2.0, [0.0, 0.01], potential_report=rep)
    J0, J001 = near.rows[0].J_best, near.rows[1].J_best
    rel = abs(J001 - J0) / abs(J0)
    Js = [r.J_best for r in scan.rows]
    mono = all(b <= a + scan.tolerance for a, b in zip(Js, Js[1:]))
    return mono and rel <= 0.01, {"lambdas": [r.lam for r in scan.rows], "J_best": Js,
                                  "tolerance": scan.tolerance, "J_0": J0, "J_0.01": J001,
                                  "rel_change": rel}, []


def check_determinism(tmpdir=None):
    import os
    import tempfile

    mesh = fem.build_disk_mesh(2)
    spec = SeedSpec(bubble_eps=(), eigen=False, random_bumps=2, rng_seed=7)
    params = F.PerturbParams(1.0, 2.0)
    opts = AscentOptions(max_iters=200)

    def once():
        res = multi_start(mesh, params, seeds=make_seeds(mesh, spec), options=opts)
        return dumps_json(res.to_dict())

    same = once() == once()
    with tempfile.TemporaryDirectory(dir=tmpdir) as d:
        path = os.path.join(d, "m.tmmesh")
        fem.save_mesh(mesh, path)
        m2 = fem.load_mesh(path)
        mesh_ok = np.array_equal(mesh.vertices, m2.vertices) and np.array_equal(mesh.triangles, m2.triangles)
    cfg = RunConfig(command="maximize", mesh="disk:3", lam=math.pi, eps=math.exp(-12.0), seeds="eigen")
    cfg_ok = RunConfig.from_text(cfg.to_text()) == cfg
    return same and mesh_ok and cfg_ok, {"byte_identical": same, "mesh_round_trip": bool(mesh_ok),
                                         "config_round_trip": cfg_ok}, []


CHECKS = {
    1: ("bubble identities", check_bubble_identities, 1.0),
    2: ("S0 verification", check_s0, 5.0),
    3: ("disk potential theory", check_disk_potential, 60.0),
    4: ("Green symmetry and positivity", check_green, 60.0),
    5: ("functional correctness", check_functional, 10.0),
    6: ("maximizer contracts", check_maximizer_contracts, 120.0),
    7: ("lambda = 0 extremality", check_lambda_zero, 600.0),
    8: ("p = 2 attainment below 4 pi", check_attainment_p2, 600.0),
    9: ("p = 3 lower-bound prediction", check_p3_prediction, 60.0),
    10: ("radial expansion remainder", check_radial_expansion, 30.0),
    11: ("monotonicity scan", check_monotonicity, 900.0),
    12: ("determinism and I/O", check_determinism, 5.0),
}

FAST = (1, 2, 3, 4, 5, 6, 9, 10, 12)


def run_check(number):
    name, fn, limit = CHECKS[number]
    t0 = time.perf_counter()
    ok, details, notes = fn()
    dt = time.perf_counter() - t0
    if dt >= limit:
        notes = list(notes) + [f"runtime {dt:.1f} s exceeds the {limit:g} s limit"]
    return CheckResult(number, name, bool(ok) and dt < limit, dt, limit, details, notes)


def run_checks(selection="all"):
    """Run the selected checks (``"all"``, ``"fast"`` or an iterable of numbers)."""
    if selection == "all":
        numbers = sorted(CHECKS)
    elif selection == "fast":
        numbers = list(FAST)
    else:
        numbers = [int(n) for n in selection]
    return [run_check(n) for n in numbers]
