"""Attainment classification, threshold bisection and lambda scans.

A discrete problem always has a maximizer, so "attained" is operational:
the best value must clear the concentration level by a margin on the
finest mesh, and the peak height must settle under refinement. A
concentrating (non-attained) family instead shows ``J_best -> S^delta``
with the peak growing as the mesh is refined.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem
from .functional import PerturbParams
from .maximizer import AscentOptions, InitRejectedError, SeedSpec, make_seeds, maximize
from .potential import concentration_level

log = logging.getLogger(__name__)

__all__ = [
    "ATTAINED",
    "NOT_ATTAINED",
    "INCONCLUSIVE",
    "Protocol",
    "AttainmentVerdict",
    "ThresholdEstimate",
    "BracketError",
    "DeficitPrediction",
    "ScanRow",
    "MonotonicityScan",
    "build_hierarchy",
    "attained_indicator",
    "estimate_threshold",
    "predicted_deficit",
    "monotonicity_scan",
]

ATTAINED = "attained"
NOT_ATTAINED = "not_attained"
INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class Protocol:
    """How a single attainment verdict is reached.

    ``margin_fraction`` scales ``S^delta - |Omega|`` into ``margin_min``;
    ``levels`` counts the meshes used (the given mesh plus ``levels - 1``
    uniform refinements); ``peak_tol`` bounds the relative change of the
    peak height between the two finest levels.
    """

    seeds: SeedSpec = SeedSpec()
    margin_fraction: float = 0.05
    levels: int = 2
    peak_tol: float = 0.2
    options: AscentOptions = AscentOptions()
    protocol_id: str = "default"

    def to_dict(self):
        return {
            "seeds": self.seeds.to_text(),
            "rng_seed": self.seeds.rng_seed,
            "margin_fraction": self.margin_fraction,
            "levels": self.levels,
            "peak_tol": self.peak_tol,
            "options": self.options.to_dict(),
            "protocol_id": self.protocol_id,
        }


@dataclass(eq=False)
class AttainmentVerdict:
    lam: float
    p: float
    J_best: float
    S_delta: float
    margin: float
    margin_min: float
    status: str
    refinement_trace: list  # (J_best, peak c) per level, coarse to fine
    protocol_id: str
    reasons: list = field(default_factory=list)

    @property
    def attained(self):
        return self.status == ATTAINED

    @property
    def inconclusive(self):
        return self.status == INCONCLUSIVE

    def to_dict(self):
        return {
            "lambda": self.lam, "p": self.p, "J_best": self.J_best, "S_delta": self.S_delta,
            "margin": self.margin, "margin_min": self.margin_min, "status": self.status,
            "attained": self.attained,
            "refinement_trace": [[float(a), float(b)] for a, b in self.refinement_trace],
            "protocol_id": self.protocol_id, "reasons": list(self.reasons),
        }


def build_hierarchy(mesh, levels):
    """``[(mesh_0, report_0), ...]`` for the mesh and its successive refinements."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    out, m = [], mesh
    for i in range(levels):
        if i:
            m = fem.refine(m)
        out.append((m, concentration_level(m)))
    return out


def _best_over_seeds(mesh, rep, params, protocol):
    best, any_converged, rejected = None, False, 0
    for seed_id, u0 in make_seeds(mesh, protocol.seeds, rep):
        try:
            res = maximize(mesh, params, u0, protocol.options, seed_id=seed_id)
        except InitRejectedError as exc:
            log.info("seed %s rejected: %s", seed_id, exc)
            rejected += 1
            continue
        any_converged |= res.converged
        if best is None or res.J > best.J:
            best = res
    return best, any_converged, rejected


def attained_indicator(mesh, params, protocol=None, hierarchy=None):
    """Classify ``params`` on ``mesh`` as attained, not attained or inconclusive.

    ``hierarchy`` (from :func:`build_hierarchy`) may be passed to reuse
    refined meshes and their potential reports across calls.
    """
    protocol = protocol or Protocol()
    if hierarchy is None:
        hierarchy = build_hierarchy(mesh, protocol.levels)
    trace, reasons, stalled = [], [], False
    for m, rep in hierarchy:
        best, ok, rejected = _best_over_seeds(m, rep, params, protocol)
        if best is None:
            stalled = True
            reasons.append(f"all {rejected} seeds rejected (E <= 0) on the {m.n_vertices}-vertex mesh")
        elif not ok:
            stalled = True
            reasons.append(f"no seed converged on the {m.n_vertices}-vertex mesh")
        if best is None:
            trace.append((float("nan"), float("nan")))
        else:
            trace.append((best.J, best.c))
    rep = hierarchy[-1][1]
    S = rep.concentration_level
    margin_min = protocol.margin_fraction * rep.concentration_excess
    J_best = trace[-1][0]
    margin = J_best - S
    if stalled:
        status = INCONCLUSIVE
    else:
        clears = margin > margin_min
        if not clears:
            reasons.append(f"margin {margin:.6g} does not exceed {margin_min:.6g}")
        stable = True
        if len(trace) > 1:
            c0, c1 = trace[-2][1], trace[-1][1]
            change = abs(c1 - c0) / abs(c0)
            stable = change <= protocol.peak_tol
            if not stable:
                reasons.append(f"peak height changed by {change:.1%} under refinement")
        status = ATTAINED if clears and stable else NOT_ATTAINED
    return AttainmentVerdict(params.lam, params.p, J_best, S, margin, margin_min, status,
                             trace, protocol.protocol_id, reasons)


class BracketError(ValueError):
    """A bisection endpoint does not have its expected classification."""

    def __init__(self, message, verdicts):
        super().__init__(message)
        self.verdicts = verdicts


@dataclass(eq=False)
class ThresholdEstimate:
    p: float
    bracket_low: float
    bracket_high: float
    tolerance: float
    verdicts: list
    flagged_steps: list = field(default_factory=list)

    @property
    def path_consistent(self):
        """No attained verdict above a non-attained one along the recorded path."""
        pts = sorted((v.lam, v.attained) for v in self.verdicts)
        seen_not = False
        for _, att in pts:
            if att and seen_not:
                return False
            seen_not |= not att
        return True

    def to_dict(self):
        return {
            "p": self.p, "bracket_low": self.bracket_low, "bracket_high": self.bracket_high,
            "tolerance": self.tolerance, "path_consistent": self.path_consistent,
            "relative_to_4pi": [self.bracket_low / (4 * np.pi), self.bracket_high / (4 * np.pi)],
            "flagged_steps": list(self.flagged_steps),
            "verdicts": [v.to_dict() for v in self.verdicts],
        }


def estimate_threshold(mesh, p, bracket_init, tol, protocol=None, variant="without"):
    """Bisect on ``lambda`` between an attained and a non-attained endpoint.

    Inconclusive verdicts count as not attained and are listed in
    ``flagged_steps``.
    """
    protocol = protocol or Protocol()
    lo, hi = map(float, bracket_init)
    if not lo < hi:
        raise ValueError("bracket must satisfy low < high")
    if not tol > 0:
        raise ValueError("tol must be positive")
    hierarchy = build_hierarchy(mesh, protocol.levels)

    def judge(lam):
        return attained_indicator(mesh, PerturbParams(lam, p, variant), protocol, hierarchy)

    v_lo, v_hi = judge(lo), judge(hi)
    verdicts = [v_lo, v_hi]
    if not v_lo.attained or v_hi.attained:
        raise BracketError(
            f"bracket endpoints misclassified: lambda={lo} is {v_lo.status}, lambda={hi} is {v_hi.status}",
            verdicts,
        )
    flagged = []
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        v = judge(mid)
        verdicts.append(v)
        if v.inconclusive:
            flagged.append(mid)
        if v.attained:
            lo = mid
        else:
            hi = mid
        log.info("bisection: lambda=%.6g %s, bracket [%.6g, %.6g]", mid, v.status, lo, hi)
    return ThresholdEstimate(float(p), lo, hi, float(tol), verdicts, flagged)


@dataclass(frozen=True)
class DeficitPrediction:
    """Two-term prediction of ``||grad u||^2`` along a concentrating family.

    ``C1_term`` is the perturbation deficit in the ``u`` normalization,
    ``I_P_term = 4 pi C1_term`` the same quantity in the ``v`` normalization.
    ``C2_over_gamma4`` comes from a supplied fit constant.
    """

    gamma: float
    p: float
    lam: float
    Gp: float
    C1_term: float
    I_P_term: float
    C2_over_gamma4: float
    predicted_norm_sq: float

    def to_dict(self):
        return dict(self.__dict__)


def predicted_deficit(potential_report, p, lam, gamma, C2_fit=0.0, green_scale=1.0):
    """``1 - C1_term + C2_fit / gamma^4`` from the Green function at the harmonic center.

    ``C1_term = lam p (4 pi)^{-p/2} int G^p / (2 (S^delta - |Omega|) gamma^{p+2})``,
    which takes ``gamma v`` to converge to ``G``. With ``green_scale = 4 pi``
    it takes ``gamma v`` to converge to ``4 pi G`` instead (equivalently
    ``c u -> G``); the integral is then scaled by ``green_scale^p``.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    Gp = potential_report.green.power_integral(float(p))
    excess = potential_report.concentration_excess
    I_P = lam * p * (4 * np.pi) ** (1 - p / 2) * green_scale**p * Gp / (2 * excess * gamma ** (p + 2))
    C1 = I_P / (4 * np.pi)
    C2 = C2_fit / gamma**4
    return DeficitPrediction(float(gamma), float(p), float(lam), float(Gp), float(C1), float(I_P),
                             float(C2), float(1.0 - C1 + C2))


@dataclass(frozen=True)
class ScanRow:
    lam: float
    J_best: float
    margin: float
    peak_c: float
    attained: bool
    inconclusive: bool
    seed_id: str


@dataclass(eq=False)
class MonotonicityScan:
    p: float
    S_delta: float
    rows: list
    violations: list
    reliable: bool
    tolerance: float

    def table(self):
        return [(r.lam, r.J_best, r.margin, r.peak_c, r.attained, r.inconclusive) for r in self.rows]


def monotonicity_scan(mesh, p, lambda_grid, seed_spec=None, options=None, potential_report=None,
                      variant="without", margin_fraction=0.05, reruns=1):
    """``J_best(lambda)`` on an increasing grid with one shared seed set.

    Violations of monotonicity beyond ``1e-3 S^delta`` trigger a rerun of
    that grid point with random bumps added to the seeds. The scan is
    marked unreliable if violations persist. Each row's ``attained`` is the
    single-level margin test (no refinement).
    """
    lams = [float(v) for v in lambda_grid]
    if any(b < a for a, b in zip(lams, lams[1:])):
        raise ValueError("lambda grid must be nondecreasing")
    rep = potential_report if potential_report is not None else concentration_level(mesh)
    spec = seed_spec or SeedSpec()
    opts = options or AscentOptions()
    seeds = make_seeds(mesh, spec, rep)
    S = rep.concentration_level
    margin_min = margin_fraction * rep.concentration_excess
    tol = 1e-3 * S

    def run(lam, seed_list):
        best, ok = None, False
        for seed_id, u0 in seed_list:
            try:
                res = maximize(mesh, PerturbParams(lam, p, variant), u0, opts, seed_id=seed_id)
            except InitRejectedError:
                continue
            ok |= res.converged
            if best is None or res.J > best.J:
                best = res
        return best, ok

    rows = []
    for lam in lams:
        best, ok = run(lam, seeds)
        if best is None:
            rows.append(ScanRow(lam, float("nan"), float("nan"), float("nan"), False, True, ""))
            continue
        margin = best.J - S
        rows.append(ScanRow(lam, best.J, margin, best.c, ok and margin > margin_min, not ok, best.seed_id))

    def violations():
        return [i for i in range(1, len(rows)) if rows[i].J_best > rows[i - 1].J_best + tol]

    bad = violations()
    for attempt in range(reruns):
        if not bad:
            break
        extra = make_seeds(mesh, replace(spec, bubble_eps=(), eigen=False,
                                         random_bumps=max(spec.random_bumps, 4),
                                         rng_seed=spec.rng_seed + 1 + attempt), rep)
        for i in bad:
            # the earlier (smaller lambda) point is the one that missed the better basin
            j = i - 1
            best, ok = run(rows[j].lam, seeds + extra)
            if best is not None and best.J > rows[j].J_best:
                margin = best.J - S
                rows[j] = ScanRow(rows[j].lam, best.J, margin, best.c, ok and margin > margin_min,
                                  not ok, best.seed_id)
        bad = violations()
    if bad:
        log.warning("monotonicity violated at grid indices %s after reruns", bad)
    return MonotonicityScan(float(p), S, rows, bad, not bad, tol)
