"""Projected Sobolev-gradient ascent on the unit sphere of H^1_0.

Each step moves along the Riesz representative of the derivative and
projects back to ``||grad u|| = 1``; a backtracking line search keeps the
functional value nondecreasing. The loop stops on the Euler-Lagrange
residual, not on the step size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import fem
from . import functional as F
from .moser import DEFAULT_EPS_GRID, build_test_function
from .potential import concentration_level, green_function
from .radial import phi_inf
from .validation import check_field, check_params

log = logging.getLogger(__name__)

__all__ = [
    "AscentOptions",
    "SeedSpec",
    "MaximizeResult",
    "BlowupReport",
    "InitRejectedError",
    "normalize",
    "maximize",
    "multi_start",
    "make_seeds",
    "blowup_diagnostics",
    "TrudingerMoserMaximizer",
]


class InitRejectedError(ValueError):
    """Initial field cannot start the ascent (zero, or E <= 0)."""


@dataclass(frozen=True)
class AscentOptions:
    tol: float = 1e-6
    max_iters: int = 5000
    step0: float = 1.0
    shrink: float = 0.5
    armijo: float = 1e-4
    step_min: float = 1e-12
    order: int = 2

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(eq=False)
class MaximizeResult:
    u: np.ndarray
    J: float
    el_residual: float
    energy: F.EnergySplit | None
    c: float
    x_peak: np.ndarray
    gamma: float
    iterations: int
    overflow_flag: bool
    seed_id: str
    params: F.PerturbParams
    converged: bool = False
    stagnated: bool = False
    history: list = field(default_factory=list, repr=False)
    runs: list = field(default_factory=list, repr=False)

    def summary(self):
        return {
            "seed_id": self.seed_id,
            "J": self.J,
            "el_residual": self.el_residual,
            "c": self.c,
            "gamma": self.gamma,
            "x_peak": [float(v) for v in self.x_peak],
            "iterations": self.iterations,
            "converged": self.converged,
            "stagnated": self.stagnated,
            "overflow": self.overflow_flag,
        }

    def to_dict(self):
        d = self.summary()
        d["params"] = self.params.to_dict()
        d["energy"] = self.energy.to_dict() if self.energy is not None else None
        d["runs"] = list(self.runs)
        return d


def normalize(mesh, u):
    """Project onto ``||grad u|| = 1``."""
    n = fem.h1_seminorm(mesh, u)
    if n == 0.0:
        raise InitRejectedError("cannot normalize a field with zero Dirichlet energy")
    return np.asarray(u, dtype=float) / n


def _finish(mesh, u, params, opts, seed_id, it, history, converged, stagnated, overflow):
    if u.min() < -1e-8:
        log.info("seed %s: replacing sign-changing result by its absolute value", seed_id)
        u = normalize(mesh, np.abs(u))
    terms = F.functional_terms(mesh, u, params, opts.order)
    try:
        res, _ = F.el_residual(mesh, u, params, opts.order)
        energy = F.energy_decompose(mesh, u, params, opts.order)
    except F.DegenerateNormalizerError:
        res, energy = float("inf"), None
    k = int(np.argmax(u))
    c = float(u[k])
    return MaximizeResult(
        u=u, J=terms["J"], el_residual=res, energy=energy, c=c,
        x_peak=mesh.vertices[k].copy(), gamma=float(2.0 * np.sqrt(np.pi) * c),
        iterations=it, overflow_flag=overflow or terms["overflow"], seed_id=seed_id,
        params=params, converged=converged, stagnated=stagnated, history=history,
    )


def maximize(mesh, params, init, options=None, seed_id="init"):
    """Ascend ``J`` from ``init`` on the unit sphere of H^1_0.

    Iterates ``u <- normalize(u + s w)`` with ``w`` the Riesz gradient and
    ``s`` from backtracking (Armijo on ``J``). Stops when the relative
    Euler-Lagrange residual drops below ``options.tol``, after
    ``options.max_iters`` steps, or when no step above ``step_min``
    increases ``J`` (``stagnated``; the best iterate so far is returned).
    """
    opts = options or AscentOptions()
    params = check_params(params)
    u = check_field(mesh, init, dirichlet_zero=True)
    # J is even; work with the representative whose largest excursion is positive
    if -u.min() > u.max():
        u = -u
    u = normalize(mesh, u)
    if F.normalizer(mesh, u, params, opts.order) <= 0.0:
        raise InitRejectedError(f"seed {seed_id}: normalizer E <= 0 at the initial field")
    terms = F.functional_terms(mesh, u, params, opts.order)
    J, overflow = terms["J"], terms["overflow"]
    history = [J]
    K = mesh.stiffness
    converged = stagnated = False
    it = 0
    for it in range(opts.max_iters + 1):
        w = F.riesz_gradient(mesh, u, params, opts.order)
        try:
            res, _ = F.el_residual(mesh, u, params, opts.order, w=w)
        except F.DegenerateNormalizerError:
            stagnated = True
            break
        if res <= opts.tol:
            converged = True
            break
        if it == opts.max_iters:
            break
        Kw = K @ w
        a = float(u @ Kw)
        slope = max(float(w @ Kw) - a * a, 0.0)  # d/ds J(normalize(u + s w)) at s = 0
        s = opts.step0
        while s >= opts.step_min:
            cand = u + s * w
            cand /= fem.h1_seminorm(mesh, cand)
            t = F.functional_terms(mesh, cand, params, opts.order)
            if t["J"] >= J + opts.armijo * s * slope:
                break
            s *= opts.shrink
        else:
            stagnated = True
            log.info("seed %s: line search stagnated at iteration %d (J=%.10g)", seed_id, it, J)
            break
        u, J = cand, t["J"]
        overflow = overflow or t["overflow"]
        history.append(J)
    log.debug("seed %s: %d iterations, J=%.10g, residual=%.3e", seed_id, it, J, res)
    return _finish(mesh, u, params, opts, seed_id, it, history, converged, stagnated, overflow)


@dataclass(frozen=True)
class SeedSpec:
    """Which initial fields :func:`multi_start` tries.

    ``bubble_eps``: test functions at the harmonic center, one per epsilon.
    ``eigen``: the normalized torsion function (solution of ``-Laplace w = 1``).
    ``random_bumps``: count of random sums of Gaussian bumps drawn from ``rng_seed``.
    """

    bubble_eps: tuple = DEFAULT_EPS_GRID[:3]
    eigen: bool = True
    random_bumps: int = 0
    rng_seed: int = 0

    @classmethod
    def parse(cls, text, rng_seed=0):
        """Parse ``"bubble:6,8,10;eigen;random:3"`` (bubble entries are ``-ln eps``)."""
        bubble, eigen, bumps = (), False, 0
        for part in filter(None, (s.strip() for s in text.split(";"))):
            name, _, arg = part.partition(":")
            if name == "bubble":
                bubble = tuple(float(np.exp(-float(a))) for a in arg.split(",") if a)
            elif name == "eigen":
                eigen = True
            elif name == "random":
                bumps = int(arg or 1)
            else:
                raise ValueError(f"unknown seed kind {name!r}")
        return cls(bubble, eigen, bumps, rng_seed)

    def to_text(self):
        parts = []
        if self.bubble_eps:
            parts.append("bubble:" + ",".join(f"{-np.log(e):.17g}" for e in self.bubble_eps))
        if self.eigen:
            parts.append("eigen")
        if self.random_bumps:
            parts.append(f"random:{self.random_bumps}")
        return ";".join(parts)


def make_seeds(mesh, seed_spec, potential_report=None):
    """List of ``(seed_id, field)`` pairs for a seed specification."""
    seeds = []
    if seed_spec.bubble_eps:
        rep = potential_report if potential_report is not None else concentration_level(mesh)
        green = rep.green if rep.mesh is mesh else green_function(mesh, rep.harmonic_center)
        for eps in seed_spec.bubble_eps:
            seeds.append((f"bubble:{-np.log(eps):.6g}", build_test_function(mesh, eps, green=green)))
    if seed_spec.eigen:
        w = fem.solve_dirichlet(mesh, np.ones(mesh.n_vertices), method="lu")
        seeds.append(("eigen", normalize(mesh, w)))
    if seed_spec.random_bumps:
        rng = np.random.default_rng(seed_spec.rng_seed)
        xy = mesh.vertices
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        scale = float(np.min(hi - lo))
        interior = mesh.interior
        for j in range(seed_spec.random_bumps):
            u = np.zeros(mesh.n_vertices)
            for _ in range(int(rng.integers(1, 4))):
                x0 = xy[interior[int(rng.integers(len(interior)))]]
                width = scale * rng.uniform(0.05, 0.3)
                u += rng.uniform(0.5, 1.5) * np.exp(-np.sum((xy - x0) ** 2, axis=1) / (2 * width**2))
            u[mesh.boundary] = 0.0
            seeds.append((f"random:{j}", normalize(mesh, u)))
    return seeds


def multi_start(mesh, params, seed_spec=None, options=None, potential_report=None, seeds=None):
    """Run :func:`maximize` from every seed and return the best result.

    ``runs`` on the returned result holds one summary per seed, including
    rejected ones. ``seeds`` may be given directly as ``(seed_id, field)``
    pairs instead of a :class:`SeedSpec`.
    """
    if seeds is None:
        seeds = make_seeds(mesh, seed_spec or SeedSpec(), potential_report)
    best, runs = None, []
    for seed_id, u0 in seeds:
        try:
            res = maximize(mesh, params, u0, options, seed_id=seed_id)
        except InitRejectedError as exc:
            runs.append({"seed_id": seed_id, "rejected": str(exc)})
            continue
        runs.append(res.summary())
        if best is None or res.J > best.J:
            best = res
    if best is None:
        raise InitRejectedError("all seeds were rejected")
    best.runs = runs
    return best


@dataclass(eq=False)
class BlowupReport:
    r_k: float
    concentrated: bool
    R_sample: float
    radii: np.ndarray
    rescaled_profile: np.ndarray  # (n_radii, n_angles), gamma (v - gamma)
    psi_profile: np.ndarray  # v / gamma on the same grid
    phi_inf_sup: float
    phi_inf_l2: float
    phi_inf_sup_2: float  # sup deviation restricted to |y| <= 2
    energy_ratio: float  # E / gamma^2
    energy_ratio_target: float  # S^delta - |Omega|
    green_deviation: float  # L^2 distance of c u and G outside B_rho(x_peak)
    green_relative: float
    rho: float

    def to_dict(self):
        return {
            "r_k": self.r_k,
            "concentrated": self.concentrated,
            "R_sample": self.R_sample,
            "phi_inf_sup": self.phi_inf_sup,
            "phi_inf_l2": self.phi_inf_l2,
            "phi_inf_sup_2": self.phi_inf_sup_2,
            "energy_ratio": self.energy_ratio,
            "energy_ratio_target": self.energy_ratio_target,
            "green_deviation": self.green_deviation,
            "green_relative": self.green_relative,
            "rho": self.rho,
        }


def bubble_scale(E, gamma):
    """``r_k`` from ``r_k^2 = (E / pi) gamma^-2 exp(-gamma^2)``."""
    return float(np.sqrt(E / np.pi / gamma**2 * np.exp(-gamma * gamma)))


def _boundary_distance(mesh, x):
    be = mesh.boundary_edges
    a, b = mesh.vertices[be[:, 0]], mesh.vertices[be[:, 1]]
    ab = b - a
    s = np.clip(np.sum((x - a) * ab, axis=1) / np.sum(ab * ab, axis=1), 0.0, 1.0)
    return float(np.min(np.linalg.norm(a + s[:, None] * ab - x, axis=1)))


def blowup_diagnostics(result, mesh, potential_report, n_radii=41, n_angles=16, order=2):
    """Compare a maximizer with the bubble profile and the Green function.

    The rescaled profile is ``gamma (v(x_peak + r_k y) - gamma)``,
    ``v = 2 sqrt(pi) u``, sampled on a polar grid of radius
    ``min(10, dist(x_peak, boundary) / (2 r_k))``. Away from the peak the
    field is compared with ``G_{x_peak}`` after multiplying by the peak
    value ``c``.
    """
    if not result.c > 0 or result.energy is None or not result.energy.E > 0:
        raise ValueError("blow-up diagnostics need c > 0 and E > 0")
    E, gamma, x0 = result.energy.E, result.gamma, result.x_peak
    r_k = bubble_scale(E, gamma)
    dist = _boundary_distance(mesh, x0)
    concentrated = r_k < dist
    R_sample = min(10.0, dist / (2.0 * r_k))
    radii = np.linspace(0.0, R_sample, n_radii)
    theta = 2.0 * np.pi * np.arange(n_angles) / n_angles
    Rg, Tg = np.meshgrid(radii, theta, indexing="ij")
    pts = x0 + r_k * np.column_stack([(Rg * np.cos(Tg)).ravel(), (Rg * np.sin(Tg)).ravel()])
    v = 2.0 * np.sqrt(np.pi) * mesh.interpolate(result.u, pts).reshape(Rg.shape)
    v[0, :] = gamma  # y = 0 is the peak vertex itself
    prof = gamma * (v - gamma)
    dev = np.abs(prof - phi_inf(Rg))
    weights = np.maximum(Rg, 0.0)
    l2 = float(np.sqrt(np.sum(dev**2 * weights) / max(np.sum(weights), 1e-300)))
    within2 = radii <= 2.0
    # Green comparison outside B_rho
    rho = 10.0 * mesh.h
    G = green_function(mesh, x0) if not mesh.boundary_mask[int(np.argmax(result.u))] else None
    green_dev = green_rel = float("nan")
    if G is not None:
        xy, w = fem.quadrature_points(mesh, order)
        Q, _, _ = mesh.quadrature(order)
        outside = np.linalg.norm(xy - x0, axis=1) > rho
        cu = result.c * (Q @ result.u)
        g = G.at(xy[outside]) if outside.any() else np.zeros(0)
        diff = cu[outside] - g
        green_dev = float(np.sqrt(w[outside] @ diff**2))
        gnorm = float(np.sqrt(w[outside] @ g**2))
        green_rel = green_dev / gnorm if gnorm > 0 else float("nan")
    return BlowupReport(
        r_k=r_k, concentrated=bool(concentrated), R_sample=float(R_sample), radii=radii,
        rescaled_profile=prof, psi_profile=v / gamma,
        phi_inf_sup=float(dev.max()), phi_inf_l2=l2,
        phi_inf_sup_2=float(dev[within2].max()),
        energy_ratio=E / gamma**2, energy_ratio_target=potential_report.concentration_excess,
        green_deviation=green_dev, green_relative=green_rel, rho=rho,
    )


class TrudingerMoserMaximizer(BaseEstimator):
    """Estimator-style front end to :func:`multi_start`.

    ``fit(mesh)`` runs the multi-start ascent and stores the best field in
    ``u_``; ``score(mesh)`` returns the functional value of ``u_``.

    Parameters
    ----------
    lam, p, variant : perturbation parameters.
    tol, max_iters : ascent stopping rule.
    seeds : seed specification string, e.g. ``"bubble:6,8,10;eigen"``.
    random_state : seed for random bump initializations.
    """

    def __init__(self, lam=0.0, p=2.0, variant="without", tol=1e-6, max_iters=5000,
                 seeds="bubble:6,8,10;eigen", random_state=0):
        self.lam = lam
        self.p = p
        self.variant = variant
        self.tol = tol
        self.max_iters = max_iters
        self.seeds = seeds
        self.random_state = random_state

    def _params(self):
        return F.PerturbParams(self.lam, self.p, self.variant)

    def fit(self, mesh, y=None, potential_report=None):
        if not isinstance(mesh, fem.Mesh):
            raise TypeError(f"expected a Mesh, got {type(mesh).__name__}")
        spec = SeedSpec.parse(self.seeds, rng_seed=self.random_state)
        opts = replace(AscentOptions(), tol=self.tol, max_iters=self.max_iters)
        rep = potential_report if potential_report is not None else (
            concentration_level(mesh) if spec.bubble_eps else None)
        self.result_ = multi_start(mesh, self._params(), spec, opts, rep)
        self.potential_ = rep
        self.u_ = self.result_.u
        self.J_ = self.result_.J
        self.n_vertices_ = mesh.n_vertices
        return self

    def score(self, mesh, y=None):
        if not hasattr(self, "u_"):
            raise NotFittedError("call fit before score")
        if mesh.n_vertices != self.n_vertices_:
            raise ValueError("mesh differs from the one used in fit")
        return F.evaluate(mesh, self.u_, self._params())
