"""Radial bubble profiles and the shooting solver for the radial equation.

Closed forms:

    phi_inf(r) = -log(1 + r^2)
    S0(r)      = phi_inf + 2 r^2 / (1 + r^2) - phi_inf^2 / 2
                 + (1 - r^2) / (1 + r^2) * integral_1^{1 + r^2} log t / (1 - t) dt

The integral is the dilogarithm ``Li2(-r^2)``, which :func:`scipy.special.spence`
evaluates to machine precision.

The shooting solver integrates

    V'' + V'/r = -(4 pi / E) (V e^{V^2} - p lambda |V|^{p-1} / (2 (4 pi)^{p/2}))

from ``V(0) = gamma``, ``V'(0) = 0``. It works in ``x = log(r / r_k)`` so that
scales from ``r_k`` (often below 1e-12) up to ``r_{k,delta}`` stay well
conditioned.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.special import spence

from .functional import PerturbParams
from .output import write_csv

log = logging.getLogger(__name__)

__all__ = [
    "RadialConstants",
    "RADIAL_CONSTANTS",
    "RadialProfile",
    "ShootingError",
    "phi_inf",
    "s0",
    "s0_ode_residual",
    "bubble_identities",
    "s0_asymptotic_fit",
    "default_energy",
    "shoot_radial",
    "expansion_error",
    "expansion_values",
    "write_profile_csv",
    "spherical_average",
]


@dataclass(frozen=True)
class RadialConstants:
    """Asymptotic constants of ``S0``: ``S0(r) ~ A0/(4 pi) log(1/r^2) + B0``."""

    A0: float = 4.0 * np.pi
    B0: float = np.pi**2 / 6.0 + 2.0


RADIAL_CONSTANTS = RadialConstants()


class ShootingError(RuntimeError):
    """The ODE integrator failed (step-size underflow or similar)."""


def phi_inf(r):
    """Standard bubble ``-log(1 + r^2)``."""
    r = np.asarray(r, dtype=float)
    return -np.log1p(r * r)


def s0(r):
    """Second-order radial correction ``S0(r)``; ``S0(0) = 0``."""
    r = np.asarray(r, dtype=float)
    r2 = r * r
    ph = -np.log1p(r2)
    # spence(z) is integral_1^z log t / (1 - t) dt
    return ph + 2.0 * r2 / (1.0 + r2) - 0.5 * ph * ph + (1.0 - r2) / (1.0 + r2) * spence(1.0 + r2)


def _s0_quad(r):
    """``S0`` with the integral done by adaptive quadrature (reference path)."""
    r2 = r * r
    ph = -np.log1p(r2)
    I, _ = quad(lambda t: np.log(t) / (1.0 - t) if t != 1.0 else -1.0, 1.0, 1.0 + r2,
                epsabs=1e-13, epsrel=1e-13, limit=200)
    return ph + 2.0 * r2 / (1.0 + r2) - 0.5 * ph * ph + (1.0 - r2) / (1.0 + r2) * I


def _radial_laplacian(f, r, h):
    """``f'' + f'/r`` by central differences with one Richardson step."""
    def d1(hh):
        return (f(r + hh) - f(r - hh)) / (2 * hh)

    def d2(hh):
        return (f(r + hh) - 2 * f(r) + f(r - hh)) / (hh * hh)

    first = (4 * d1(h / 2) - d1(h)) / 3
    second = (4 * d2(h / 2) - d2(h)) / 3
    return second + first / r


def s0_ode_residual(r, h=None):
    """Residual of ``-Laplace S0 - 8 e^{2 phi} S0 - 4 e^{2 phi} (phi^2 + phi)`` at radii ``r > 0``."""
    r = np.asarray(r, dtype=float)
    if h is None:
        h = 1e-3 * np.maximum(r, 1.0)
    lap = _radial_laplacian(s0, r, h)
    ph = phi_inf(r)
    w = np.exp(2 * ph)
    return -lap - 8 * w * s0(r) - 4 * w * (ph * ph + ph)


def bubble_identities(R_max=100.0, quad_tol=1e-12, n_samples=2001):
    """Check the bubble equation, its mass normalization and the ``S0`` equation.

    Returns a dict with
    ``liouville_residual`` (sup of ``|-Laplace phi - 4 e^{2 phi}|`` from analytic derivatives),
    ``mass`` / ``mass_target`` / ``mass_error`` (``integral_{B_R} e^{2 phi}`` against ``pi R^2/(1+R^2)``),
    ``s0_residual`` (sup of the ``S0`` equation residual from extrapolated differences).
    """
    if not R_max > 1.0:
        raise ValueError("R_max must exceed 1")
    r = np.linspace(0.0, R_max, n_samples)
    one = 1.0 + r * r
    # phi' = -2r/(1+r^2), phi'' = -2(1-r^2)/(1+r^2)^2; phi'/r = -2/(1+r^2) is regular at 0
    lap = -2.0 * (1.0 - r * r) / one**2 - 2.0 / one
    liouville = float(np.max(np.abs(-lap - 4.0 * np.exp(2.0 * phi_inf(r)))))
    mass, _ = quad(lambda s: 2.0 * np.pi * s / (1.0 + s * s) ** 2, 0.0, R_max,
                   epsabs=quad_tol, epsrel=quad_tol, limit=200)
    target = np.pi * R_max**2 / (1.0 + R_max**2)
    rs = r[r > 0.05]
    s0_res = float(np.max(np.abs(s0_ode_residual(rs))))
    return {
        "liouville_residual": liouville,
        "mass": float(mass),
        "mass_target": float(target),
        "mass_error": float(abs(mass - target)),
        "s0_residual": s0_res,
        "R_max": float(R_max),
    }


def s0_asymptotic_fit(r_lo=np.exp(3.0), r_hi=np.exp(5.0), n=201):
    """Least-squares fit ``S0(r) ~ a log(1/r^2) + b`` on radii log-uniform in ``[r_lo, r_hi]``.

    Returns ``(a, b)``; the limits are ``A0 / (4 pi) = 1`` and ``B0``.
    """
    r = np.exp(np.linspace(np.log(r_lo), np.log(r_hi), n))
    a, b = np.polyfit(np.log(1.0 / r**2), s0(r), 1)
    return float(a), float(b)


@dataclass(eq=False)
class RadialProfile:
    gamma: float
    E: float
    params: PerturbParams
    delta: float
    r_k: float
    r_k_delta: float
    grid: np.ndarray
    V: np.ndarray
    t: np.ndarray
    sign_change: bool = False
    monotone: bool = True
    info: dict = field(default_factory=dict, repr=False)

    @property
    def y(self):
        """Grid in bubble units ``r / r_k``."""
        return self.grid / self.r_k

    def to_dict(self):
        return {
            "gamma": self.gamma, "E": self.E, "params": self.params.to_dict(), "delta": self.delta,
            "r_k": self.r_k, "r_k_delta": self.r_k_delta, "sign_change": self.sign_change,
            "monotone": self.monotone, "n_points": int(len(self.grid)),
        }


def default_energy(gamma, excess=np.pi * np.e):
    """``E = gamma^2 (S^delta - |Omega|)``, the scale of the normalizer along concentrating maximizers."""
    return float(gamma * gamma * excess)


def shoot_radial(gamma, E=None, params=None, delta=0.5, *, rtol=1e-10, atol=1e-12,
                 method="DOP853", n_grid=400, start=1e-3):
    """Integrate the radial equation from the peak up to ``r_{k,delta}``.

    ``E`` defaults to :func:`default_energy`. The first step of length
    ``start * r_k`` uses the series ``V = gamma - q0 r^2 / 4``. Output
    radii are uniform in ``t = log(1 + r^2 / r_k^2)`` on ``[0, delta gamma^2]``.
    If ``V`` reaches 0 first, the profile is truncated there and
    ``sign_change`` is set.
    """
    params = params if params is not None else PerturbParams()
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if E is None:
        E = default_energy(gamma)
    if not E > 0:
        raise ValueError("E must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    g2 = gamma * gamma
    r_k = float(np.sqrt(E / np.pi / g2) * np.exp(-0.5 * g2))
    t_end = delta * g2
    y_end = float(np.sqrt(np.expm1(t_end)))
    coef = params.p / (2.0 * (4.0 * np.pi) ** (params.p / 2.0)) * params.lam

    def q(V):
        # (4 pi r_k^2 / E) * nonlinearity, with e^{-gamma^2} folded into the exponent
        out = V * np.exp(V * V - g2)
        if coef:
            out = out - coef * np.abs(V) ** (params.p - 1.0) * np.exp(-g2)
        return 4.0 / g2 * out

    def rhs(x, z):
        V, Vx = z
        return [Vx, -np.exp(2.0 * x) * q(V)]

    def hit_zero(x, z):
        return z[0]

    hit_zero.terminal = True
    hit_zero.direction = -1

    y0 = start
    q0 = q(gamma)
    V0 = gamma - 0.25 * q0 * y0 * y0
    x0, x1 = np.log(y0), np.log(y_end)
    sol = solve_ivp(rhs, (x0, x1), [V0, -0.5 * q0 * y0 * y0], method=method, rtol=rtol, atol=atol,
                    dense_output=True, events=hit_zero)
    if sol.status == -1:
        raise ShootingError(f"integrator failed: {sol.message}")
    sign_change = sol.status == 1
    x_stop = float(sol.t[-1])
    t_grid = np.linspace(0.0, t_end, n_grid)
    y = np.sqrt(np.expm1(t_grid))
    if sign_change:
        keep = y <= np.exp(x_stop)
        t_grid, y = t_grid[keep], y[keep]
        log.info("radial profile changes sign at r/r_k = %.6g before r_k_delta", np.exp(x_stop))
    V = np.empty_like(y)
    inner = y < y0
    V[inner] = gamma - 0.25 * q0 * y[inner] ** 2
    V[0] = gamma
    outer = ~inner
    if outer.any():
        V[outer] = sol.sol(np.clip(np.log(y[outer]), x0, x_stop))[0]
    monotone = bool(np.all(np.diff(V) < 0))
    return RadialProfile(
        gamma=float(gamma), E=float(E), params=params, delta=float(delta), r_k=r_k,
        r_k_delta=r_k * y_end, grid=r_k * y, V=V, t=t_grid, sign_change=bool(sign_change),
        monotone=monotone, info={"nfev": int(sol.nfev), "V_end": float(sol.y[0, -1])},
    )


def expansion_values(profile):
    """``gamma - t / gamma + S0(r / r_k) / gamma^3`` on the profile grid."""
    g = profile.gamma
    return g - profile.t / g + s0(profile.y) / g**3


def expansion_error(profile):
    """Compare a shot profile with the three-term expansion.

    Returns a dict with ``scaled`` = sup ``e gamma^5 / (1 + t)``, ``raw`` =
    sup ``e`` and the pointwise ``error`` array.
    """
    if profile.sign_change:
        raise ValueError("profile changes sign; the expansion does not apply")
    err = np.abs(profile.V - expansion_values(profile))
    scaled = err * profile.gamma**5 / (1.0 + profile.t)
    return {"scaled": float(scaled.max()), "raw": float(err.max()), "error": err}


def write_profile_csv(profile, path):
    """CSV with columns r, t, V, V_expansion, error (17 significant digits)."""
    ex = expansion_values(profile)
    rows = zip(profile.grid, profile.t, profile.V, ex, np.abs(profile.V - ex))
    write_csv(path, ["r", "t", "V", "V_expansion", "error"], rows)


def spherical_average(mesh, u, center, radii, n_angles=64):
    """Angular mean of ``v = 2 sqrt(pi) u`` on circles around ``center``.

    Used to compare a 2D maximizer with a shot radial profile; points
    outside the mesh are skipped.
    """
    theta = 2.0 * np.pi * np.arange(n_angles) / n_angles
    ring = np.column_stack([np.cos(theta), np.sin(theta)])
    out = np.empty(len(radii))
    for i, r in enumerate(radii):
        vals = mesh.interpolate(u, np.asarray(center) + r * ring)
        out[i] = 2.0 * np.sqrt(np.pi) * np.nanmean(vals) if np.any(np.isfinite(vals)) else np.nan
    return out
