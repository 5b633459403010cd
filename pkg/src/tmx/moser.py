"""Concentrating test functions built from the Green function.

``phi_eps = f_eps(G_{Omega, y0})`` where ``f_eps`` is linear for small
arguments and follows the standard bubble profile near the pole. The
constants carry asymptotic corrections of order ``R^-2``, ``R = -ln eps``;
those are dropped, and admissibility is restored by rescaling the discrete
field to unit Dirichlet energy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import fem
from .potential import concentration_level, green_function

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_EPS_GRID",
    "MoserConstants",
    "LowerBound",
    "moser_constants",
    "profile",
    "build_test_function",
    "lower_bound_prediction",
]

DEFAULT_EPS_GRID = tuple(np.exp(-k) for k in (6.0, 8.0, 10.0, 12.0))

_FOUR_PI = 4.0 * np.pi


@dataclass(frozen=True)
class MoserConstants:
    """Constants of the test-function family at a given ``epsilon``.

    ``A`` is the asymptotic value; ``A_matched`` differs from it by
    ``O(R^-2)`` and makes the two branches of ``f_eps`` meet exactly at
    ``t_eps``. The profile uses ``A_matched``.
    """

    epsilon: float
    R: float
    t_eps: float
    C_sq: float
    A: float
    A_matched: float

    @property
    def C(self):
        return float(np.sqrt(self.C_sq))


def moser_constants(epsilon):
    if not 0.0 < epsilon < np.exp(-1.0):
        raise ValueError(f"epsilon must lie in (0, 1/e), got {epsilon}")
    R = -np.log(epsilon)
    t_eps = np.log(1.0 / (R * epsilon)) / (2.0 * np.pi)
    C_sq = R / (2.0 * np.pi) + np.log(np.pi) / _FOUR_PI - 1.0 / _FOUR_PI
    A = -C_sq + R / (2.0 * np.pi) + np.log(np.pi) / _FOUR_PI
    # at t = t_eps the bubble branch has ln(1 + pi eps^-2 e^{-4 pi t}) = ln(1 + pi R^2)
    A_matched = t_eps - C_sq + np.log1p(np.pi * R * R) / _FOUR_PI
    return MoserConstants(float(epsilon), float(R), float(t_eps), float(C_sq), float(A), float(A_matched))


def profile(t, constants, matched=True):
    """``f_eps(t)``; ``t = +inf`` (the pole) maps to ``C + A / C``."""
    k = constants
    A = k.A_matched if matched else k.A
    C = k.C
    t = np.asarray(t, dtype=float)
    with np.errstate(over="ignore"):
        inner = C + (-np.log1p(np.pi / k.epsilon**2 * np.exp(-_FOUR_PI * t)) / _FOUR_PI + A) / C
    return np.where(t >= k.t_eps, inner, t / C)


def build_test_function(mesh, epsilon, center=None, *, green=None, return_info=False):
    """Unit-energy nodal field ``f_eps(G_center)``.

    ``center`` defaults to the harmonic center of ``mesh``. With
    ``return_info`` the pre-normalization seminorm and the constants are
    returned alongside the field.
    """
    k = moser_constants(epsilon)
    if green is None:
        if center is None:
            center = concentration_level(mesh).harmonic_center
        green = green_function(mesh, center)
    G = green.values
    phi = profile(G, k)
    phi[mesh.boundary] = 0.0
    norm = fem.h1_seminorm(mesh, phi)
    log.info("test function eps=%.3g: pre-normalization ||grad phi|| = %.6f", epsilon, norm)
    phi = phi / norm
    if return_info:
        return phi, {"pre_norm": norm, "constants": k, "center": green.source}
    return phi


@dataclass(frozen=True)
class LowerBound:
    """Predicted lower bound for the functional along the test-function family."""

    epsilon: float
    lam: float
    p: float
    S_delta: float
    G2: float
    Gp: float
    C_sq: float
    positive_term: float
    negative_term: float
    value: float
    combined_p2: float | None

    @property
    def excess(self):
        """``value - S_delta``."""
        return self.value - self.S_delta

    def to_dict(self):
        return dict(self.__dict__)


def lower_bound_prediction(mesh, epsilon, params, potential_report=None):
    """``S^delta + 4 pi int G^2 / C^2 - lambda int G^p / C^p`` with ``O(R^-2)`` dropped.

    ``C^p`` is ``C_sq ** (p / 2)`` with the positive root. For ``p = 2``
    the combined coefficient ``(4 pi - lambda) int G^2 / C^2`` is reported
    as ``combined_p2``. The prediction refers to the functional without
    the ``-1`` in the integrand.
    """
    rep = potential_report if potential_report is not None else concentration_level(mesh)
    k = moser_constants(epsilon)
    G2 = rep.green.power_integral(2.0)
    Gp = G2 if params.p == 2.0 else rep.green.power_integral(params.p)
    pos = _FOUR_PI * G2 / k.C_sq
    neg = params.lam * Gp / k.C_sq ** (params.p / 2.0)
    combined = (_FOUR_PI - params.lam) * G2 / k.C_sq if params.p == 2.0 else None
    return LowerBound(
        float(epsilon), params.lam, params.p, rep.concentration_level, G2, Gp, k.C_sq,
        pos, neg, rep.concentration_level + pos - neg, combined,
    )
