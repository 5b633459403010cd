"""The perturbed Trudinger-Moser functional and its first variation.

    J(u) = integral of  e^{4 pi u^2} [- 1] - lambda |u|^p

on piecewise-linear fields. All integrals use the same quadrature rule, so
the discrete gradient returned by :func:`load_vector` is the exact
derivative of the discrete functional.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from . import fem

log = logging.getLogger(__name__)

__all__ = [
    "Variant",
    "PerturbParams",
    "EnergySplit",
    "DegenerateNormalizerError",
    "evaluate",
    "functional_terms",
    "gradient_density",
    "load_vector",
    "riesz_gradient",
    "normalizer",
    "el_residual",
    "energy_decompose",
]

FOUR_PI = 4.0 * np.pi


class Variant(str, enum.Enum):
    WITH_MINUS_ONE = "with"
    WITHOUT_MINUS_ONE = "without"


class DegenerateNormalizerError(ValueError):
    """The Euler-Lagrange normalizer E is not positive."""


@dataclass(frozen=True)
class PerturbParams:
    lam: float = 0.0
    p: float = 2.0
    variant: Variant = Variant.WITHOUT_MINUS_ONE

    def __post_init__(self):
        if not np.isfinite(self.lam):
            raise ValueError(f"lambda must be finite, got {self.lam}")
        if not self.p >= 1.0:
            raise ValueError(f"p must be >= 1, got {self.p}")
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "p", float(self.p))

    def to_dict(self):
        return {"lambda": self.lam, "p": self.p, "variant": self.variant.value}


@dataclass(frozen=True)
class EnergySplit:
    I_E: float
    I_P: float
    E: float
    gradient_norm_sq: float

    def to_dict(self):
        return {"I_E": self.I_E, "I_P": self.I_P, "E": self.E, "gradient_norm_sq": self.gradient_norm_sq}


def _abs_pow(u, p):
    return np.abs(u) ** p


def _signed_pow(u, q):
    """``|u|^q sign(u)``, taken as 0 at ``u = 0`` (also for ``q <= 0``)."""
    out = np.zeros_like(u)
    nz = u != 0
    out[nz] = np.abs(u[nz]) ** q * np.sign(u[nz])
    return out


def functional_terms(mesh, u, params, order=2):
    """Break ``J`` into its pieces.

    Returns a dict with ``J``, ``exp_integral`` (of ``e^{4 pi u^2}``),
    ``power_integral`` (of ``|u|^p``) and ``overflow`` (the exponent hit
    :data:`fem.EXP_CAP` at some quadrature point).
    """
    Q, w, _ = mesh.quadrature(order)
    uq = Q @ np.asarray(u, dtype=float)
    e, overflow = fem.exp_capped(FOUR_PI * uq * uq)
    exp_int = float(w @ e)
    pow_int = float(w @ _abs_pow(uq, params.p))
    J = exp_int - params.lam * pow_int
    if params.variant is Variant.WITH_MINUS_ONE:
        J -= float(np.sum(w))
    if overflow:
        log.warning("exponential capped at exp(%g) during evaluation", fem.EXP_CAP)
    return {"J": J, "exp_integral": exp_int, "power_integral": pow_int, "overflow": overflow}


def evaluate(mesh, u, params, order=2):
    """Discrete value of the perturbed functional."""
    return functional_terms(mesh, u, params, order)["J"]


def _density(uq, params):
    x = FOUR_PI * uq * uq
    e, _ = fem.exp_capped(x)
    g = 8.0 * np.pi * uq * np.where(x > fem.EXP_CAP, 0.0, e)
    if params.lam != 0.0:
        g = g - params.p * params.lam * _signed_pow(uq, params.p - 1.0)
    return g


def gradient_density(mesh, u, params):
    """Nodal values of ``8 pi u e^{4 pi u^2} - p lambda |u|^{p-2} u``."""
    return _density(np.asarray(u, dtype=float), params)


def load_vector(mesh, u, params, order=2):
    """``b_i = integral g(u) phi_i``: the exact gradient of the discrete ``J``."""
    Q, w, _ = mesh.quadrature(order)
    uq = Q @ np.asarray(u, dtype=float)
    return Q.T @ (w * _density(uq, params))


def riesz_gradient(mesh, u, params, order=2, method="lu"):
    """H^1_0 representative ``w`` of the derivative: ``K_II w_I = b_I``, ``w = 0`` on the boundary."""
    b = load_vector(mesh, u, params, order)
    w = np.zeros(mesh.n_vertices)
    if len(mesh.interior):
        w[mesh.interior] = fem.solve_interior(mesh, b[mesh.interior], method=method)
    return w


def normalizer(mesh, u, params, order=2):
    """``E = 4 pi integral (u^2 e^{4 pi u^2} - p lambda |u|^p / (8 pi))``."""
    Q, w, _ = mesh.quadrature(order)
    uq = Q @ np.asarray(u, dtype=float)
    e, _ = fem.exp_capped(FOUR_PI * uq * uq)
    return float(FOUR_PI * (w @ (uq * uq * e)) - 0.5 * params.p * params.lam * (w @ _abs_pow(uq, params.p)))


def el_residual(mesh, u, params, order=2, w=None):
    """Relative Euler-Lagrange residual and the normalizer ``E``.

    The equation is ``K u = b(u) / (2E)``. The residual is the H^1_0 norm
    of ``u - w / (2E)`` (``w`` the Riesz gradient) divided by
    ``||w / (2E)||``. It is computed for ``u`` as given; rescaling ``u``
    changes ``E`` and ``w`` and the residual must be recomputed. For
    ``||grad u|| = 1`` it equals the sine of the angle between ``u`` and ``w``.
    """
    u = np.asarray(u, dtype=float)
    E = normalizer(mesh, u, params, order)
    if not E > 0.0:
        raise DegenerateNormalizerError(f"Euler-Lagrange normalizer E = {E:.6g} is not positive")
    if w is None:
        w = riesz_gradient(mesh, u, params, order)
    target = w / (2.0 * E)
    denom = fem.h1_seminorm(mesh, target)
    if denom == 0.0:
        return float("inf"), E
    return fem.h1_seminorm(mesh, u - target) / denom, E


def energy_decompose(mesh, u, params, order=2, scale="u"):
    """Split ``||grad v||^2`` into exponential and power parts, ``v = 2 sqrt(pi) u``.

    Pass ``scale="v"`` when the field is already ``v``.
    """
    u = np.asarray(u, dtype=float)
    if scale == "v":
        u = u / (2.0 * np.sqrt(np.pi))
    elif scale != "u":
        raise ValueError("scale must be 'u' or 'v'")
    E = normalizer(mesh, u, params, order)
    if not E > 0.0:
        raise DegenerateNormalizerError(f"Euler-Lagrange normalizer E = {E:.6g} is not positive")
    Q, w, _ = mesh.quadrature(order)
    vq = 2.0 * np.sqrt(np.pi) * (Q @ u)
    e, _ = fem.exp_capped(vq * vq)
    I_E = FOUR_PI / E * float(w @ (vq * vq * e))
    coef = params.p / (2.0 * FOUR_PI ** (params.p / 2.0))
    I_P = FOUR_PI / E * coef * params.lam * float(w @ _abs_pow(vq, params.p))
    grad_sq = FOUR_PI * fem.h1_seminorm(mesh, u) ** 2
    return EnergySplit(I_E, I_P, E, grad_sq)
