"""Input checks shared by the solvers.

Fields are plain ``float64`` arrays of nodal values; these helpers enforce
the length and boundary conventions at the API edges.
"""

from __future__ import annotations

import numpy as np

from .functional import PerturbParams

__all__ = ["check_field", "check_params"]


def check_field(mesh, values, *, dirichlet_zero=False, nonzero=True, atol=0.0):
    """Return ``values`` as a fresh float array after validating it against ``mesh``."""
    u = np.array(values, dtype=float, copy=True)
    if u.shape != (mesh.n_vertices,):
        raise ValueError(f"field has shape {u.shape}, expected ({mesh.n_vertices},)")
    if not np.all(np.isfinite(u)):
        raise ValueError("field contains non-finite values")
    if dirichlet_zero:
        b = u[mesh.boundary]
        if b.size and np.max(np.abs(b)) > atol:
            raise ValueError("field is not zero on the boundary")
    if nonzero and not np.any(u):
        raise ValueError("field is identically zero")
    return u


def check_params(params):
    """Accept a :class:`PerturbParams` or a ``(lam, p[, variant])`` tuple or a dict."""
    if isinstance(params, PerturbParams):
        return params
    if isinstance(params, dict):
        return PerturbParams(**params)
    return PerturbParams(*params)
