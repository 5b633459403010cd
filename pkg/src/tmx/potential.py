"""Green and Robin functions, harmonic radius and the concentration level.

The Green function with pole ``x`` is split into the analytic kernel
``-log|x - y| / (2 pi)`` and a regular part ``H_x`` that is harmonic with
boundary values equal to the kernel. Only the regular part is discretized,
so the logarithmic singularity never has to be resolved by the mesh.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator

from . import fem

log = logging.getLogger(__name__)

__all__ = [
    "GreenFunction",
    "PotentialReport",
    "green_function",
    "robin_function",
    "robin_at",
    "concentration_level",
    "singular_kernel",
]

_TWO_PI = 2.0 * np.pi
_BATCH = 256


def singular_kernel(x, points):
    """``-log|x - y| / (2 pi)`` for each row ``y`` of ``points``."""
    d = np.linalg.norm(np.atleast_2d(points) - np.asarray(x, dtype=float), axis=1)
    with np.errstate(divide="ignore"):
        return -np.log(d) / _TWO_PI


def _resolve_source(mesh, source):
    """Return ``(point, vertex_index_or_None)`` for an int vertex or a 2D point."""
    if np.isscalar(source) and int(source) == source:
        k = int(source)
        if not 0 <= k < mesh.n_vertices:
            raise IndexError(f"vertex {k} out of range")
        if mesh.boundary_mask[k]:
            raise ValueError(f"source vertex {k} lies on the boundary")
        return mesh.vertices[k].copy(), k
    x = np.asarray(source, dtype=float).reshape(2)
    tri, _ = mesh.locate(x)
    if tri[0] < 0:
        raise ValueError(f"source point {tuple(x)} is outside the mesh")
    d = np.linalg.norm(mesh.vertices - x, axis=1)
    k = int(np.argmin(d))
    if d[k] <= 1e-12 * max(mesh.h, 1.0):
        if mesh.boundary_mask[k]:
            raise ValueError(f"source point {tuple(x)} lies on the boundary")
        return mesh.vertices[k].copy(), k
    # a point on a boundary edge has zero distance to the boundary polyline
    be = mesh.boundary_edges
    a, b = mesh.vertices[be[:, 0]], mesh.vertices[be[:, 1]]
    ab = b - a
    s = np.clip(np.sum((x - a) * ab, axis=1) / np.sum(ab * ab, axis=1), 0.0, 1.0)
    if np.min(np.linalg.norm(a + s[:, None] * ab - x, axis=1)) <= 1e-12 * max(mesh.h, 1.0):
        raise ValueError(f"source point {tuple(x)} lies on the boundary")
    return x, None


def _regular_parts(mesh, sources):
    """Nodal regular parts ``H_x`` for each source point (columns of the result)."""
    sources = np.atleast_2d(sources)
    B, I = mesh.boundary, mesh.interior
    yb = mesh.vertices[B]
    # boundary data -log|x - y| / 2 pi, one column per source
    d = np.linalg.norm(yb[:, None, :] - sources[None, :, :], axis=2)
    gB = -np.log(d) / _TWO_PI
    H = np.empty((mesh.n_vertices, len(sources)))
    H[B] = gB
    H[I] = fem.solve_interior(mesh, -(mesh._interior_boundary_stiffness @ gB), method="lu")
    return H


@dataclass(eq=False)
class GreenFunction:
    """Discrete Dirichlet Green function ``G_x = kernel - H_x``.

    ``values`` holds nodal values (``+inf`` at the pole when the pole is a
    vertex). :meth:`at` evaluates the kernel exactly and interpolates only
    the regular part.
    """

    mesh: fem.Mesh
    source: np.ndarray
    source_vertex: int | None
    regular: np.ndarray

    @property
    def values(self):
        with np.errstate(divide="ignore"):
            g = singular_kernel(self.source, self.mesh.vertices) - self.regular
        g[self.mesh.boundary] = 0.0
        return g

    def at(self, points):
        points = np.atleast_2d(points)
        return singular_kernel(self.source, points) - self.mesh.interpolate(self.regular, points)

    def power_integral(self, q, order=3):
        """``integral of max(G, 0)^q`` with exact kernel values at quadrature points.

        Triangles touching the pole are integrated with a Duffy-collapsed
        Gauss rule, which absorbs the logarithmic singularity.
        """
        mesh = self.mesh
        xy, w = fem.quadrature_points(mesh, order)
        Q, _, _ = mesh.quadrature(order)
        nq = len(w) // mesh.n_triangles
        near = self._pole_triangles()
        keep = np.ones(mesh.n_triangles, dtype=bool)
        keep[near] = False
        mask = np.repeat(keep, nq)
        g = singular_kernel(self.source, xy[mask]) - Q[mask] @ self.regular
        total = float(w[mask] @ np.clip(g, 0.0, None) ** q)
        for pts, wts in self._pole_rules(near):
            g = singular_kernel(self.source, pts) - mesh.interpolate(self.regular, pts)
            total += float(wts @ np.clip(g, 0.0, None) ** q)
        return total

    def _pole_triangles(self):
        mesh = self.mesh
        if self.source_vertex is not None:
            return np.flatnonzero((mesh.triangles == self.source_vertex).any(axis=1))
        tri, _ = mesh.locate(self.source)
        return tri[tri >= 0]

    def _pole_rules(self, triangles, n=10):
        """Gauss rules on sub-triangles with a vertex at the pole."""
        gx, gw = np.polynomial.legendre.leggauss(n)
        gx = 0.5 * (gx + 1.0)
        gw = 0.5 * gw
        S, T = np.meshgrid(gx, gx, indexing="ij")
        WS, WT = np.meshgrid(gw, gw, indexing="ij")
        s, t, ws = S.ravel(), T.ravel(), (WS * WT * S).ravel()
        x0 = self.source
        for j in triangles:
            p = self.mesh.vertices[self.mesh.triangles[j]]
            if self.source_vertex is not None:
                k = int(np.flatnonzero(self.mesh.triangles[j] == self.source_vertex)[0])
                subs = [(p[(k + 1) % 3], p[(k + 2) % 3])]
            else:
                subs = [(p[0], p[1]), (p[1], p[2]), (p[2], p[0])]
            for a, b in subs:
                # Duffy: (s, t) -> x0 + s (a - x0) + s t (b - a), jacobian 2|T| s
                pts = x0 + s[:, None] * (a - x0) + (s * t)[:, None] * (b - a)
                area2 = abs((a[0] - x0[0]) * (b[1] - x0[1]) - (a[1] - x0[1]) * (b[0] - x0[0]))
                yield pts, ws * area2


def green_function(mesh, source):
    """Green function with pole at an interior vertex index or an interior point."""
    x, k = _resolve_source(mesh, source)
    H = _regular_parts(mesh, x[None, :])[:, 0]
    return GreenFunction(mesh, x, k, H)


def robin_at(mesh, point):
    """Robin function (regular part evaluated at its own pole) at an interior point."""
    x, k = _resolve_source(mesh, point)
    H = _regular_parts(mesh, x[None, :])[:, 0]
    if k is not None:
        return float(H[k])
    return float(mesh.interpolate(H, x[None, :])[0])


def robin_function(mesh, stride=1):
    """Robin function at interior vertices (``nan`` on the boundary).

    With ``stride > 1`` only every ``stride``-th interior vertex is solved
    for; the rest are filled by piecewise-linear interpolation over the
    samples (nearest sample outside their hull).
    """
    stride = int(stride)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    interior = mesh.interior
    sample = interior[::stride]
    tau = np.full(mesh.n_vertices, np.nan)
    for lo in range(0, len(sample), _BATCH):
        idx = sample[lo:lo + _BATCH]
        H = _regular_parts(mesh, mesh.vertices[idx])
        tau[idx] = H[idx, np.arange(len(idx))]
    if stride > 1 and len(sample) < len(interior):
        rest = np.setdiff1d(interior, sample)
        pts = mesh.vertices[sample]
        if len(sample) >= 3:
            lin = LinearNDInterpolator(pts, tau[sample])(mesh.vertices[rest])
        else:
            lin = np.full(len(rest), np.nan)
        near = NearestNDInterpolator(pts, tau[sample])(mesh.vertices[rest])
        tau[rest] = np.where(np.isnan(lin), near, lin)
    return tau


@dataclass(eq=False)
class PotentialReport:
    """Robin function, harmonic radius, harmonic center and concentration level."""

    mesh: fem.Mesh
    robin: np.ndarray
    harmonic_radius: np.ndarray
    harmonic_center: np.ndarray
    center_vertex: int
    max_radius: float
    concentration_level: float
    _green: GreenFunction | None = field(default=None, repr=False)

    @property
    def area(self):
        return self.mesh.area

    @property
    def concentration_excess(self):
        """``S^delta - |Omega| = pi e max r^2``."""
        return self.concentration_level - self.mesh.area

    @property
    def green(self):
        """Green function with pole at the harmonic center (computed once)."""
        if self._green is None:
            self._green = green_function(self.mesh, self.harmonic_center)
        return self._green

    def to_dict(self):
        return {
            "n_vertices": self.mesh.n_vertices,
            "area": self.mesh.area,
            "robin": [None if np.isnan(v) else float(v) for v in self.robin],
            "harmonic_radius": [None if np.isnan(v) else float(v) for v in self.harmonic_radius],
            "harmonic_center": [float(c) for c in self.harmonic_center],
            "center_vertex": int(self.center_vertex),
            "max_radius": float(self.max_radius),
            "concentration_level": float(self.concentration_level),
        }


def _refine_center(mesh, radius, k):
    """Quadratic least-squares fit of ``radius`` over the 1-ring of vertex ``k``."""
    ring = np.unique(mesh.triangles[(mesh.triangles == k).any(axis=1)])
    ring = ring[~np.isnan(radius[ring])]
    if len(ring) < 6:
        return mesh.vertices[k].copy()
    x0 = mesh.vertices[k]
    d = mesh.vertices[ring] - x0
    X, Y = d[:, 0], d[:, 1]
    A = np.column_stack([np.ones_like(X), X, Y, X * X, X * Y, Y * Y])
    coef, *_ = np.linalg.lstsq(A, radius[ring], rcond=None)
    _, b, c, dxx, dxy, dyy = coef
    hess = np.array([[2 * dxx, dxy], [dxy, 2 * dyy]])
    if np.any(np.linalg.eigvalsh(hess) >= 0):
        return x0.copy()
    step = np.linalg.solve(hess, -np.array([b, c]))
    if np.linalg.norm(step) > np.max(np.linalg.norm(d, axis=1)):
        return x0.copy()
    return x0 + step


def concentration_level(mesh, stride=1):
    """Assemble the :class:`PotentialReport` for a mesh.

    The concentration level is ``|Omega| + pi e sup r^2`` where the sup is
    taken over interior vertices and the quadratically refined center.
    """
    if len(mesh.interior) == 0:
        raise ValueError("mesh has no interior vertices")
    tau = robin_function(mesh, stride=stride)
    radius = np.exp(-_TWO_PI * tau)
    k = int(np.nanargmax(radius))
    center = _refine_center(mesh, radius, k)
    r_max = float(radius[k])
    if not np.allclose(center, mesh.vertices[k]):
        r_c = float(np.exp(-_TWO_PI * robin_at(mesh, center)))
        if r_c > r_max:
            r_max = r_c
        else:
            center = mesh.vertices[k].copy()
    level = mesh.area + np.pi * np.e * r_max**2
    log.debug("harmonic center %s, max radius %.6g, S_delta %.6g", center, r_max, level)
    return PotentialReport(mesh, tau, radius, center, k, r_max, float(level))
