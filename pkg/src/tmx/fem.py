"""Piecewise-linear finite elements on planar triangulations.

Everything else in the package is built on the objects defined here: the
:class:`Mesh` container, stiffness/mass assembly, Dirichlet solves, the
H^1_0 seminorm and quadrature of nonlinear integrands of nodal fields.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .output import atomic_write

log = logging.getLogger(__name__)

__all__ = [
    "EXP_CAP",
    "MeshError",
    "MeshFormatError",
    "SolverError",
    "Mesh",
    "build_disk_mesh",
    "build_rect_mesh",
    "load_mesh",
    "save_mesh",
    "refine",
    "assemble_stiffness",
    "assemble_mass",
    "solve_dirichlet",
    "h1_seminorm",
    "integrate",
    "exp_capped",
    "quadrature_points",
]

# natural-log cap for e^{4 pi u^2}; exp(700) is still finite in float64
EXP_CAP = 700.0


class MeshError(ValueError):
    """Invalid mesh geometry or connectivity."""


class MeshFormatError(MeshError):
    """Malformed mesh file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SolverError(RuntimeError):
    """Iterative solver failed to reach its tolerance."""

    def __init__(self, message, residual_history=()):
        super().__init__(message)
        self.residual_history = list(residual_history)


def _signed_areas(vertices, triangles):
    p0 = vertices[triangles[:, 0]]
    e1 = vertices[triangles[:, 1]] - p0
    e2 = vertices[triangles[:, 2]] - p0
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _edges(triangles):
    """Unique undirected edges and, per edge, the number of incident triangles."""
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.sort(e, axis=1)
    uniq, inverse, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    return uniq, inverse.reshape(-1), counts


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation of a bounded planar domain.

    ``vertices`` is ``(nv, 2)``, ``triangles`` is ``(nt, 3)`` with
    counter-clockwise vertex order. ``circle`` optionally records
    ``(cx, cy, radius)`` when the boundary approximates a circle; ``refine``
    uses it to project new boundary vertices.

    Derived quantities (boundary mask, stiffness, factorizations) are cached
    on first use; instances are treated as immutable and may be shared.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    circle: tuple | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise MeshError(f"vertices must have shape (nv, 2), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must have shape (nt, 3), got {t.shape}")
        if len(t) == 0:
            raise MeshError("mesh has no triangles")
        if t.min() < 0 or t.max() >= len(v):
            bad = int(np.argmax((t < 0).any(axis=1) | (t >= len(v)).any(axis=1)))
            raise MeshError(f"triangle {bad} references a vertex index out of range [0, {len(v)})")
        areas = _signed_areas(v, t)
        scale = max(np.ptp(v[:, 0]), np.ptp(v[:, 1]), 1e-300) ** 2
        degenerate = np.abs(areas) <= 1e-14 * scale
        if degenerate.any():
            raise MeshError(f"triangle {int(np.argmax(degenerate))} has zero area")
        if (areas < 0).any():
            t = t.copy()
            neg = areas < 0
            t[neg] = t[neg][:, [0, 2, 1]]
        v.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        counts = self._edge_data[2]
        if (counts > 2).any():
            raise MeshError("non-manifold connectivity: an edge is shared by more than two triangles")
        bverts = np.bincount(self.boundary_edges.ravel(), minlength=len(v))
        if (bverts[bverts > 0] != 2).any():
            raise MeshError("non-manifold boundary: a boundary vertex touches more than two boundary edges")
        used = np.zeros(len(v), dtype=bool)
        used[t.ravel()] = True
        if not used.all():
            raise MeshError(f"vertex {int(np.argmin(used))} is not used by any triangle")

    # -- topology -----------------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @cached_property
    def _edge_data(self):
        return _edges(self.triangles)

    @property
    def edges(self):
        return self._edge_data[0]

    @cached_property
    def boundary_edges(self):
        edges, _, counts = self._edge_data
        return edges[counts == 1]

    @cached_property
    def boundary_mask(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary_edges.ravel()] = True
        mask.flags.writeable = False
        return mask

    @cached_property
    def interior(self):
        """Indices of interior vertices."""
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def boundary(self):
        return np.flatnonzero(self.boundary_mask)

    # -- geometry -----------------------------------------------------------

    @cached_property
    def triangle_areas(self):
        return _signed_areas(self.vertices, self.triangles)

    @cached_property
    def area(self):
        return float(np.sum(self.triangle_areas))

    @cached_property
    def h(self):
        """Longest edge length."""
        e = self.edges
        return float(np.max(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)))

    @cached_property
    def min_angle(self):
        """Smallest interior angle in degrees."""
        p = self.vertices[self.triangles]
        ang = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            c = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            ang.append(np.degrees(np.arccos(np.clip(c, -1, 1))))
        return float(np.min(ang))

    @cached_property
    def gradients(self):
        """Per-triangle gradients of the three barycentric basis functions, ``(nt, 3, 2)``."""
        p = self.vertices[self.triangles]
        twice = 2.0 * self.triangle_areas
        # grad lambda_i = rot90(p_{i+2} - p_{i+1}) / (2 area)
        g = np.empty((self.n_triangles, 3, 2))
        for i in range(3):
            d = p[:, (i + 2) % 3] - p[:, (i + 1) % 3]
            g[:, i, 0] = -d[:, 1] / twice
            g[:, i, 1] = d[:, 0] / twice
        return g

    # -- operators ----------------------------------------------------------

    @cached_property
    def stiffness(self):
        return assemble_stiffness(self)

    @cached_property
    def mass(self):
        return assemble_mass(self)

    @cached_property
    def _interior_stiffness(self):
        i = self.interior
        return self.stiffness[i][:, i].tocsc()

    @cached_property
    def _interior_boundary_stiffness(self):
        return self.stiffness[self.interior][:, self.boundary].tocsr()

    @cached_property
    def _interior_lu(self):
        return spla.splu(self._interior_stiffness)

    def quadrature(self, order):
        """``(Q, weights, points)`` for a rule: ``Q @ field`` gives field values at quadrature points."""
        cache = self.__dict__.setdefault("_quad_cache", {})
        if order not in cache:
            cache[order] = _build_quadrature(self, order)
        return cache[order]

    def locate(self, points):
        """Triangle index and barycentric coordinates for each point (-1 if outside)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        p = self.vertices[self.triangles]
        tri_idx = np.full(len(points), -1, dtype=np.int64)
        bary = np.zeros((len(points), 3))
        a = p[:, 0]
        m = np.stack([p[:, 1] - a, p[:, 2] - a], axis=2)  # (nt, 2, 2) columns e1, e2
        det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
        for k, x in enumerate(points):
            d = x - a
            l1 = (m[:, 1, 1] * d[:, 0] - m[:, 0, 1] * d[:, 1]) / det
            l2 = (-m[:, 1, 0] * d[:, 0] + m[:, 0, 0] * d[:, 1]) / det
            l0 = 1.0 - l1 - l2
            worst = np.minimum(np.minimum(l0, l1), l2)
            j = int(np.argmax(worst))
            if worst[j] >= -1e-10:
                tri_idx[k] = j
                bary[k] = (l0[j], l1[j], l2[j])
        return tri_idx, bary

    def interpolate(self, values, points):
        """Evaluate the P1 interpolant of nodal ``values`` at arbitrary points (nan outside)."""
        tri, bary = self.locate(points)
        out = np.full(len(tri), np.nan)
        ok = tri >= 0
        out[ok] = np.sum(np.asarray(values)[self.triangles[tri[ok]]] * bary[ok], axis=1)
        return out


# -- quadrature ---------------------------------------------------------------

def _rule(order):
    """Barycentric points and weights (summing to 1) on the reference triangle."""
    if order == 1:
        pts = np.eye(3)
        w = np.full(3, 1.0 / 3.0)
    elif order == 2:
        a, b = 2.0 / 3.0, 1.0 / 6.0
        pts = np.array([[a, b, b], [b, a, b], [b, b, a]])
        w = np.full(3, 1.0 / 3.0)
    elif order == 3:
        # 7-point rule, exact through degree 5
        s15 = np.sqrt(15.0)
        a1 = (6.0 - s15) / 21.0
        a2 = (6.0 + s15) / 21.0
        w1 = (155.0 - s15) / 1200.0
        w2 = (155.0 + s15) / 1200.0
        pts = np.array([
            [1 / 3, 1 / 3, 1 / 3],
            [a1, a1, 1 - 2 * a1], [a1, 1 - 2 * a1, a1], [1 - 2 * a1, a1, a1],
            [a2, a2, 1 - 2 * a2], [a2, 1 - 2 * a2, a2], [1 - 2 * a2, a2, a2],
        ])
        w = np.array([9 / 40, w1, w1, w1, w2, w2, w2])
    else:
        raise ValueError(f"quadrature order must be 1, 2 or 3, got {order}")
    return pts, w


def _build_quadrature(mesh, order):
    pts, w = _rule(order)
    nt, nq = mesh.n_triangles, len(w)
    rows = np.arange(nt * nq).repeat(3)
    cols = np.repeat(mesh.triangles, nq, axis=0).ravel()
    vals = np.tile(pts, (nt, 1)).ravel()
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(nt * nq, mesh.n_vertices))
    weights = (mesh.triangle_areas[:, None] * w[None, :]).ravel()
    xy = Q @ mesh.vertices
    return Q, weights, xy


def quadrature_points(mesh, order=2):
    """Physical coordinates and weights of the quadrature points of a rule."""
    _, w, xy = mesh.quadrature(order)
    return xy, w


def exp_capped(x):
    """``exp(min(x, EXP_CAP))`` and whether the cap was hit anywhere."""
    x = np.asarray(x, dtype=float)
    touched = bool(np.any(x > EXP_CAP))
    return np.exp(np.minimum(x, EXP_CAP)), touched


def integrate(mesh, func, *fields, order=2):
    """Integrate ``func(*interpolated_fields)`` over the mesh.

    Each field is a nodal array; it is linearly interpolated to the
    quadrature points before ``func`` is applied. Orders: 1 is the vertex
    (lumped) rule, 2 the 3-point rule, 3 the 7-point rule.
    """
    Q, w, _ = mesh.quadrature(order)
    vals = [Q @ np.asarray(f, dtype=float) for f in fields]
    return float(w @ np.asarray(func(*vals), dtype=float))


# -- mesh construction ----------------------------------------------------------

def build_rect_mesh(width, height, nx, ny):
    """Structured triangulation of ``[0, width] x [0, height]`` (alternating diagonals)."""
    if not (width > 0 and height > 0):
        raise MeshError("rectangle dimensions must be positive")
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise MeshError("nx and ny must be positive integers")
    nx, ny = int(nx), int(ny)
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    tris = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 2, a + nx + 1
            # union-jack pattern keeps the max angle at 90 degrees in both diagonals
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    return Mesh(vertices, np.array(tris))


def build_disk_mesh(refinement_level, radius=1.0, center=(0.0, 0.0)):
    """Triangulation of a disk: a 12-sector fan, uniformly refined.

    Boundary vertices lie on the circle at every level; the longest edge
    halves per level and all angles stay at or above 30 degrees (up to the
    small distortion from projecting boundary midpoints).
    """
    if int(refinement_level) != refinement_level or refinement_level < 0:
        raise MeshError(f"refinement level must be a nonnegative integer, got {refinement_level}")
    if radius <= 0:
        raise MeshError("radius must be positive")
    n = 12
    theta = 2.0 * np.pi * np.arange(n) / n
    cx, cy = center
    ring = np.column_stack([cx + radius * np.cos(theta), cy + radius * np.sin(theta)])
    vertices = np.vstack([[cx, cy], ring])
    triangles = np.array([(0, 1 + k, 1 + (k + 1) % n) for k in range(n)])
    mesh = Mesh(vertices, triangles, circle=(float(cx), float(cy), float(radius)))
    for _ in range(int(refinement_level)):
        mesh = refine(mesh)
    return mesh


def refine(mesh):
    """Split every triangle into four through its edge midpoints."""
    edges, inverse, counts = mesh._edge_data
    nv = mesh.n_vertices
    mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    if mesh.circle is not None:
        cx, cy, r = mesh.circle
        on_boundary = counts == 1
        d = mid[on_boundary] - (cx, cy)
        mid[on_boundary] = (cx, cy) + r * d / np.linalg.norm(d, axis=1)[:, None]
    nt = mesh.n_triangles
    # inverse is ordered [edge01 of all triangles, edge12..., edge20...]
    m01 = nv + inverse[:nt]
    m12 = nv + inverse[nt:2 * nt]
    m20 = nv + inverse[2 * nt:]
    t = mesh.triangles
    new = np.concatenate([
        np.column_stack([t[:, 0], m01, m20]),
        np.column_stack([m01, t[:, 1], m12]),
        np.column_stack([m20, m12, t[:, 2]]),
        np.column_stack([m01, m12, m20]),
    ])
    return Mesh(np.vstack([mesh.vertices, mid]), new, circle=mesh.circle)


# -- text format --------------------------------------------------------------

def save_mesh(mesh, path):
    """Write the ``tmmesh 1`` text format (17 significant digits)."""
    lines = ["tmmesh 1", f"{mesh.n_vertices} {mesh.n_triangles}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles]
    atomic_write(path, "\n".join(lines) + "\n")


def _detect_circle(mesh):
    """``(cx, cy, r)`` if every boundary vertex lies on one circle, else ``None``."""
    b = mesh.vertices[mesh.boundary]
    if len(b) < 8:  # a square's corners are concyclic too
        return None
    c = b.mean(axis=0)
    d = np.linalg.norm(b - c, axis=1)
    r = float(d.mean())
    if np.max(np.abs(d - r)) <= 1e-12 * max(r, 1.0):
        return (float(c[0]), float(c[1]), r)
    return None


def load_mesh(path):
    """Read a ``tmmesh 1`` file; boundary is inferred from connectivity."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "tmmesh 1":
        raise MeshFormatError("expected header 'tmmesh 1'", 1)
    try:
        nv, nt = (int(s) for s in text[1].split())
    except (IndexError, ValueError):
        raise MeshFormatError("expected '<nv> <nt>'", 2) from None
    if len(text) < 2 + nv + nt:
        raise MeshFormatError(f"file ends early: expected {nv} vertices and {nt} triangles", len(text))
    vertices = np.empty((nv, 2))
    triangles = np.empty((nt, 3), dtype=np.int64)
    for k in range(nv):
        parts = text[2 + k].split()
        try:
            if len(parts) != 2:
                raise ValueError
            vertices[k] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshFormatError(f"expected 'x y', got {text[2 + k]!r}", 3 + k) from None
    for k in range(nt):
        lineno = 2 + nv + k
        parts = text[lineno].split()
        try:
            if len(parts) != 3:
                raise ValueError
            triangles[k] = [int(s) for s in parts]
        except ValueError:
            raise MeshFormatError(f"expected 'i j k', got {text[lineno]!r}", lineno + 1) from None
    if any(line.strip() for line in text[2 + nv + nt:]):
        raise MeshFormatError("trailing content after triangles", 3 + nv + nt)
    mesh = Mesh(vertices, triangles)
    circle = _detect_circle(mesh)
    if circle is not None:
        mesh = Mesh(vertices, triangles, circle=circle)
    return mesh


# -- assembly and solves ------------------------------------------------------------

def assemble_stiffness(mesh):
    """Sparse P1 stiffness matrix: ``u @ K @ u == integral |grad u_h|^2``."""
    g = mesh.gradients
    local = mesh.triangle_areas[:, None, None] * np.einsum("tik,tjk->tij", g, g)
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    K = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_vertices,) * 2).tocsr()
    K.sum_duplicates()
    return K


def assemble_mass(mesh):
    """Consistent P1 mass matrix."""
    local = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    vals = (mesh.triangle_areas[:, None, None] * local[None]).ravel()
    M = sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_vertices,) * 2).tocsr()
    M.sum_duplicates()
    return M


def _cg(A, b, rtol, maxiter):
    diag = A.diagonal()
    M = sp.diags(1.0 / diag)
    history = []
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), history

    def record(xk):
        history.append(float(np.linalg.norm(b - A @ xk) / bnorm))

    x, info = spla.cg(A, b, rtol=rtol, atol=0.0, maxiter=maxiter, M=M, callback=record)
    if info != 0:
        raise SolverError(
            f"CG did not converge in {maxiter} iterations "
            f"(relative residual {history[-1] if history else float('nan'):.3e})",
            history,
        )
    return x, history


def solve_interior(mesh, rhs_interior, method="lu", rtol=1e-10, maxiter=None):
    """Solve ``K_II x = rhs`` on interior dofs."""
    if method == "lu":
        return mesh._interior_lu.solve(np.asarray(rhs_interior, dtype=float))
    if method == "cg":
        n = len(mesh.interior)
        rhs = np.asarray(rhs_interior, dtype=float)
        if rhs.ndim == 2:
            return np.column_stack([
                _cg(mesh._interior_stiffness, rhs[:, j], rtol, maxiter or 50 * n)[0]
                for j in range(rhs.shape[1])
            ])
        return _cg(mesh._interior_stiffness, rhs, rtol, maxiter or 50 * n)[0]
    raise ValueError(f"unknown solver method {method!r}")


def solve_dirichlet(mesh, rhs=None, boundary_values=None, *, method="cg", rtol=1e-10, maxiter=None):
    """Solve ``-Laplace w = rhs`` with ``w = boundary_values`` on the boundary.

    ``rhs`` is a nodal density (interpolated, then tested against every
    hat function with the consistent mass matrix). Only the boundary
    entries of ``boundary_values`` are used. The default method is
    Jacobi-preconditioned CG with relative tolerance ``rtol``;
    ``method="lu"`` reuses a cached sparse factorization.
    """
    n = mesh.n_vertices
    w = np.zeros(n)
    I, B = mesh.interior, mesh.boundary
    if boundary_values is not None:
        g = np.asarray(boundary_values, dtype=float)
        if g.shape != (n,):
            raise ValueError(f"boundary_values must have shape ({n},)")
        w[B] = g[B]
    b = np.zeros(len(I))
    if rhs is not None:
        f = np.asarray(rhs, dtype=float)
        if f.shape != (n,):
            raise ValueError(f"rhs must have shape ({n},)")
        b += (mesh.mass @ f)[I]
    if boundary_values is not None:
        b -= mesh._interior_boundary_stiffness @ w[B]
    if len(I):
        w[I] = solve_interior(mesh, b, method=method, rtol=rtol, maxiter=maxiter)
    return w


def h1_seminorm(mesh, u):
    """``sqrt(u^T K u)``, the L^2 norm of the gradient of the P1 interpolant."""
    u = np.asarray(u, dtype=float)
    return float(np.sqrt(max(u @ (mesh.stiffness @ u), 0.0)))
