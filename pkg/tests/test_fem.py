import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmx import fem


def inscribed_polygon_area(n, r=1.0):
    return 0.5 * n * r * r * math.sin(2 * math.pi / n)


class TestDiskMesh:
    def test_level0_area_within_ten_percent(self):
        m = fem.build_disk_mesh(0)
        assert m.n_triangles >= 6
        assert abs(m.area - math.pi) / math.pi <= 0.10

    def test_level5_area_matches_inscribed_polygon(self):
        m = fem.build_disk_mesh(5)
        n_boundary = len(m.boundary)
        # the boundary polygon is inscribed and regular, so its area is the oracle
        assert m.area == pytest.approx(inscribed_polygon_area(n_boundary), rel=1e-12)
        assert abs(m.area - math.pi) / math.pi <= 1e-3

    @pytest.mark.parametrize("level", [0, 1, 2, 3])
    def test_boundary_on_circle(self, level):
        m = fem.build_disk_mesh(level)
        r = np.linalg.norm(m.vertices[m.boundary], axis=1)
        assert np.max(np.abs(r - 1.0)) <= 1e-12

    def test_edge_length_halves(self):
        hs = [fem.build_disk_mesh(k).h for k in range(4)]
        ratios = np.array(hs[:-1]) / np.array(hs[1:])
        assert np.all(np.abs(ratios - 2.0) < 0.15)

    def test_min_angle(self):
        for k in range(4):
            assert np.degrees(fem.build_disk_mesh(k).min_angle) >= 20.0

    def test_negative_level_rejected(self):
        with pytest.raises(ValueError):
            fem.build_disk_mesh(-1)

    def test_radius_and_center(self):
        m = fem.build_disk_mesh(2, radius=2.0, center=(1.0, -1.0))
        r = np.linalg.norm(m.vertices[m.boundary] - [1.0, -1.0], axis=1)
        assert np.allclose(r, 2.0, atol=1e-12)


class TestRectMesh:
    def test_small(self):
        m = fem.build_rect_mesh(1, 1, 2, 2)
        assert m.n_triangles == 8
        assert m.area == pytest.approx(1.0, rel=1e-12)

    def test_area(self):
        assert fem.build_rect_mesh(2, 1, 4, 2).area == pytest.approx(2.0, rel=1e-12)

    def test_interior_count(self):
        m = fem.build_rect_mesh(1, 1, 64, 64)
        assert len(m.interior) == 63 * 63

    @pytest.mark.parametrize("args", [(0, 1, 2, 2), (1, -1, 2, 2), (1, 1, 0, 2), (1, 1, 2, 0)])
    def test_rejects_bad_input(self, args):
        with pytest.raises(ValueError):
            fem.build_rect_mesh(*args)

    def test_min_angle(self):
        assert np.degrees(fem.build_rect_mesh(1, 1, 8, 8).min_angle) >= 20.0


class TestMeshValidation:
    def test_index_out_of_range(self):
        with pytest.raises(fem.MeshError, match="out of range"):
            fem.Mesh(np.array([[0, 0], [1, 0], [0, 1.0]]), np.array([[0, 1, 3]]))

    def test_zero_area(self):
        with pytest.raises(fem.MeshError, match="zero area"):
            fem.Mesh(np.array([[0, 0], [1, 0], [2, 0.0]]), np.array([[0, 1, 2]]))

    def test_clockwise_is_reoriented(self):
        m = fem.Mesh(np.array([[0, 0], [1, 0], [0, 1.0]]), np.array([[0, 2, 1]]))
        assert m.triangle_areas[0] > 0

    def test_non_manifold_edge(self):
        v = np.array([[0, 0], [1, 0], [0, 1.0], [0, -1.0], [1, 1.0]])
        t = np.array([[0, 1, 2], [0, 3, 1], [0, 1, 4]])
        with pytest.raises(fem.MeshError):
            fem.Mesh(v, t)

    def test_boundary_mask_is_boundary_edge_vertices(self):
        m = fem.build_rect_mesh(1, 1, 3, 3)
        expected = np.zeros(m.n_vertices, dtype=bool)
        expected[m.boundary_edges.ravel()] = True
        assert np.array_equal(m.boundary_mask, expected)

    def test_each_boundary_edge_in_one_triangle(self, disk3):
        tri_edges = np.sort(np.vstack([disk3.triangles[:, [0, 1]], disk3.triangles[:, [1, 2]],
                                       disk3.triangles[:, [2, 0]]]), axis=1)
        for e in np.sort(disk3.boundary_edges, axis=1)[:20]:
            assert np.sum(np.all(tri_edges == e, axis=1)) == 1

    def test_area_is_sum(self, disk3):
        assert disk3.area == pytest.approx(disk3.triangle_areas.sum(), rel=1e-12)


class TestMeshIO:
    def test_round_trip(self, tmp_path):
        m = fem.build_disk_mesh(0)
        path = tmp_path / "m.tmmesh"
        fem.save_mesh(m, path)
        m2 = fem.load_mesh(path)
        assert np.array_equal(m.vertices, m2.vertices)
        assert np.array_equal(m.triangles, m2.triangles)
        assert m2.circle is not None

    def test_round_trip_random_vertices(self, tmp_path, rng):
        m = fem.build_rect_mesh(1, 1, 3, 3)
        v = m.vertices + 1e-3 * rng.standard_normal(m.vertices.shape) * ~m.boundary_mask[:, None]
        m = fem.Mesh(v, m.triangles)
        fem.save_mesh(m, tmp_path / "r.tmmesh")
        assert np.array_equal(fem.load_mesh(tmp_path / "r.tmmesh").vertices, m.vertices)

    def test_bad_index(self, tmp_path):
        p = tmp_path / "bad.tmmesh"
        p.write_text("tmmesh 1\n3 1\n0 0\n1 0\n0 1\n0 1 3\n")
        with pytest.raises(fem.MeshError, match="out of range"):
            fem.load_mesh(p)

    def test_zero_area(self, tmp_path):
        p = tmp_path / "flat.tmmesh"
        p.write_text("tmmesh 1\n3 1\n0 0\n1 0\n2 0\n0 1 2\n")
        with pytest.raises(fem.MeshError, match="zero area"):
            fem.load_mesh(p)

    def test_parse_error_names_line(self, tmp_path):
        p = tmp_path / "garbled.tmmesh"
        p.write_text("tmmesh 1\n3 1\n0 0\n1 zero\n0 1\n0 1 2\n")
        with pytest.raises(fem.MeshFormatError) as exc:
            fem.load_mesh(p)
        assert exc.value.line == 4
        assert "line 4" in str(exc.value)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "h.tmmesh"
        p.write_text("mesh 2\n")
        with pytest.raises(fem.MeshFormatError):
            fem.load_mesh(p)


class TestRefine:
    def test_square_counts(self):
        m = fem.build_rect_mesh(1, 1, 2, 2)
        assert fem.refine(m).n_triangles == 32

    def test_disk_area_grows(self, disk3):
        assert fem.refine(disk3).area > disk3.area

    @pytest.mark.parametrize("mesh", [fem.build_rect_mesh(1, 2, 3, 2), fem.build_disk_mesh(1)])
    def test_vertex_count_is_v_plus_e(self, mesh):
        assert fem.refine(mesh).n_vertices == mesh.n_vertices + len(mesh.edges)

    def test_refined_boundary_on_circle(self, disk3):
        m = fem.refine(disk3)
        assert np.allclose(np.linalg.norm(m.vertices[m.boundary], axis=1), 1.0, atol=1e-12)


class TestAssembly:
    def test_symmetric_and_zero_row_sums(self, disk3):
        K = fem.assemble_stiffness(disk3)
        assert abs(K - K.T).max() <= 1e-14 * abs(K).max()
        assert np.max(np.abs(K.sum(axis=1))) <= 1e-12

    def test_constant_in_kernel(self, disk3):
        one = np.ones(disk3.n_vertices)
        assert abs(one @ disk3.stiffness @ one) <= 1e-12

    def test_linear_function_energy(self):
        m = fem.build_rect_mesh(1, 1, 5, 5)
        u = m.vertices[:, 0]
        assert u @ m.stiffness @ u == pytest.approx(1.0, rel=1e-12)
        assert fem.h1_seminorm(m, u) == pytest.approx(1.0, rel=1e-12)

    def test_nonnegative(self, disk3, rng):
        for _ in range(5):
            u = rng.standard_normal(disk3.n_vertices)
            assert u @ disk3.stiffness @ u >= 0

    def test_matches_per_triangle_gradients(self, disk3, rng):
        u = rng.standard_normal(disk3.n_vertices)
        total = 0.0
        for tri, area in zip(disk3.triangles, disk3.triangle_areas):
            p = disk3.vertices[tri]
            A = np.column_stack([p, np.ones(3)])
            grad = np.linalg.solve(A, u[tri])[:2]
            total += area * grad @ grad
        assert u @ disk3.stiffness @ u == pytest.approx(total, rel=1e-12)

    def test_mass_integrates_constants(self, disk3):
        one = np.ones(disk3.n_vertices)
        assert one @ disk3.mass @ one == pytest.approx(disk3.area, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(nx=st.integers(1, 6), ny=st.integers(1, 6), w=st.floats(0.5, 3.0), h=st.floats(0.5, 3.0),
       seed=st.integers(0, 2**16))
def test_stiffness_form_equals_gradient_sum(nx, ny, w, h, seed):
    m = fem.build_rect_mesh(w, h, nx, ny)
    u = np.random.default_rng(seed).standard_normal(m.n_vertices)
    g = np.einsum("tik,ti->tk", m.gradients, u[m.triangles])
    expected = float(np.sum(m.triangle_areas * np.sum(g * g, axis=1)))
    assert u @ m.stiffness @ u == pytest.approx(expected, rel=1e-12, abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(c=st.floats(-1e3, 1e3, allow_nan=False).filter(lambda c: c == 0 or abs(c) > 1e-100), seed=st.integers(0, 2**16))
def test_seminorm_homogeneous(c, seed):
    m = fem.build_disk_mesh(1)
    u = np.random.default_rng(seed).standard_normal(m.n_vertices)
    assert fem.h1_seminorm(m, c * u) == pytest.approx(abs(c) * fem.h1_seminorm(m, u), rel=1e-12, abs=1e-300)


class TestSolveDirichlet:
    def test_zero_problem(self, disk3):
        assert np.all(fem.solve_dirichlet(disk3) == 0.0)

    def test_maximum_principle(self, disk3):
        x, y = disk3.vertices.T
        g = np.cos(3 * x) + y
        w = fem.solve_dirichlet(disk3, boundary_values=g)
        gb = g[disk3.boundary]
        assert gb.min() - 1e-10 <= w.min() and w.max() <= gb.max() + 1e-10
        assert np.array_equal(w[disk3.boundary], gb)

    def test_nonnegative_source(self, disk3):
        x, _ = disk3.vertices.T
        g = x.copy()
        w = fem.solve_dirichlet(disk3, rhs=np.ones(disk3.n_vertices), boundary_values=g)
        assert w.min() >= g[disk3.boundary].min() - 1e-12

    def test_disk_radial_solution(self, disk4):
        # -Laplace w = 2 with w = 0 on the unit circle has w = (1 - |x|^2) / 2
        w = fem.solve_dirichlet(disk4, rhs=np.full(disk4.n_vertices, 2.0))
        k = int(np.argmin(np.linalg.norm(disk4.vertices, axis=1)))
        assert abs(w[k] - 0.5) <= 5e-3

    def test_cg_matches_lu(self, disk3, rng):
        f = rng.standard_normal(disk3.n_vertices)
        a = fem.solve_dirichlet(disk3, rhs=f, method="cg", rtol=1e-12)
        b = fem.solve_dirichlet(disk3, rhs=f, method="lu")
        assert np.max(np.abs(a - b)) <= 1e-9 * np.max(np.abs(b))

    def test_nonconvergence_reports_history(self, disk4):
        with pytest.raises(fem.SolverError) as exc:
            fem.solve_dirichlet(disk4, rhs=np.ones(disk4.n_vertices), maxiter=3)
        assert len(exc.value.residual_history) == 3


class TestIntegrate:
    def test_constant(self):
        m = fem.build_rect_mesh(1, 1, 4, 4)
        for order in (1, 2, 3):
            assert fem.integrate(m, lambda x: np.ones_like(x), m.vertices[:, 0], order=order) == pytest.approx(1.0)

    @pytest.mark.parametrize("order", [2, 3])
    def test_x_squared(self, order):
        m = fem.build_rect_mesh(1, 1, 1, 1)
        # x is linear so its interpolant is exact and the rule integrates x^2 exactly
        val = fem.integrate(m, lambda x: x * x, m.vertices[:, 0], order=order)
        assert val == pytest.approx(1.0 / 3.0, rel=1e-13)

    def test_bad_order(self, disk3):
        with pytest.raises(ValueError):
            disk3.quadrature(4)

    def test_lumped_and_seven_point_converge(self):
        diffs = []
        for k in range(1, 5):
            m = fem.build_disk_mesh(k)
            u = np.cos(m.vertices[:, 0]) * (1 - np.sum(m.vertices**2, axis=1))
            diffs.append(abs(fem.integrate(m, np.exp, u, order=1) - fem.integrate(m, np.exp, u, order=3)))
        assert all(b < a for a, b in zip(diffs, diffs[1:]))
        assert diffs[-1] < 0.1 * diffs[0]

    def test_exp_cap(self):
        vals, touched = fem.exp_capped(np.array([1.0, 800.0]))
        assert touched and np.isfinite(vals).all()
        assert vals[1] == np.exp(fem.EXP_CAP)


def test_refinement_convergence_of_seminorm():
    # the interpolant of a smooth field converges in H^1 at order h
    def field(m):
        x, y = m.vertices.T
        return np.sin(np.pi * x) * np.sin(np.pi * y)

    exact = math.pi / math.sqrt(2.0)  # ||grad (sin pi x sin pi y)|| on the unit square
    errs, hs = [], []
    for n in (4, 8, 16, 32):
        m = fem.build_rect_mesh(1, 1, n, n)
        errs.append(abs(fem.h1_seminorm(m, field(m)) - exact))
        hs.append(m.h)
    orders = np.diff(np.log(errs)) / np.diff(np.log(hs))
    assert np.all(orders >= 0.9)
