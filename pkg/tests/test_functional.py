import numpy as np
import pytest

from tmx import fem
from tmx import functional as F
from tmx.functional import PerturbParams, Variant


def smooth_field(mesh, rng, amp=1.0):
    x, y = mesh.vertices.T
    bump = np.clip(1.0 - x * x - y * y, 0.0, None)
    a = rng.uniform(-1, 1, 4)
    u = bump * (a[0] + a[1] * x + a[2] * y + a[3] * np.cos(3 * x * y))
    return amp * u / np.max(np.abs(u))


@pytest.fixture(scope="module")
def mesh():
    return fem.build_disk_mesh(3)


class TestParams:
    def test_p_below_one(self):
        with pytest.raises(ValueError):
            PerturbParams(1.0, 0.5)

    def test_nonfinite_lambda(self):
        with pytest.raises(ValueError):
            PerturbParams(float("nan"), 2.0)

    def test_variant_from_text(self):
        assert PerturbParams(variant="with").variant is Variant.WITH_MINUS_ONE

    def test_negative_lambda_allowed(self):
        assert PerturbParams(-3.0, 2.0).lam == -3.0


class TestEvaluate:
    def test_zero_field(self, mesh):
        u = np.zeros(mesh.n_vertices)
        assert F.evaluate(mesh, u, PerturbParams()) == pytest.approx(mesh.area, rel=1e-14)
        assert F.evaluate(mesh, u, PerturbParams(variant="with")) == pytest.approx(0.0, abs=1e-14)

    @pytest.mark.parametrize("p", [1.0, 1.5, 2.0, 3.0])
    def test_variant_identity(self, mesh, rng, p):
        u = smooth_field(mesh, rng)
        a = F.evaluate(mesh, u, PerturbParams(2.0, p, "without"))
        b = F.evaluate(mesh, u, PerturbParams(2.0, p, "with"))
        assert a - b == pytest.approx(mesh.area, rel=1e-13)

    def test_decreasing_in_lambda(self, mesh, rng):
        u = smooth_field(mesh, rng)
        vals = [F.evaluate(mesh, u, PerturbParams(lam, 1.5)) for lam in (-1, 0, 1, 5, 20)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("p", [1.0, 2.0, 2.5])
    def test_even(self, mesh, rng, p):
        u = smooth_field(mesh, rng)
        params = PerturbParams(3.0, p)
        assert F.evaluate(mesh, u, params) == F.evaluate(mesh, -u, params)

    def test_overflow_flag(self, mesh, rng):
        u = smooth_field(mesh, rng, amp=10.0)
        assert F.functional_terms(mesh, u, PerturbParams())["overflow"]
        assert not F.functional_terms(mesh, u / 10.0, PerturbParams())["overflow"]


class TestGradient:
    def test_zero_density(self, mesh):
        assert np.all(F.gradient_density(mesh, np.zeros(mesh.n_vertices), PerturbParams(5.0, 2.0)) == 0)

    def test_lambda_zero_sign(self, mesh, rng):
        u = np.abs(smooth_field(mesh, rng))
        g = F.gradient_density(mesh, u, PerturbParams())
        assert np.all(g[u > 0] > 0)

    def test_p_below_two_at_zero(self, mesh):
        g = F.gradient_density(mesh, np.zeros(mesh.n_vertices), PerturbParams(1.0, 1.0))
        assert np.all(g == 0.0)

    @pytest.mark.parametrize("p", [1.0, 2.0, 3.0])
    def test_finite_differences(self, mesh, p):
        rng = np.random.default_rng(7)
        params = PerturbParams(2.0, p)
        h = 1e-5
        for _ in range(20):
            u = np.abs(smooth_field(mesh, rng)) * 0.5 + 0.1 * (1 - np.sum(mesh.vertices**2, axis=1))
            phi = smooth_field(mesh, rng)
            fd = (F.evaluate(mesh, u + h * phi, params) - F.evaluate(mesh, u - h * phi, params)) / (2 * h)
            an = F.load_vector(mesh, u, params) @ phi
            assert abs(fd - an) <= 1e-6 * max(abs(an), 1.0)

    def test_riesz_consistency(self, mesh, rng):
        params = PerturbParams(3.0, 2.0)
        for _ in range(5):
            u, v = smooth_field(mesh, rng), smooth_field(mesh, rng)
            w = F.riesz_gradient(mesh, u, params)
            b = F.load_vector(mesh, u, params)
            assert v @ mesh.stiffness @ w == pytest.approx(v @ b, rel=1e-8)
            assert np.all(w[mesh.boundary] == 0)

    def test_riesz_zero(self, mesh):
        w = F.riesz_gradient(mesh, np.zeros(mesh.n_vertices), PerturbParams())
        assert np.all(w == 0)

    def test_ascent_direction(self, mesh, rng):
        params = PerturbParams(1.0, 2.0)
        u = smooth_field(mesh, rng, amp=0.3)
        w = F.riesz_gradient(mesh, u, params)
        assert F.evaluate(mesh, u + 1e-4 * w, params) > F.evaluate(mesh, u, params)


class TestResidual:
    def test_random_field_order_one(self, mesh, rng):
        u = smooth_field(mesh, rng)
        u /= fem.h1_seminorm(mesh, u)
        res, E = F.el_residual(mesh, u, PerturbParams())
        assert E > 0 and 0.05 < res <= 1.0 + 1e-12

    def test_scale_recomputed(self, mesh, rng):
        u = smooth_field(mesh, rng)
        r1, E1 = F.el_residual(mesh, u, PerturbParams())
        r2, E2 = F.el_residual(mesh, u / fem.h1_seminorm(mesh, u), PerturbParams())
        assert E1 != E2 and r1 != r2

    def test_degenerate(self, mesh, rng):
        u = 0.01 * np.abs(smooth_field(mesh, rng))
        with pytest.raises(F.DegenerateNormalizerError):
            F.el_residual(mesh, u, PerturbParams(1e4, 1.0))

    def test_unit_field_residual_is_sine_of_angle(self, mesh, rng):
        params = PerturbParams(1.0, 2.0)
        u = np.abs(smooth_field(mesh, rng))
        u /= fem.h1_seminorm(mesh, u)
        w = F.riesz_gradient(mesh, u, params)
        K = mesh.stiffness
        cos = (u @ K @ w) / np.sqrt(w @ K @ w)
        res, _ = F.el_residual(mesh, u, params)
        assert res == pytest.approx(np.sqrt(1 - cos * cos), rel=1e-8)


class TestEnergyDecompose:
    def test_lambda_zero(self, mesh, rng):
        assert F.energy_decompose(mesh, smooth_field(mesh, rng), PerturbParams()).I_P == 0.0

    def test_u_and_v_agree(self, mesh, rng):
        u = smooth_field(mesh, rng)
        params = PerturbParams(2.0, 1.5)
        a = F.energy_decompose(mesh, u, params)
        b = F.energy_decompose(mesh, 2 * np.sqrt(np.pi) * u, params, scale="v")
        assert a.I_E == pytest.approx(b.I_E, rel=1e-13)
        assert a.I_P == pytest.approx(b.I_P, rel=1e-13)

    def test_bad_scale(self, mesh, rng):
        with pytest.raises(ValueError):
            F.energy_decompose(mesh, smooth_field(mesh, rng), PerturbParams(), scale="w")

    def test_identity_at_fixed_point(self, mesh, report3):
        from tmx.maximizer import maximize
        from tmx.moser import build_test_function

        params = PerturbParams(2.0, 2.0)
        init = build_test_function(mesh, np.exp(-6.0), green=report3.green)
        res = maximize(mesh, params, init)
        assert res.converged
        s = res.energy
        assert abs(s.gradient_norm_sq - (s.I_E - s.I_P)) <= 1e-4 * s.I_E
