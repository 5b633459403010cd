import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tmx import fem
from tmx.functional import PerturbParams
from tmx.maximizer import (
    AscentOptions,
    InitRejectedError,
    SeedSpec,
    TrudingerMoserMaximizer,
    blowup_diagnostics,
    bubble_scale,
    make_seeds,
    maximize,
    multi_start,
    normalize,
)
from tmx.moser import DEFAULT_EPS_GRID, build_test_function
from tmx import functional as F
from tmx.radial import phi_inf


@pytest.fixture(scope="module")
def bubble3(disk3, report3):
    return build_test_function(disk3, math.exp(-8), green=report3.green)


@pytest.fixture(scope="module")
def result0(disk3, bubble3):
    return maximize(disk3, PerturbParams(0.0, 2.0), bubble3, seed_id="bubble")


class TestMaximize:
    def test_contracts(self, disk3, bubble3, result0):
        assert result0.converged and not result0.stagnated
        assert result0.el_residual <= 1e-6
        assert fem.h1_seminorm(disk3, result0.u) == pytest.approx(1.0, abs=1e-10)
        assert np.all(np.diff(result0.history) >= 0)
        assert result0.J >= F.evaluate(disk3, bubble3, PerturbParams())
        assert result0.u.min() >= 0
        k = int(np.argmax(result0.u))
        assert result0.c == result0.u[k]
        assert np.array_equal(result0.x_peak, disk3.vertices[k])
        assert result0.gamma == pytest.approx(2 * math.sqrt(math.pi) * result0.c, rel=1e-15)
        assert isinstance(result0.gamma, float)

    def test_energy_identity(self, result0):
        s = result0.energy
        assert abs(s.gradient_norm_sq - (s.I_E - s.I_P)) <= 1e-4 * s.I_E

    def test_beats_test_functions(self, disk3, report3, result0):
        for eps in DEFAULT_EPS_GRID:
            phi = build_test_function(disk3, eps, green=report3.green)
            assert result0.J >= F.evaluate(disk3, phi, PerturbParams())

    def test_sign_canonicalization(self, disk3, bubble3, result0):
        neg = maximize(disk3, PerturbParams(0.0, 2.0), -bubble3)
        assert neg.J == pytest.approx(result0.J, rel=1e-12)
        assert neg.u.min() >= 0

    def test_unnormalized_init(self, disk3, bubble3, result0):
        res = maximize(disk3, PerturbParams(0.0, 2.0), 3.0 * bubble3)
        assert res.J == pytest.approx(result0.J, rel=1e-12)

    def test_iteration_cap(self, disk3, bubble3):
        res = maximize(disk3, PerturbParams(0.0, 2.0), bubble3, AscentOptions(max_iters=2))
        assert not res.converged and res.iterations == 2
        assert fem.h1_seminorm(disk3, res.u) == pytest.approx(1.0, abs=1e-10)

    def test_zero_init_rejected(self, disk3):
        with pytest.raises(ValueError):
            maximize(disk3, PerturbParams(), np.zeros(disk3.n_vertices))

    def test_nonzero_boundary_rejected(self, disk3, bubble3):
        u = bubble3.copy()
        u[disk3.boundary[0]] = 1.0
        with pytest.raises(ValueError):
            maximize(disk3, PerturbParams(), u)

    def test_negative_normalizer_rejected(self, disk3):
        w = fem.solve_dirichlet(disk3, np.ones(disk3.n_vertices), method="lu")
        with pytest.raises(InitRejectedError):
            maximize(disk3, PerturbParams(1e4, 1.0), w)

    def test_attainment_regime(self, disk4, report4):
        # level 3 is too coarse to resolve the bubble; level 4 already clears S^delta
        res = multi_start(disk4, PerturbParams(10.0, 2.0), SeedSpec(), potential_report=report4)
        assert res.converged
        assert res.J > report4.concentration_level

    def test_normalize_idempotent(self, disk3, bubble3, rng):
        u = bubble3 * rng.uniform(0.5, 5)
        once = normalize(disk3, u)
        assert np.max(np.abs(normalize(disk3, once) - once)) <= 1e-14 * np.max(np.abs(once))

    def test_to_dict(self, result0):
        d = result0.to_dict()
        assert d["params"]["lambda"] == 0.0 and d["energy"]["E"] > 0


class TestMultiStart:
    def test_single_seed_equals_maximize(self, disk3, bubble3, result0):
        res = multi_start(disk3, PerturbParams(), seeds=[("bubble", bubble3)])
        assert res.J == result0.J
        assert np.array_equal(res.u, result0.u)
        assert len(res.runs) == 1

    def test_inclusion_monotone(self, disk3, report3):
        params = PerturbParams(2.0, 2.0)
        small = multi_start(disk3, params, SeedSpec(DEFAULT_EPS_GRID[:1], False), potential_report=report3)
        large = multi_start(disk3, params, SeedSpec(DEFAULT_EPS_GRID[:3], True, 2), potential_report=report3)
        assert large.J >= small.J

    def test_all_rejected(self, disk3):
        with pytest.raises(InitRejectedError):
            multi_start(disk3, PerturbParams(1e4, 1.0), SeedSpec((), True))

    def test_rejected_seed_recorded(self, disk3, report3):
        res = multi_start(disk3, PerturbParams(30.0, 1.0), SeedSpec(DEFAULT_EPS_GRID[:1], True), potential_report=report3)
        assert len(res.runs) == 2

    def test_seed_spec_round_trip(self):
        spec = SeedSpec.parse("bubble:6,8,10;eigen;random:3", rng_seed=5)
        assert spec.bubble_eps == pytest.approx(DEFAULT_EPS_GRID[:3], rel=1e-15)
        assert spec.random_bumps == 3 and spec.eigen and spec.rng_seed == 5
        again = SeedSpec.parse(spec.to_text(), rng_seed=5)
        assert again == spec

    def test_seed_spec_unknown(self):
        with pytest.raises(ValueError):
            SeedSpec.parse("flat")

    def test_random_seeds_deterministic(self, disk3):
        a = make_seeds(disk3, SeedSpec((), False, 3, rng_seed=11))
        b = make_seeds(disk3, SeedSpec((), False, 3, rng_seed=11))
        c = make_seeds(disk3, SeedSpec((), False, 3, rng_seed=12))
        assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
        assert not np.array_equal(a[0][1], c[0][1])
        for _, u in a:
            assert np.all(u[disk3.boundary] == 0)


class TestBlowup:
    def test_scale_identity(self, result0, disk3, report3):
        rep = blowup_diagnostics(result0, disk3, report3)
        E, g = result0.energy.E, result0.gamma
        assert rep.r_k**2 == pytest.approx(E / math.pi * g**-2 * math.exp(-g * g), rel=1e-12)
        assert rep.r_k == bubble_scale(E, g)

    def test_profile_origin(self, result0, disk3, report3):
        rep = blowup_diagnostics(result0, disk3, report3)
        assert np.all(rep.rescaled_profile[0] == 0.0)
        assert rep.R_sample <= 10.0
        assert rep.energy_ratio_target == pytest.approx(report3.concentration_excess)

    def test_comparator_value(self):
        assert phi_inf(1.0) == pytest.approx(-math.log(2.0), abs=1e-15)

    def test_deviation_decreases_under_refinement(self, disk3, disk4, report3, report4):
        devs = []
        for mesh, rep in ((disk3, report3), (disk4, report4)):
            res = multi_start(mesh, PerturbParams(), SeedSpec(), potential_report=rep)
            devs.append(blowup_diagnostics(res, mesh, rep).phi_inf_sup_2)
        assert devs[1] < devs[0]

    def test_requires_positive_peak(self, result0, disk3, report3):
        from dataclasses import replace
        with pytest.raises(ValueError):
            blowup_diagnostics(replace(result0, c=0.0), disk3, report3)


class TestEstimator:
    def test_fit_score(self, disk3):
        est = TrudingerMoserMaximizer(lam=0.0, seeds="bubble:8")
        assert est.fit(disk3) is est
        assert est.score(disk3) == pytest.approx(est.J_, rel=1e-14)
        assert fem.h1_seminorm(disk3, est.u_) == pytest.approx(1.0, abs=1e-10)

    def test_params_and_clone(self):
        est = TrudingerMoserMaximizer(lam=3.0, p=1.5)
        assert est.get_params()["lam"] == 3.0
        c = clone(est).set_params(p=2.5)
        assert c.p == 2.5 and est.p == 1.5

    def test_not_fitted(self, disk3):
        with pytest.raises(NotFittedError):
            TrudingerMoserMaximizer().score(disk3)

    def test_wrong_input(self):
        with pytest.raises(TypeError):
            TrudingerMoserMaximizer().fit(np.zeros((3, 2)))

    def test_mesh_mismatch(self, disk3):
        est = TrudingerMoserMaximizer(seeds="eigen").fit(disk3)
        with pytest.raises(ValueError):
            est.score(fem.build_disk_mesh(1))
