import math

import numpy as np
import pytest

import sdesimilarity as ss
from sdesimilarity import conditions as cond
from sdesimilarity import linearize as lin
from sdesimilarity.errors import (
    AllPathsExitImmediately,
    ContractionViolated,
    NotAFixedPoint,
    SingularDenominator,
    SingularDiffusion,
    UnsupportedDichotomy,
)
from sdesimilarity.sde import (
    AffineDrift,
    ConstantDiffusion,
    LinearDrift,
    LinearStateDiffusion,
    SdeSystem,
    scalar_polynomial_system,
)


def scalar_system(drift_coeffs, diffusion_coeffs):
    return scalar_polynomial_system(drift_coeffs, diffusion_coeffs)


class TestKstarOde:
    def test_identical_systems_recover_identity(self):
        # f(x) = x, sigma = 1, anchor (1, 1): the solution is K(x) = x.
        sys_s = scalar_system([0.0, 1.0], [1.0])
        problem = lin.KstarOdeProblem(sys_s, sys_s, (1.0, 1.0), (0.5, 2.0), 2000)
        sol = lin.solve_kstar_ode_1d(problem)
        assert sol.monotone
        probes = np.linspace(0.5, 2.0, 301).reshape(-1, 1)
        err = np.abs(ss.apply(sol.mapping, probes) - probes).max()
        assert err < 1e-6

    def test_constant_rhs_gives_decreasing_map(self):
        # f = 1, sigma = 1, g = 0, varsigma = 1: dK/dx = -1 from (0, 0).
        sys_x = SdeSystem(1, 1, AffineDrift([[0.0]], [1.0]), ConstantDiffusion([[1.0]]))
        sys_y = scalar_system([0.0], [1.0])
        problem = lin.KstarOdeProblem(sys_x, sys_y, (0.0, 0.0), (-1.0, 1.0), 1000)
        sol = lin.solve_kstar_ode_1d(problem)
        assert sol.monotone
        probes = np.linspace(-1.0, 1.0, 101).reshape(-1, 1)
        np.testing.assert_allclose(
            ss.apply(sol.mapping, probes), -probes, atol=1e-10
        )

    def test_vanishing_drift_rejected(self):
        sys_s = scalar_system([0.0, 1.0], [1.0])  # f(x) = x vanishes at 0
        problem = lin.KstarOdeProblem(sys_s, sys_s, (0.5, 0.5), (-1.0, 1.0), 500)
        with pytest.raises(SingularDenominator):
            lin.solve_kstar_ode_1d(problem)

    def test_non_monotone_solution_flagged(self):
        # f = 1, sigma(x) = x, g = 1, varsigma = 1 on [0.25, 2]:
        # dK/dx = (2x - 1)/x changes sign at x = 1/2.
        sys_x = SdeSystem(
            1, 1, AffineDrift([[0.0]], [1.0]),
            ss.sde.PolynomialDiffusion([[ss.sde.Polynomial([1.0], [[1]])]]),
        )
        sys_y = SdeSystem(1, 1, AffineDrift([[0.0]], [1.0]), ConstantDiffusion([[1.0]]))
        problem = lin.KstarOdeProblem(sys_x, sys_y, (1.0, 0.0), (0.25, 2.0), 1000)
        sol = lin.solve_kstar_ode_1d(problem)
        assert not sol.monotone


class TestKstarMatrixRhs:
    def test_identity_on_conjugacy_manifold(self):
        sig = np.array([[1.0, 0.2], [0.0, 0.7]])
        sys_x = ss.linear_system(-np.eye(2), sig)
        sys_y = ss.linear_system(-2 * np.eye(2), sig)
        x = np.array([0.4, -0.3])
        y = np.array([0.1, 0.9])
        rhs = lin.kstar_matrix_rhs(sys_x, sys_y, x, y, kx=y)
        np.testing.assert_allclose(rhs, np.eye(2), atol=1e-9)

    def test_scalar_reduction_formula(self):
        # n = 1: the matrix form reduces to (psi f - sigma vsigma)/(-sigma^2).
        sys_x = scalar_system([0.0, 2.0], [1.5])
        sys_y = scalar_system([0.0, -1.0], [0.5])
        x, y, kx = 0.8, 0.3, 0.7
        rhs = lin.kstar_matrix_rhs(sys_x, sys_y, [x], [y], [kx])
        f = 2.0 * x
        sigma, vsigma = 1.5, 0.5
        psi = kx - y
        expected = (psi * f - sigma * vsigma) / (-(sigma**2))
        assert rhs[0, 0] == pytest.approx(expected, rel=1e-9)

    def test_singular_diffusion_raises(self):
        sys_x = ss.linear_system(-np.eye(2), np.zeros((2, 2)))
        sys_y = ss.linear_system(-np.eye(2), np.eye(2))
        with pytest.raises(SingularDiffusion):
            lin.kstar_matrix_rhs(sys_x, sys_y, np.ones(2), np.ones(2), np.ones(2))


class TestLinearizeAtFixedPoint:
    def test_cubic_drift(self):
        pair = lin.linearize_at_fixed_point(scalar_system([0.0, -1.0, 0.0, 1.0], [0.0]))
        assert pair.a0[0, 0] == pytest.approx(-1.0)

    def test_linear_noise_channel(self):
        system = SdeSystem(
            1, 1, LinearDrift([[-1.0]]), LinearStateDiffusion([[[1.0]]])
        )
        pair = lin.linearize_at_fixed_point(system)
        assert pair.a_noise[0][0, 0] == pytest.approx(1.0)

    def test_drift_offset_rejected(self):
        with pytest.raises(NotAFixedPoint):
            lin.linearize_at_fixed_point(scalar_system([0.1, -1.0], [0.0]))

    def test_nonvanishing_diffusion_rejected(self):
        with pytest.raises(NotAFixedPoint):
            lin.linearize_at_fixed_point(scalar_system([0.0, -1.0], [1.0]))

    def test_remainder_is_cubic_part(self):
        pair = lin.linearize_at_fixed_point(scalar_system([0.0, -1.0, 0.0, 0.1], [0.0]))
        x = np.array([[0.5], [-0.4]])
        np.testing.assert_allclose(pair.remainder(x), 0.1 * x**3, atol=1e-14)


@pytest.fixture(scope="module")
def cubic_pair():
    return lin.linearize_at_fixed_point(scalar_system([0.0, -1.0, 0.0, 0.1], [0.0]))


@pytest.fixture(scope="module")
def cubic_kernel(cubic_pair):
    lin_sys = SdeSystem(1, 1, LinearDrift(cubic_pair.a0), ConstantDiffusion([[0.0]]))
    spectrum = cond.lyapunov_spectrum(lin_sys, horizon=50.0, seed=0)
    return lin.build_green_kernel(cubic_pair, spectrum, epsilon=0.1)


@pytest.fixture(scope="module")
def cubic_kappa(cubic_pair, cubic_kernel):
    delta = lin.paper_delta(cubic_pair, cubic_kernel)
    return lin.solve_kappa_fixed_point(
        cubic_pair, cubic_kernel, delta, grid_size=201, tol=1e-10
    )


class TestGreenKernel:
    def test_scalar_stable_kernel(self, cubic_pair, cubic_kernel):
        assert cubic_kernel.m_eps == pytest.approx(1.0)
        assert cubic_kernel(1.0)[0, 0] == pytest.approx(math.exp(-1.0))
        assert cubic_kernel(-1.0)[0, 0] == 0.0

    def test_envelope_holds_on_samples(self, cubic_kernel):
        for t in np.linspace(0.0, 20.0, 41):
            norm = abs(cubic_kernel(float(t))[0, 0])
            assert norm <= cubic_kernel.envelope(float(t)) + 1e-12

    def test_positive_exponent_rejected(self, cubic_pair):
        unstable = SdeSystem(1, 1, LinearDrift([[1.0]]), ConstantDiffusion([[0.0]]))
        spectrum = cond.lyapunov_spectrum(unstable, horizon=50.0, seed=0)
        pair = lin.LinearizationPair(unstable, np.array([[1.0]]), (np.zeros((1, 1)),))
        with pytest.raises(UnsupportedDichotomy):
            lin.build_green_kernel(pair, spectrum, epsilon=0.1)


class TestKappaFixedPoint:
    def test_paper_delta_matches_closed_form(self, cubic_pair, cubic_kernel):
        # sup |f0''| = 0.6 delta on the ball gives delta = sqrt(0.9 / 2.4).
        delta = lin.paper_delta(cubic_pair, cubic_kernel)
        assert delta == pytest.approx(math.sqrt(0.9 / 2.4), rel=1e-4)

    def test_linear_system_gives_zero_kappa(self, cubic_kernel):
        pair = lin.linearize_at_fixed_point(scalar_system([0.0, -1.0], [0.0]))
        sol = lin.solve_kappa_fixed_point(pair, cubic_kernel, 0.5, grid_size=51)
        assert sol.iterations_used == 1
        assert sol.sup_norm() == 0.0

    def test_contraction_ratio_within_paper_bound(self, cubic_kappa):
        assert cubic_kappa.contraction_factor_observed <= 0.55
        # Geometric decay: every recorded update shrinks.
        u = cubic_kappa.update_history
        assert all(b < a for a, b in zip(u[:-1], u[1:]))

    def test_sup_norm_bound(self, cubic_kappa):
        assert cubic_kappa.sup_norm() <= cubic_kappa.sup_bound

    def test_fixed_point_residual_small(self, cubic_pair, cubic_kernel, cubic_kappa):
        probes = np.linspace(
            -cubic_kappa.delta, cubic_kappa.delta, 401
        ).reshape(-1, 1)
        resid = lin.kappa_residual(cubic_pair, cubic_kernel, cubic_kappa, probes)
        assert resid < 1e-4

    def test_contraction_violation_guard(self, cubic_kernel, monkeypatch):
        # Understate the curvature so the precondition passes, then watch
        # the iteration actually diverge and trip the guard.
        wild = lin.linearize_at_fixed_point(scalar_system([0.0, -1.0, 0.0, 50.0], [0.0]))
        monkeypatch.setattr(lin, "drift_hessian_sup", lambda pair, radius, probes=512: 1e-6)
        with pytest.raises(ContractionViolated):
            lin.solve_kappa_fixed_point(wild, cubic_kernel, 2.0, grid_size=51, max_iter=40)

    def test_precondition_rejects_oversized_ball(self, cubic_pair, cubic_kernel):
        with pytest.raises(ValueError):
            lin.solve_kappa_fixed_point(cubic_pair, cubic_kernel, 10.0, grid_size=51)

    def test_remainder_scaling_is_cubic(self, cubic_pair, cubic_kernel):
        # sup |kappa| ~ delta^3 since the remainder is 0.1 x^3.
        deltas = np.array([0.2, 0.3, 0.45])
        sups = []
        for d in deltas:
            sol = lin.solve_kappa_fixed_point(
                cubic_pair, cubic_kernel, float(d), grid_size=101, tol=1e-11
            )
            sups.append(sol.sup_norm())
        slope = np.polyfit(np.log(deltas), np.log(sups), 1)[0]
        assert 2.5 < slope < 3.5


class TestConjugacy:
    def test_hg_map_round_trip(self, cubic_kappa):
        h = lin.HartmanGrobmanMap(cubic_kappa)
        x = np.linspace(-0.8 * cubic_kappa.delta, 0.8 * cubic_kappa.delta, 33).reshape(
            -1, 1
        )
        np.testing.assert_allclose(h.inverse(h(x)), x, atol=1e-12)

    def test_flow_commutation_within_interpolation_band(
        self, cubic_pair, cubic_kernel, cubic_kappa
    ):
        probes = np.linspace(
            -cubic_kappa.delta, cubic_kappa.delta, 401
        ).reshape(-1, 1)
        resid = lin.kappa_residual(cubic_pair, cubic_kernel, cubic_kappa, probes)
        flow = lin.flow_commutation_defect(
            cubic_pair, cubic_kappa, np.linspace(0.0, 1.0, 11)
        )
        assert flow <= 5.0 * resid

    def test_linear_system_zero_defect(self, cubic_kernel):
        pair = lin.linearize_at_fixed_point(scalar_system([0.0, -1.0], [0.0]))
        sol = lin.solve_kappa_fixed_point(pair, cubic_kernel, 0.5, grid_size=51)
        lin_sys = SdeSystem(1, 1, LinearDrift([[-1.0]]), ConstantDiffusion([[0.0]]))
        grid = ss.TimeGrid(2.0, 400)
        cfg = ss.EnsembleConfig(lin_sys, lin_sys, [0.3], [0.3], grid, 4, 1)
        ens = ss.simulate_ensemble(cfg)
        est = lin.verify_conjugacy_defect(pair, sol, ens)
        assert est.value == 0.0

    def test_cubic_defect_small_before_exit(self, cubic_pair, cubic_kappa):
        system = scalar_system([0.0, -1.0, 0.0, 0.1], [0.0])
        lin_sys = SdeSystem(1, 1, LinearDrift(cubic_pair.a0), ConstantDiffusion([[0.0]]))
        h = lin.HartmanGrobmanMap(cubic_kappa)
        x0 = np.array([0.4])
        y0 = np.asarray(h(x0), float)
        grid = ss.TimeGrid(3.0, 3000)
        cfg = ss.EnsembleConfig(system, lin_sys, x0, y0, grid, 2, 1)
        ens = ss.simulate_ensemble(cfg)
        est = lin.verify_conjugacy_defect(cubic_pair, sol=cubic_kappa, ensemble=ens)
        # Euler discretization O(dt) per flow plus interpolation of kappa.
        band = (5.0 * grid.dt + 5e-5) ** 2
        assert est.value <= band

    def test_all_paths_exit_immediately(self, cubic_pair, cubic_kappa):
        system = scalar_system([0.0, -1.0, 0.0, 0.1], [0.0])
        grid = ss.TimeGrid(1.0, 100)
        cfg = ss.EnsembleConfig(system, system, [5.0], [5.0], grid, 2, 1)
        ens = ss.simulate_ensemble(cfg)
        with pytest.raises(AllPathsExitImmediately):
            lin.verify_conjugacy_defect(cubic_pair, cubic_kappa, ens)
