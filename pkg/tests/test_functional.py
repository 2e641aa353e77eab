import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sdesimilarity as ss
from sdesimilarity.errors import GridMiss
from sdesimilarity.functional import (
    CostKind,
    DefectCurve,
    LogRatioDegree,
    SllnCurve,
    TabulatedDegree,
    Thresholds,
    cost_J_per_path,
)
from tests.conftest import pair_defect_oracle


def ou_difference_second_moment(t, noise_gap=1.0, rate=1.0):
    """E (X_t - Y_t)^2 for the shared-noise pair with equal drift -rate.

    The difference is an Ornstein-Uhlenbeck process with noise coefficient
    equal to the gap of the diffusion constants; from the moment ODE
    dm/dt = -2 rate m + gap^2 the value is gap^2 (1 - e^{-2 rate t}) / (2 rate).
    """
    return noise_gap**2 * (1.0 - math.exp(-2.0 * rate * t)) / (2.0 * rate)


def ou_pair_cost_oracle(horizon, noise_gap=1.0):
    """(1/T) int_0^T E(X_t - Y_t)^2 dt in closed form."""
    return noise_gap**2 * (
        0.5 - (1.0 - math.exp(-2.0 * horizon)) / (4.0 * horizon)
    )


@pytest.fixture(scope="module")
def identical_ensemble():
    grid = ss.TimeGrid(1.0, 500)
    sys_x = ss.linear_system([[-1.0]], [[1.0]])
    cfg = ss.EnsembleConfig(sys_x, sys_x, [1.0], [1.0], grid, 100, 11)
    return ss.simulate_ensemble(cfg)


class TestConjugacyDefect:
    def test_identical_systems_zero(self, identical_ensemble):
        est = ss.conjugacy_defect(identical_ensemble, ss.identity_map(1), 0.5)
        assert est.value == 0.0
        assert est.kind == CostKind.DEFECT_AT_T

    def test_grid_miss(self, identical_ensemble):
        with pytest.raises(GridMiss):
            ss.conjugacy_defect(identical_ensemble, ss.identity_map(1), 0.5001)

    def test_output_pair_zero_at_every_grid_point(self, output_pair_ensemble):
        k = ss.LinearMap([[0.5]])
        for t in (0.5, 1.0, 1.5, 2.0):
            est = ss.conjugacy_defect(output_pair_ensemble, k, t)
            assert est.value <= 3.0 * est.std_error + 10.0 * est.dt

    def test_ou_pair_matches_moment_oracle(self, ou_pair_ensemble):
        for t in (0.25, 0.5, 1.0):
            est = ss.conjugacy_defect(ou_pair_ensemble, ss.identity_map(1), t)
            target = ou_difference_second_moment(t)
            assert abs(est.value - target) < 3.0 * est.std_error + 5.0 * est.dt

    def test_oracle_consistency_with_general_linear_formula(self):
        # The specialized closed form agrees with the joint-moment oracle.
        direct = pair_defect_oracle(
            [[-1.0]], [[1.0]], [[-1.0]], [[2.0]], [0.0], [0.0], [[1.0]], 0.75,
            quad_steps=50_000,
        )
        assert abs(direct - ou_difference_second_moment(0.75)) < 1e-6


class TestCostJ:
    def test_identical_systems_zero(self, identical_ensemble):
        assert ss.cost_J(identical_ensemble, ss.identity_map(1)).value == 0.0

    def test_output_pair_conjugate(self, output_pair_ensemble):
        est = ss.cost_J(output_pair_ensemble, ss.LinearMap([[0.5]]))
        assert est.value <= 3.0 * est.std_error + 10.0 * est.dt

    def test_ou_pair_against_analytic_integral(self, ou_pair_ensemble):
        est = ss.cost_J(ou_pair_ensemble, ss.identity_map(1))
        target = ou_pair_cost_oracle(1.0)
        assert abs(est.value - target) < 3.0 * est.std_error + 5.0 * est.dt

    def test_invariant_under_path_doubling(self):
        grid = ss.TimeGrid(1.0, 200)
        sys_x = ss.linear_system([[-1.0]], [[1.0]])
        sys_y = ss.linear_system([[-1.0]], [[2.0]])
        a = ss.simulate_ensemble(
            ss.EnsembleConfig(sys_x, sys_y, [0.0], [0.0], grid, 1500, 21)
        )
        b = ss.simulate_ensemble(
            ss.EnsembleConfig(sys_x, sys_y, [0.0], [0.0], grid, 3000, 22)
        )
        ja = ss.cost_J(a, ss.identity_map(1))
        jb = ss.cost_J(b, ss.identity_map(1))
        assert abs(ja.value - jb.value) < 3.0 * (ja.std_error + jb.std_error)


class TestCostJSemi:
    def test_semi_reduces_to_J_bitwise(self, ou_pair_ensemble):
        k = ss.identity_map(1)
        semi = ss.cost_J_semi(ou_pair_ensemble, k, k)
        plain = ss.cost_J(ou_pair_ensemble, k)
        assert semi.value == plain.value
        assert semi.std_error == plain.std_error

    def test_identical_systems_zero(self, identical_ensemble):
        k = ss.identity_map(1)
        assert ss.cost_J_semi(identical_ensemble, k, k).value == 0.0

    def test_matched_gain_cancels_noise_exactly(self, ou_pair_ensemble):
        # R = 2I makes the difference process deterministic and zero.
        est = ss.cost_J_semi(
            ou_pair_ensemble, ss.identity_map(1), ss.LinearMap([[2.0]])
        )
        assert est.value == 0.0

    def test_intermediate_gain_against_oracle(self, ou_pair_ensemble):
        # R = 1.5 I leaves noise coefficient 1.5 - 2 = -0.5.
        est = ss.cost_J_semi(
            ou_pair_ensemble, ss.identity_map(1), ss.LinearMap([[1.5]])
        )
        target = 0.25 * ou_pair_cost_oracle(1.0)
        assert abs(est.value - target) < 3.0 * est.std_error + 5.0 * est.dt


class TestTerminalCost:
    def test_identical_systems_zero(self, identical_ensemble):
        assert ss.terminal_cost_Jtilde(identical_ensemble, ss.identity_map(1)).value == 0.0

    def test_output_pair(self, output_pair_ensemble):
        est = ss.terminal_cost_Jtilde(output_pair_ensemble, ss.LinearMap([[0.5]]))
        assert est.value <= 3.0 * est.std_error + 10.0 * est.dt

    def test_half_normal_terminal_moment(self, ou_pair_ensemble):
        est = ss.terminal_cost_Jtilde(ou_pair_ensemble, ss.identity_map(1))
        var_t = ou_difference_second_moment(1.0)
        target = ou_pair_cost_oracle(1.0) + math.sqrt(2.0 * var_t / math.pi)
        assert abs(est.value - target) < 3.0 * est.std_error + 5.0 * est.dt

    def test_jensen_relation_on_conjugate_pair(self, output_pair_ensemble):
        # Squared defect ~ 0 forces the first-moment defect below its root.
        k = ss.LinearMap([[0.5]])
        sq = ss.conjugacy_defect(output_pair_ensemble, k, 2.0)
        psi = ss.apply(k, output_pair_ensemble.x[:, -1]) - output_pair_ensemble.y[:, -1]
        first_moment = float(np.abs(psi).mean())
        assert first_moment <= math.sqrt(sq.value + 3 * sq.std_error) + 1e-12


class TestSimilarityDegree:
    def test_zero_gives_one(self):
        assert ss.similarity_degree(0.0) == 1.0

    def test_unit_value(self):
        assert ss.similarity_degree(1.0) == pytest.approx(math.log(2.0))

    def test_large_value_decays(self):
        assert ss.similarity_degree(1e9) < 1e-7

    def test_negative_noise_clamped(self):
        assert ss.similarity_degree(-1e-9) == 1.0

    @given(
        st.floats(min_value=0.0, max_value=1e6, allow_nan=False),
        st.floats(min_value=0.0, max_value=1e6, allow_nan=False),
    )
    @settings(max_examples=50, deadline=None)
    def test_monotone_decreasing(self, j1, j2):
        lo, hi = sorted((j1, j2))
        assert ss.similarity_degree(lo) >= ss.similarity_degree(hi)

    def test_tabulated_degree_validation(self):
        xs = np.array([0.0, 1.0, 1e3, 1e9])
        good = TabulatedDegree(xs, [1.0, 0.5, 1e-3, 1e-9])
        assert good(0.0) == 1.0
        with pytest.raises(ValueError):
            TabulatedDegree(xs, [0.9, 0.5, 1e-3, 1e-9])  # rho(0) != 1
        with pytest.raises(ValueError):
            TabulatedDegree(xs, [1.0, 0.5, 0.6, 1e-9])  # not decreasing


class TestSllnCurve:
    def test_identical_systems_flat_zero(self, identical_ensemble):
        curve = ss.slln_curve(identical_ensemble, ss.identity_map(1))
        assert np.all(curve.running_average == 0.0)

    def test_stable_pair_flattens(self):
        grid = ss.TimeGrid(50.0, 5000)
        sys_x = ss.linear_system([[-1.0]], [[1.0]])
        sys_y = ss.linear_system([[-1.0]], [[2.0]])
        cfg = ss.EnsembleConfig(sys_x, sys_y, [0.0], [0.0], grid, 1000, 33)
        ens = ss.simulate_ensemble(cfg)
        curve = ss.slln_curve(ens, ss.identity_map(1))
        final = curve.running_average[-1]
        half = curve.running_average[len(curve.times) // 2]
        assert abs(final - half) / abs(final) <= 0.1
        # Stationary second moment of the difference process is 1/2.
        assert abs(final - 0.5) < 0.05

    def test_unstable_average_diverges(self):
        grid = ss.TimeGrid(10.0, 2000)
        sys_x = ss.linear_system([[0.5]], [[1.0]])
        sys_y = ss.linear_system([[-1.0]], [[1.0]])
        cfg = ss.EnsembleConfig(sys_x, sys_y, [1.0], [1.0], grid, 200, 44)
        ens = ss.simulate_ensemble(cfg)
        curve = ss.slln_curve(ens, ss.identity_map(1))
        tail = curve.running_average[curve.times >= 5.0]
        assert np.all(np.diff(tail) > 0)


class TestClassify:
    def test_output_pair_complete(self, output_pair_ensemble):
        k = ss.LinearMap([[0.5]])
        curve = ss.defect_curve(output_pair_ensemble, k)
        slln = ss.slln_curve(output_pair_ensemble, k)
        probe = ss.assumption_probe(
            output_pair_ensemble.config.sys_x, 2000, radius=10.0, seed=0
        )
        thresholds = ss.make_thresholds(curve, output_pair_ensemble.grid.dt, probe.l_hat)
        verdict = ss.classify_similarity(curve, slln, thresholds)
        assert verdict.classification == ss.SimilarityClass.COMPLETE
        j = ss.cost_J(output_pair_ensemble, k)
        assert ss.similarity_degree(j.value) >= 0.999

    def test_equal_spectrum_deterministic_asymptotic(self):
        # Same eigenvalues in different bases: defect decays but is not zero.
        theta = 0.5
        rot = np.array(
            [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
        )
        a = np.diag([-1.0, -2.0])
        c = rot @ a @ rot.T
        grid = ss.TimeGrid(12.0, 2400)
        sys_x = ss.linear_system(a, np.zeros((2, 1)))
        sys_y = ss.linear_system(c, np.zeros((2, 1)))
        cfg = ss.EnsembleConfig(sys_x, sys_y, [1.0, 1.0], [1.0, 1.0], grid, 4, 1)
        ens = ss.simulate_ensemble(cfg)
        k = ss.identity_map(2)
        curve = ss.defect_curve(ens, k)
        slln = ss.slln_curve(ens, k)
        verdict = ss.classify_similarity(
            curve, slln, Thresholds(1e-10, 1e-4, 1e-4)
        )
        assert verdict.classification == ss.SimilarityClass.ASYMPTOTIC

    def test_positive_mismatch_undetermined(self):
        grid = ss.TimeGrid(10.0, 1000)
        sys_x = ss.linear_system([[0.5]], [[0.0]])
        sys_y = ss.linear_system([[-0.5]], [[0.0]])
        cfg = ss.EnsembleConfig(sys_x, sys_y, [1.0], [1.0], grid, 2, 1)
        ens = ss.simulate_ensemble(cfg)
        k = ss.identity_map(1)
        curve = ss.defect_curve(ens, k)
        slln = ss.slln_curve(ens, k)
        verdict = ss.classify_similarity(curve, slln, Thresholds(1e-8, 1e-8, 1e-8))
        assert verdict.classification == ss.SimilarityClass.UNDETERMINED

    def test_weak_branch_on_synthetic_curves(self):
        # Defect plateaus above the asymptotic band, but its time average is
        # small: only weak similarity can be concluded.
        t = np.linspace(0.0, 10.0, 101)
        defect = np.full_like(t, 5e-4)
        curve = DefectCurve(t, defect, np.zeros_like(t))
        slln = SllnCurve(t, np.full_like(t, 5e-4))
        verdict = ss.classify_similarity(curve, slln, Thresholds(1e-8, 1e-8, 1e-3))
        assert verdict.classification == ss.SimilarityClass.WEAK

    def test_implication_chain_order(self):
        # A curve below every band classifies Complete, never a weaker class.
        t = np.linspace(0.0, 1.0, 11)
        curve = DefectCurve(t, np.zeros_like(t), np.zeros_like(t))
        slln = SllnCurve(t, np.zeros_like(t))
        verdict = ss.classify_similarity(curve, slln, Thresholds(1e-8, 1e-8, 1e-8))
        assert verdict.classification == ss.SimilarityClass.COMPLETE


class TestPerPathHelper:
    def test_mean_matches_cost_J(self, ou_pair_ensemble):
        k = ss.identity_map(1)
        per_path = cost_J_per_path(ou_pair_ensemble, k)
        est = ss.cost_J(ou_pair_ensemble, k)
        assert float(per_path.mean()) == est.value
