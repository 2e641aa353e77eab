import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sdesimilarity as ss
from sdesimilarity.errors import DimensionMismatch, ExtrapolationWarning, SingularMap
from sdesimilarity.mapping import (
    AffineMap,
    LinearMap,
    Tabulated1d,
    check_homeomorphism,
    mapping_from_dict,
    perturbed,
    tabulated_from_csv,
    tabulated_to_csv,
)


class TestApply:
    def test_identity(self):
        k = LinearMap(np.eye(3))
        x = np.array([1.0, -2.0, 0.5])
        assert np.array_equal(ss.apply(k, x), x)

    def test_output_system_gain(self):
        # K* = C A^{-1} for A = 2, C = 1 sends 4 to 2.
        k = LinearMap([[0.5]])
        assert ss.apply(k, np.array([4.0]))[0] == 2.0

    def test_affine_offset(self):
        k = AffineMap(np.eye(2), [1.0, 0.0])
        np.testing.assert_allclose(ss.apply(k, np.zeros(2)), [1.0, 0.0])

    def test_dimension_mismatch(self):
        k = LinearMap(np.eye(2))
        with pytest.raises(DimensionMismatch):
            ss.apply(k, np.zeros(3))

    def test_batched_apply(self):
        k = LinearMap([[2.0, 0.0], [0.0, 3.0]])
        x = np.ones((4, 5, 2))
        out = ss.apply(k, x)
        assert out.shape == (4, 5, 2)
        assert np.all(out[..., 0] == 2.0)
        assert np.all(out[..., 1] == 3.0)


class TestJacobian:
    def test_linear_jacobian_constant(self):
        mat = np.array([[1.0, 2.0], [0.0, -1.0]])
        k = LinearMap(mat)
        x = np.random.default_rng(0).standard_normal((10, 2))
        jac = ss.jacobian(k, x)
        assert jac.shape == (10, 2, 2)
        assert np.all(jac == mat)

    def test_tabulated_identity_derivative(self):
        knots = np.linspace(-1.0, 1.0, 21)
        k = Tabulated1d(knots, knots)
        probes = np.linspace(-0.9, 0.9, 17).reshape(-1, 1)
        d = ss.jacobian(k, probes)[..., 0, 0]
        np.testing.assert_allclose(d, 1.0, atol=1e-8)

    def test_tabulated_square_derivative(self):
        knots = np.linspace(1.0, 2.0, 201)
        k = Tabulated1d(knots, knots**2)
        d = ss.jacobian(k, np.array([1.5]))
        assert abs(d[0, 0] - 3.0) < 1e-3


class TestInverse:
    def test_identity_inverse(self):
        k = LinearMap(np.eye(2))
        y = np.array([0.3, -0.7])
        assert np.array_equal(ss.inverse_apply(k, y), y)

    def test_scalar_half_inverse(self):
        k = LinearMap([[0.5]])
        assert ss.inverse_apply(k, np.array([2.0]))[0] == 4.0

    def test_tabulated_round_trip(self):
        knots = np.linspace(0.0, 2.0, 41)
        k = Tabulated1d(knots, np.sinh(knots))
        probes = np.linspace(0.05, 1.95, 100).reshape(-1, 1)
        images = ss.apply(k, probes)
        back = ss.inverse_apply(k, images)
        assert np.abs(back - probes).max() <= 1e-8

    def test_decreasing_tabulated_inverse(self):
        knots = np.linspace(-1.0, 1.0, 21)
        k = Tabulated1d(knots, -knots)
        assert abs(ss.inverse_apply(k, np.array([0.5]))[0] + 0.5) < 1e-10

    def test_singular_map_raises(self):
        k = LinearMap([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(SingularMap):
            ss.inverse_apply(k, np.ones(2))

    @given(
        st.lists(
            st.floats(min_value=-2.0, max_value=2.0, allow_nan=False),
            min_size=2,
            max_size=2,
        )
    )
    @settings(max_examples=25, deadline=None)
    def test_linear_round_trip_property(self, y):
        k = LinearMap([[2.0, 1.0], [0.5, 3.0]])
        y = np.asarray(y)
        assert np.abs(ss.apply(k, ss.inverse_apply(k, y)) - y).max() < 1e-10


class TestTabulatedInvariants:
    @given(
        st.lists(
            st.floats(min_value=0.01, max_value=1.0, allow_nan=False),
            min_size=4,
            max_size=12,
        )
    )
    @settings(max_examples=30, deadline=None)
    def test_monotone_values_give_monotone_map(self, gaps):
        values = np.cumsum(np.asarray(gaps))
        knots = np.linspace(0.0, 1.0, len(values))
        k = Tabulated1d(knots, values)
        probes = np.linspace(0.0, 1.0, 33)
        images = ss.apply(k, probes.reshape(-1, 1))[:, 0]
        assert np.all(np.diff(images) > 0)

    def test_non_monotone_rejected(self):
        with pytest.raises(SingularMap):
            Tabulated1d([0.0, 1.0, 2.0], [0.0, 1.0, 0.5])

    def test_non_monotone_allowed_with_flag(self):
        k = Tabulated1d([0.0, 1.0, 2.0], [0.0, 1.0, 0.5], require_monotone=False)
        assert not k.strictly_monotone

    def test_extrapolation_warns(self):
        k = Tabulated1d([0.0, 1.0], [0.0, 1.0])
        with pytest.warns(ExtrapolationWarning):
            ss.apply(k, np.array([2.0]))


@pytest.fixture(scope="module")
def small_ensemble():
    grid = ss.TimeGrid(1.0, 100)
    sys_x = ss.linear_system([[-1.0]], [[1.0]])
    cfg = ss.EnsembleConfig(sys_x, sys_x, [1.0], [1.0], grid, 20, 3)
    return ss.simulate_ensemble(cfg)


class TestCheckHomeomorphism:
    def test_identity_report(self, small_ensemble):
        report = check_homeomorphism(ss.identity_map(1), small_ensemble)
        assert report.is_injective_on_sample
        assert report.min_jacobian_singular_value == pytest.approx(1.0)

    def test_zero_row_not_injective(self):
        grid = ss.TimeGrid(1.0, 50)
        sys_x = ss.linear_system(-np.eye(2), np.eye(2))
        cfg = ss.EnsembleConfig(sys_x, sys_x, [1.0, 1.0], [1.0, 1.0], grid, 10, 5)
        ens = ss.simulate_ensemble(cfg)
        k = LinearMap([[1.0, 0.0], [0.0, 0.0]])
        report = check_homeomorphism(k, ens)
        assert not report.is_injective_on_sample
        assert report.min_jacobian_singular_value == 0.0

    def test_monotone_tabulated_injective(self, small_ensemble):
        hull = float(np.abs(small_ensemble.x).max()) + 1.0
        knots = np.linspace(-hull, hull, 31)
        k = Tabulated1d(knots, knots + 0.1 * np.tanh(knots))
        report = check_homeomorphism(k, small_ensemble)
        assert report.is_injective_on_sample


class TestSerialization:
    @pytest.mark.parametrize(
        "mapping",
        [
            LinearMap([[0.5, 0.1], [0.0, 2.0]]),
            AffineMap([[1.5]], [0.25]),
            Tabulated1d([0.0, 0.5, 1.0], [0.0, 0.9, 1.7]),
        ],
    )
    def test_dict_round_trip(self, mapping):
        clone = mapping_from_dict(mapping.to_dict())
        probes = np.linspace(0.05, 0.95, 7).reshape(-1, 1)
        if mapping.kind != "tabulated1d":
            probes = np.tile(probes, (1, mapping.dim))
        np.testing.assert_allclose(ss.apply(clone, probes), ss.apply(mapping, probes))

    def test_csv_round_trip(self, tmp_path):
        k = Tabulated1d([0.0, 1.0, 2.0], [0.0, 1.5, 2.1])
        f = tmp_path / "knots.csv"
        tabulated_to_csv(k, f)
        clone = tabulated_from_csv(f)
        assert np.array_equal(clone.knots, k.knots)
        assert np.array_equal(clone.values, k.values)


class TestPerturbed:
    def test_linear_perturbation(self):
        k = LinearMap([[1.0]])
        direction = LinearMap([[2.0]])
        k2 = perturbed(k, direction, 0.25)
        assert k2.matrix[0, 0] == 1.5

    def test_family_mismatch(self):
        with pytest.raises(DimensionMismatch):
            perturbed(LinearMap([[1.0]]), AffineMap([[1.0]], [0.0]), 0.1)
