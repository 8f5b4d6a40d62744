import numpy as np
import pytest

from hyperrec import hypgeo
from hyperrec.errors import InvalidInputError

# Frozen reference values, evaluated with 40-digit arithmetic.
MOBIUS_NEG03_PLUS_NEG03 = -0.5504587155963302752293577981651376146789
TWO_ATANH_03 = 0.6190392084062234309481346981221388751682
DIST_03_TO_NEG03 = 1.238078416812446861896269396244277750336
TANH_05 = 0.4621171572600097585023184836436725487303


def random_ball_points(rng, count, dim, c, max_radius=0.9):
    """Uniform directions with norms up to max_radius/sqrt(c)."""
    v = rng.normal(size=(count, dim))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    radii = rng.uniform(0.0, max_radius / np.sqrt(c), size=(count, 1))
    return v * radii


class TestMobiusAdd:
    def test_zero_is_left_identity(self):
        y = np.array([0.31, -0.2, 0.11])
        out = hypgeo.mobius_add(np.zeros(3), y, c=1.0)
        assert np.array_equal(out, y)

    def test_left_inverse_cancels(self):
        rng = np.random.default_rng(7)
        x = random_ball_points(rng, 100, 5, c=1.0)
        out = hypgeo.mobius_add(-x, x, c=1.0)
        assert np.max(np.abs(out)) < 1e-15

    def test_reference_value(self):
        x = np.array([0.3, 0.0])
        out = hypgeo.mobius_add(-x, np.array([-0.3, 0.0]), c=1.0)
        assert out[0] == pytest.approx(MOBIUS_NEG03_PLUS_NEG03, abs=1e-12)
        assert out[1] == 0.0

    def test_non_finite_input_rejected(self):
        with pytest.raises(InvalidInputError):
            hypgeo.mobius_add(np.array([np.nan, 0.0]), np.zeros(2), c=1.0)

    def test_zero_curvature_rejected(self):
        with pytest.raises(InvalidInputError):
            hypgeo.mobius_add(np.zeros(2), np.zeros(2), c=0.0)


class TestHypDistance:
    def test_self_distance_is_zero(self):
        x = np.array([0.2, -0.4, 0.1])
        assert hypgeo.hyp_distance(x, x, c=1.0) == pytest.approx(0.0, abs=1e-12)

    def test_origin_closed_form(self):
        d = hypgeo.hyp_distance(np.array([0.3, 0.0]), np.zeros(2), c=1.0)
        assert d == pytest.approx(TWO_ATANH_03, abs=1e-12)

    def test_geodesic_through_origin(self):
        d = hypgeo.hyp_distance(np.array([0.3, 0.0]), np.array([-0.3, 0.0]), c=1.0)
        assert d == pytest.approx(DIST_03_TO_NEG03, abs=1e-12)
        assert d == pytest.approx(2.0 * TWO_ATANH_03, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(11)
        x = random_ball_points(rng, 10_000, 8, c=1.0)
        y = random_ball_points(rng, 10_000, 8, c=1.0)
        forward = hypgeo.hyp_distance(x, y, c=1.0)
        reverse = hypgeo.hyp_distance(y, x, c=1.0)
        assert np.max(np.abs(forward - reverse)) < 1e-10

    def test_left_cancellation(self):
        rng = np.random.default_rng(13)
        c = 0.8
        x = random_ball_points(rng, 10_000, 6, c=c)
        y = random_ball_points(rng, 10_000, 6, c=c)
        restored = hypgeo.mobius_add(-x, hypgeo.mobius_add(x, y, c), c)
        assert np.max(np.abs(restored - y)) < 1e-9

    def test_flat_limit_matches_twice_euclidean(self):
        rng = np.random.default_rng(17)
        c = 1e-6
        x = rng.uniform(-0.7, 0.7, size=(10_000, 4))
        y = rng.uniform(-0.7, 0.7, size=(10_000, 4))
        hyp = hypgeo.hyp_distance(x, y, c)
        euc = hypgeo.euclid_distance(x, y)
        keep = euc > 1e-6
        rel = np.abs(hyp[keep] - 2.0 * euc[keep]) / (2.0 * euc[keep])
        assert np.max(rel) < 1e-3

    def test_origin_formula_property(self):
        rng = np.random.default_rng(19)
        c = 2.5
        x = random_ball_points(rng, 10_000, 5, c=c)
        d = hypgeo.hyp_distance(x, np.zeros(5), c)
        expected = (2.0 / np.sqrt(c)) * np.arctanh(np.sqrt(c) * np.linalg.norm(x, axis=-1))
        assert np.max(np.abs(d - expected)) < 1e-9


class TestConformalFactor:
    def test_origin(self):
        assert hypgeo.conformal_factor(np.zeros(4), c=1.0) == 2.0

    def test_half_norm_squared(self):
        q = np.array([0.5, 0.5])  # |q|^2 = 0.5 exactly
        assert hypgeo.conformal_factor(q, c=1.0) == pytest.approx(4.0, abs=1e-12)

    def test_flat_limit(self):
        assert hypgeo.conformal_factor(np.array([3.0, 4.0]), c=0.0) == 2.0

    def test_outside_ball_rejected(self):
        with pytest.raises(InvalidInputError):
            hypgeo.conformal_factor(np.array([1.2, 0.0]), c=1.0)


class TestExpMap:
    def test_zero_tangent_returns_basepoint_exactly(self):
        q = np.array([0.21, -0.35, 0.1])
        out = hypgeo.exp_map(q, np.zeros(3), c=1.0)
        assert np.array_equal(out, q)

    def test_origin_closed_form(self):
        out = hypgeo.exp_map(np.zeros(2), np.array([0.5, 0.0]), c=1.0)
        assert out[0] == pytest.approx(TANH_05, abs=1e-12)
        assert out[1] == 0.0

    def test_output_always_inside_ball(self):
        rng = np.random.default_rng(23)
        c = 1.7
        q = random_ball_points(rng, 1000, 4, c=c)
        z = rng.normal(scale=5.0, size=(1000, 4))
        out = hypgeo.exp_map(q, z, c)
        assert np.all(c * np.sum(out * out, axis=-1) < 1.0)


class TestProjectToBall:
    def test_interior_point_untouched(self):
        x = np.array([0.3, 0.4])
        assert np.array_equal(hypgeo.project_to_ball(x, c=1.0), x)

    def test_exterior_point_rescaled(self):
        out = hypgeo.project_to_ball(np.array([2.0, 0.0]), c=1.0)
        assert out[0] == pytest.approx(1.0 - hypgeo.EPS_BALL, abs=1e-15)
        assert out[1] == 0.0

    def test_origin_fixed(self):
        out = hypgeo.project_to_ball(np.zeros(2), c=1.0)
        assert np.array_equal(out, np.zeros(2))

    def test_closure_under_all_operations(self):
        rng = np.random.default_rng(29)
        c = 3.0
        x = random_ball_points(rng, 10_000, 3, c=c, max_radius=0.999)
        y = random_ball_points(rng, 10_000, 3, c=c, max_radius=0.999)
        for produced in (
            hypgeo.mobius_add(x, y, c),
            hypgeo.exp_map(x, rng.normal(scale=10, size=x.shape), c),
            hypgeo.project_to_ball(x * 100, c),
        ):
            assert np.all(c * np.sum(produced * produced, axis=-1) < 1.0)


class TestEuclidDistance:
    def test_self_distance(self):
        x = np.array([1.0, 2.0, 3.0])
        assert hypgeo.euclid_distance(x, x) == 0.0

    def test_three_four_five(self):
        assert hypgeo.euclid_distance(np.array([3.0, 0.0]), np.array([0.0, 4.0])) == 5.0

    def test_one_dimensional(self):
        assert hypgeo.euclid_distance(np.array([1.0]), np.array([-1.0])) == 2.0

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            hypgeo.euclid_distance(np.zeros(2), np.zeros(3))
