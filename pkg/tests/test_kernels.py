import numpy as np
import pytest
from scipy.integrate import quad

from gelsurv.errors import DegenerateNeighborhoodError
from gelsurv.kernels import (
    SUPPORTED_ORDERS,
    KernelSpec,
    default_bandwidth,
    kernel_eval,
    kernel_order_for,
    nw_weight_matrix,
    nw_weights,
)


def moment(order, i, cut=50.0):
    """Quadrature on [-cut, cut] plus an analytic bound on the tails.

    Every kernel decays like u**-4 or faster, so the tail mass of u**i K
    beyond ``cut`` is bounded by a multiple of cut**(i - 3).
    """
    val, err = quad(lambda u: u**i * kernel_eval(order, u), -cut, cut, limit=400,
                    points=[-1, 0, 1], epsabs=1e-12)
    return val, err


class TestKernelEval:
    def test_order2_at_zero(self):
        assert kernel_eval(2, 0.0) == pytest.approx(2 / np.pi, abs=1e-12)

    def test_order4_root(self):
        assert kernel_eval(4, 1.0) == 0.0

    @pytest.mark.parametrize("order", SUPPORTED_ORDERS)
    def test_even(self, order):
        u = np.linspace(-7, 7, 141)
        np.testing.assert_array_equal(kernel_eval(order, u), kernel_eval(order, -u))

    def test_unsupported(self):
        with pytest.raises(ValueError, match="supported"):
            kernel_eval(3, 0.0)

    @pytest.mark.parametrize("order", SUPPORTED_ORDERS)
    def test_value_at_zero(self, order):
        # each normalized member peaks at order / pi
        assert kernel_eval(order, 0.0) == pytest.approx(order / np.pi)

    @pytest.mark.parametrize("order", SUPPORTED_ORDERS)
    def test_moment_conditions(self, order):
        total, _ = moment(order, 0)
        assert abs(total - 1) < 1e-4
        for i in range(2, order, 2):
            val, _ = moment(order, i)
            assert abs(val) < 1e-4, (order, i, val)

    def test_higher_orders_not_nonnegative(self):
        assert kernel_eval(4, 2.0) < 0


class TestOrderAndBandwidth:
    @pytest.mark.parametrize("q, order", [(1, 2), (2, 4), (3, 6), (4, 8), (20, 8)])
    def test_order_for(self, q, order):
        assert kernel_order_for(q) == order

    def test_bandwidth_rate(self):
        assert default_bandwidth(1000, 1) == pytest.approx(1000 ** (-1 / 5))
        assert default_bandwidth(10, 2, constant=3.0) == pytest.approx(3 * 10 ** (-1 / 8))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            KernelSpec(order=5, bandwidth=1.0, conditioning_dim=1)
        with pytest.raises(ValueError):
            KernelSpec(order=2, bandwidth=0.0, conditioning_dim=1)


class TestWeights:
    def test_identical_points_uniform(self):
        pts = np.zeros((7, 3))
        for order in SUPPORTED_ORDERS:
            w = nw_weights(pts, np.zeros(3), KernelSpec(order, 0.3, 3))
            np.testing.assert_allclose(w, np.full(7, 1 / 7), atol=1e-15)

    def test_two_point_order2(self):
        w = nw_weights(np.array([[0.0], [0.7]]), np.array([0.0]), KernelSpec(2, 0.7, 1))
        np.testing.assert_allclose(w, [0.8, 0.2], atol=1e-12)

    def test_truncation_order4(self):
        w = nw_weights(np.array([[0.0], [1.3]]), np.array([0.0]), KernelSpec(4, 1.3, 1))
        np.testing.assert_allclose(w, [1.0, 0.0], atol=1e-12)

    def test_degenerate(self):
        spec = KernelSpec(4, 1.0, 1)
        with pytest.raises(DegenerateNeighborhoodError):
            nw_weights(np.array([[1.0], [-1.0]]), np.array([0.0]), spec)

    def test_degenerate_reports_query_index(self):
        # the second query sits at |u| = 1 from both points, where K4 vanishes
        pts = np.array([[0.0], [-2.0]])
        queries = np.array([[0.0], [-1.0]])
        spec = KernelSpec(4, 1.0, 1)
        with pytest.raises(DegenerateNeighborhoodError) as info:
            nw_weight_matrix(pts, spec, queries=queries)
        assert info.value.query_index == 1

    def test_probability_vectors(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(60, 2))
        for order in SUPPORTED_ORDERS:
            W = nw_weight_matrix(pts, KernelSpec(order, 1.5, 2))
            assert np.all(W >= 0)
            np.testing.assert_allclose(W.sum(axis=1), 1, atol=1e-10)

    def test_huge_bandwidth_uniform(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(25, 3))
        for order in SUPPORTED_ORDERS:
            W = nw_weight_matrix(pts, KernelSpec(order, 1e12, 3))
            np.testing.assert_allclose(W, 1 / 25, atol=1e-6)

    def test_matrix_matches_single_queries(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(30, 2))
        spec = KernelSpec(2, 0.8, 2)
        W = nw_weight_matrix(pts, spec, chunk=7)
        for i in (0, 13, 29):
            np.testing.assert_allclose(W[i], nw_weights(pts, pts[i], spec), rtol=1e-13)
