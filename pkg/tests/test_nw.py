import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnpatch.kernels import GAUSSIAN, Bandwidth, ContractError
from attnpatch.nw import (
    PairedSample,
    linear_problem,
    nw_estimate,
    nw_estimate_many,
    psi,
    quadratic_problem,
    sine_problem,
    verify_theorem1,
)


class TestEstimate:
    def test_single_point_returns_response(self, rng):
        sample = PairedSample([[0.3]], [[1.5, -2.0]])
        for q in rng.normal(size=4):
            np.testing.assert_array_equal(nw_estimate(GAUSSIAN, Bandwidth(0.4, 1), [q], sample), [1.5, -2.0])

    def test_equidistant_pair_averages(self):
        sample = PairedSample([[-1.0], [1.0]], [[2.0], [6.0]])
        assert nw_estimate(GAUSSIAN, Bandwidth(0.8, 1), [0.0], sample)[0] == pytest.approx(4.0)

    def test_far_query_stays_finite(self):
        sample = PairedSample([[0.0], [1.0]], [[1.0], [3.0]])
        out = nw_estimate(GAUSSIAN, Bandwidth(0.01, 1), [500.0], sample)
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(3.0)

    def test_row_mismatch(self):
        with pytest.raises(ContractError):
            PairedSample(np.zeros((3, 1)), np.zeros((2, 1)))

    def test_non_finite_query(self):
        sample = PairedSample([[0.0]], [[1.0]])
        with pytest.raises(ContractError):
            nw_estimate(GAUSSIAN, Bandwidth(1.0, 1), [np.inf], sample)

    def test_sine_rmse(self):
        rng = np.random.default_rng(0)
        n = 10_000
        bw = Bandwidth(n ** (-0.2), 1)
        grid = np.linspace(-1, 1, 21)[:, None]
        sq = []
        for _ in range(50):
            X = rng.standard_normal((n, 1))
            Z = np.sin(X) + 0.1 * rng.standard_normal((n, 1))
            est = nw_estimate_many(GAUSSIAN, bw, grid, PairedSample(X, Z))[:, 0]
            sq.append((est - np.sin(grid[:, 0])) ** 2)
        assert math.sqrt(np.mean(sq)) < 0.05


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(
    X=arrays(np.float64, (12, 1), elements=finite),
    Z=arrays(np.float64, (12, 2), elements=finite),
    q=finite,
    h=st.floats(0.05, 3.0),
    scale=st.floats(-4, 4).filter(lambda c: abs(c) > 1e-3),
    seed=st.integers(0, 2**16),
)
def test_estimator_properties(X, Z, q, h, scale, seed):
    bw = Bandwidth(h, 1)
    est = nw_estimate(GAUSSIAN, bw, [q], PairedSample(X, Z))
    # convex hull, coordinatewise
    assert np.all(est >= Z.min(axis=0) - 1e-9) and np.all(est <= Z.max(axis=0) + 1e-9)
    # permutation invariance
    perm = np.random.default_rng(seed).permutation(12)
    np.testing.assert_allclose(nw_estimate(GAUSSIAN, bw, [q], PairedSample(X[perm], Z[perm])), est, atol=1e-12)
    # response scaling
    np.testing.assert_allclose(
        nw_estimate(GAUSSIAN, bw, [q], PairedSample(X, scale * Z)), scale * est, rtol=1e-10, atol=1e-10
    )


class TestPsi:
    def test_linear_at_mode(self):
        assert psi(linear_problem(slope=3.0), [0.0])[0] == 0.0

    def test_square_at_zero(self):
        assert psi(quadratic_problem(), [0.0])[0] == pytest.approx(1 / math.sqrt(2 * math.pi))

    def test_sine_against_finite_differences(self):
        x, step = 0.5, 1e-4
        f = math.sin
        p = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
        df = (f(x + step) - f(x - step)) / (2 * step)
        d2f = (f(x + step) - 2 * f(x) + f(x - step)) / step**2
        dp = (p(x + step) - p(x - step)) / (2 * step)
        expected = 0.5 * p(x) * d2f + df * dp
        assert psi(sine_problem(), [x])[0] == pytest.approx(expected, rel=1e-6)


class TestTheoremVerifier:
    def test_linear_bias_zero_at_mode(self):
        report = verify_theorem1(linear_problem(sigma=0.1), n_values=[512, 2048], trials=40, grid=[0.0], seed=4)
        bias = report.empirical_bias[0][-1]
        assert abs(bias) < 3 * report.bias_stderr[0][-1]
        assert report.bias_slope is None
        assert report.to_dict()["bias_slope"] == "n/a (Psi=0)"

    def test_predictions_are_closed_form(self):
        report = verify_theorem1(sine_problem(0.1), n_values=[512, 1024], trials=30, grid=[0.5], seed=1)
        h = 512 ** (-0.2)
        p = math.exp(-0.125) / math.sqrt(2 * math.pi)
        assert report.predicted_var[0][0] == pytest.approx(report.Rk * 0.01 / (512 * h * p))
        expected_bias = h**2 * psi(sine_problem(), [0.5])[0] / p
        assert report.predicted_bias[0][0] == pytest.approx(expected_bias)

    def test_low_density_points_skipped(self):
        with pytest.warns(UserWarning, match="density below"):
            report = verify_theorem1(sine_problem(), n_values=[256, 512], trials=30, grid=[0.0, 6.0])
        assert report.skipped == [[6.0]]
        assert report.grid == [0.0]

    def test_insufficient_trials(self):
        with pytest.raises(ContractError):
            verify_theorem1(sine_problem(), trials=10)

    def test_deterministic(self):
        kw = dict(n_values=[256, 512], trials=30, grid=[0.0, 1.0], seed=9)
        a = verify_theorem1(sine_problem(), **kw)
        b = verify_theorem1(sine_problem(), **kw)
        assert a.empirical_var == b.empirical_var and a.empirical_bias == b.empirical_bias
